#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <sqlite3.h>

#include "treeact/common.hpp"

namespace treeact {

// Relational cell: null, integer, real or text.
using SqlValue = std::variant<std::monostate, std::int64_t, double, std::string>;

struct ResultTable {
    std::vector<std::string> column_names;
    std::vector<std::vector<SqlValue>> rows;

    std::string to_text(size_t max_rows = 100) const {
        std::ostringstream os;
        for (size_t i = 0; i < column_names.size(); ++i) {
            if (i) os << " | ";
            os << column_names[i];
        }
        os << '\n';
        size_t shown = 0;
        for (const auto& row : rows) {
            if (shown++ >= max_rows) {
                os << "... (" << (rows.size() - max_rows) << " more rows)\n";
                break;
            }
            for (size_t i = 0; i < row.size(); ++i) {
                if (i) os << " | ";
                os << value_text(row[i]);
            }
            os << '\n';
        }
        if (rows.empty()) os << "(no rows)\n";
        return os.str();
    }

    static std::string value_text(const SqlValue& v) {
        if (std::holds_alternative<std::monostate>(v)) return "NULL";
        if (std::holds_alternative<std::int64_t>(v)) return std::to_string(std::get<std::int64_t>(v));
        if (std::holds_alternative<double>(v)) {
            std::ostringstream os;
            os << std::get<double>(v);
            return os.str();
        }
        return std::get<std::string>(v);
    }
};

enum class SqlErrorKind { syntax, unknown_table, write_attempted, other };

struct SqlError {
    SqlErrorKind kind = SqlErrorKind::other;
    std::string message; // engine message, fed back to sub-agents verbatim

    std::string describe() const {
        switch (kind) {
            case SqlErrorKind::syntax: return "SQL syntax error: " + message;
            case SqlErrorKind::unknown_table: return "unknown table: " + message;
            case SqlErrorKind::write_attempted: return "write attempted, queries are read-only: " + message;
            default: return "SQL error: " + message;
        }
    }
};

struct SqlOutcome {
    std::optional<ResultTable> table;
    std::optional<SqlError> error;

    bool ok() const { return table.has_value(); }
};

// Thin ownership wrapper over a sqlite3 connection. Construction-time writes
// go through exec_raw(); once finalize_read_only() has been called every write
// path is rejected, which is what the query surface exposed to tools relies on.
class SqlStore {
public:
    SqlStore() { open(":memory:", /*writable=*/true); }

    explicit SqlStore(const std::string& path, bool writable = true) { open(path, writable); }

    SqlStore(SqlStore&& other) noexcept {
        std::lock_guard lk(other.mu_);
        db_ = other.db_;
        read_only_ = other.read_only_;
        other.db_ = nullptr;
    }
    SqlStore& operator=(SqlStore&& other) noexcept {
        if (this != &other) {
            close();
            std::scoped_lock lk(mu_, other.mu_);
            db_ = other.db_;
            read_only_ = other.read_only_;
            other.db_ = nullptr;
        }
        return *this;
    }
    SqlStore(const SqlStore&) = delete;
    SqlStore& operator=(const SqlStore&) = delete;

    ~SqlStore() { close(); }

    // Unrestricted statement execution for store construction. Throws on error.
    void exec_raw(const std::string& sql) {
        std::lock_guard lk(mu_);
        if (read_only_) throw std::logic_error("SqlStore: exec_raw after finalize_read_only");
        char* err = nullptr;
        if (sqlite3_exec(db_, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
            std::string msg = err ? err : "unknown sqlite error";
            sqlite3_free(err);
            throw std::runtime_error("sqlite: " + msg + " [" + sql + "]");
        }
    }

    void exec_raw(const std::string& sql, const std::vector<SqlValue>& params) {
        std::lock_guard lk(mu_);
        if (read_only_) throw std::logic_error("SqlStore: exec_raw after finalize_read_only");
        sqlite3_stmt* stmt = nullptr;
        if (sqlite3_prepare_v2(db_, sql.c_str(), -1, &stmt, nullptr) != SQLITE_OK)
            throw std::runtime_error(std::string("sqlite prepare: ") + sqlite3_errmsg(db_));
        bind_params(stmt, params);
        int rc = sqlite3_step(stmt);
        sqlite3_finalize(stmt);
        if (rc != SQLITE_DONE && rc != SQLITE_ROW)
            throw std::runtime_error(std::string("sqlite step: ") + sqlite3_errmsg(db_));
    }

    void finalize_read_only() {
        std::lock_guard lk(mu_);
        read_only_ = true;
    }

    bool read_only() const {
        std::lock_guard lk(mu_);
        return read_only_;
    }

    // Guarded query path: single statement, SELECT-only via authorizer plus
    // sqlite3_stmt_readonly. Never mutates the store.
    SqlOutcome execute(const std::string& query) const {
        std::lock_guard lk(mu_);
        SqlOutcome out;

        sqlite3_set_authorizer(db_, &SqlStore::deny_writes, nullptr);
        sqlite3_stmt* stmt = nullptr;
        const char* tail = nullptr;
        int rc = sqlite3_prepare_v2(db_, query.c_str(), -1, &stmt, &tail);
        sqlite3_set_authorizer(db_, nullptr, nullptr);

        if (rc != SQLITE_OK) {
            out.error = classify_error(rc, sqlite3_errmsg(db_));
            if (stmt) sqlite3_finalize(stmt);
            return out;
        }
        if (!stmt) {
            out.error = SqlError{SqlErrorKind::syntax, "empty statement"};
            return out;
        }
        if (tail && !trim(tail).empty()) {
            sqlite3_finalize(stmt);
            out.error = SqlError{SqlErrorKind::syntax, "multiple statements are not allowed"};
            return out;
        }
        if (!sqlite3_stmt_readonly(stmt)) {
            sqlite3_finalize(stmt);
            out.error = SqlError{SqlErrorKind::write_attempted, "statement is not read-only"};
            return out;
        }

        ResultTable table;
        int cols = sqlite3_column_count(stmt);
        for (int i = 0; i < cols; ++i) {
            const char* name = sqlite3_column_name(stmt, i);
            table.column_names.push_back(name ? name : "");
        }
        while ((rc = sqlite3_step(stmt)) == SQLITE_ROW) {
            std::vector<SqlValue> row;
            row.reserve(static_cast<size_t>(cols));
            for (int i = 0; i < cols; ++i) row.push_back(read_column(stmt, i));
            table.rows.push_back(std::move(row));
        }
        if (rc != SQLITE_DONE) {
            out.error = classify_error(rc, sqlite3_errmsg(db_));
            sqlite3_finalize(stmt);
            return out;
        }
        sqlite3_finalize(stmt);
        out.table = std::move(table);
        return out;
    }

    // User tables sorted by name. Internal bookkeeping tables are hidden from
    // the query surface descriptions (but stay queryable, they are read-only).
    std::vector<std::string> table_names() const {
        auto res = execute(
            "SELECT name FROM sqlite_master WHERE type='table' "
            "AND name NOT LIKE 'sqlite_%' AND name <> 'session_meta' ORDER BY name");
        std::vector<std::string> names;
        if (res.ok())
            for (const auto& row : res.table->rows)
                if (!row.empty() && std::holds_alternative<std::string>(row[0]))
                    names.push_back(std::get<std::string>(row[0]));
        return names;
    }

    // Deterministic listing of tables, columns and one sample row per table.
    std::string describe_schema() const {
        std::ostringstream os;
        for (const auto& name : table_names()) {
            os << "Table " << name << "(";
            auto info = unguarded_query("PRAGMA table_info(" + name + ")");
            bool first = true;
            for (const auto& row : info.rows) {
                if (!first) os << ", ";
                first = false;
                os << ResultTable::value_text(row[1]) << " " << ResultTable::value_text(row[2]);
            }
            os << ")\n";
            auto sample = execute("SELECT * FROM " + name + " LIMIT 1");
            if (sample.ok() && !sample.table->rows.empty()) {
                os << "  sample: ";
                const auto& row = sample.table->rows[0];
                for (size_t i = 0; i < row.size(); ++i) {
                    if (i) os << " | ";
                    os << ResultTable::value_text(row[i]);
                }
                os << '\n';
            } else {
                os << "  (empty)\n";
            }
        }
        return os.str();
    }

    // Content hash over every user table, row order as stored. Used by purity
    // checks (tables hash-equal before/after query sequences).
    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64("treeact-store");
        for (const auto& name : table_names()) {
            h = fnv1a64(name, h);
            auto res = execute("SELECT * FROM " + name);
            if (!res.ok()) continue;
            for (const auto& row : res.table->rows) {
                for (const auto& v : row) {
                    h = fnv1a64("|", h);
                    h = fnv1a64(ResultTable::value_text(v), h);
                }
                h = fnv1a64("\n", h);
            }
        }
        return h;
    }

    std::int64_t count(const std::string& table) const {
        auto res = execute("SELECT COUNT(*) FROM " + table);
        if (!res.ok() || res.table->rows.empty()) return -1;
        const auto& v = res.table->rows[0][0];
        return std::holds_alternative<std::int64_t>(v) ? std::get<std::int64_t>(v) : -1;
    }

    sqlite3* handle() const { return db_; }

private:
    // Internal reads (PRAGMAs) that the tool-facing authorizer would reject.
    ResultTable unguarded_query(const std::string& sql) const {
        std::lock_guard lk(mu_);
        ResultTable table;
        sqlite3_stmt* stmt = nullptr;
        if (sqlite3_prepare_v2(db_, sql.c_str(), -1, &stmt, nullptr) != SQLITE_OK) return table;
        int cols = sqlite3_column_count(stmt);
        for (int i = 0; i < cols; ++i) {
            const char* name = sqlite3_column_name(stmt, i);
            table.column_names.push_back(name ? name : "");
        }
        while (sqlite3_step(stmt) == SQLITE_ROW) {
            std::vector<SqlValue> row;
            for (int i = 0; i < cols; ++i) row.push_back(read_column(stmt, i));
            table.rows.push_back(std::move(row));
        }
        sqlite3_finalize(stmt);
        return table;
    }

    void open(const std::string& path, bool writable) {
        int flags = writable ? (SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE) : SQLITE_OPEN_READONLY;
        if (sqlite3_open_v2(path.c_str(), &db_, flags, nullptr) != SQLITE_OK) {
            std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
            if (db_) sqlite3_close(db_);
            db_ = nullptr;
            throw std::runtime_error("sqlite open '" + path + "': " + msg);
        }
        read_only_ = !writable;
    }

    void close() {
        std::lock_guard lk(mu_);
        if (db_) sqlite3_close(db_);
        db_ = nullptr;
    }

    static int deny_writes(void*, int action, const char*, const char*, const char*, const char*) {
        switch (action) {
            case SQLITE_SELECT:
            case SQLITE_READ:
            case SQLITE_FUNCTION:
                return SQLITE_OK;
            default:
                return SQLITE_DENY;
        }
    }

    static void bind_params(sqlite3_stmt* stmt, const std::vector<SqlValue>& params) {
        for (size_t i = 0; i < params.size(); ++i) {
            int idx = static_cast<int>(i) + 1;
            const auto& v = params[i];
            if (std::holds_alternative<std::monostate>(v))
                sqlite3_bind_null(stmt, idx);
            else if (std::holds_alternative<std::int64_t>(v))
                sqlite3_bind_int64(stmt, idx, std::get<std::int64_t>(v));
            else if (std::holds_alternative<double>(v))
                sqlite3_bind_double(stmt, idx, std::get<double>(v));
            else
                sqlite3_bind_text(stmt, idx, std::get<std::string>(v).c_str(), -1, SQLITE_TRANSIENT);
        }
    }

    static SqlValue read_column(sqlite3_stmt* stmt, int i) {
        switch (sqlite3_column_type(stmt, i)) {
            case SQLITE_NULL: return std::monostate{};
            case SQLITE_INTEGER: return static_cast<std::int64_t>(sqlite3_column_int64(stmt, i));
            case SQLITE_FLOAT: return sqlite3_column_double(stmt, i);
            default: {
                const unsigned char* text = sqlite3_column_text(stmt, i);
                return std::string(text ? reinterpret_cast<const char*>(text) : "");
            }
        }
    }

    static SqlError classify_error(int rc, const char* msg) {
        std::string m = msg ? msg : "unknown error";
        if (rc == SQLITE_AUTH || m.find("not authorized") != std::string::npos)
            return {SqlErrorKind::write_attempted, m};
        if (m.find("no such table") != std::string::npos)
            return {SqlErrorKind::unknown_table, m};
        if (m.find("syntax error") != std::string::npos || m.find("incomplete input") != std::string::npos)
            return {SqlErrorKind::syntax, m};
        return {SqlErrorKind::other, m};
    }

    sqlite3* db_ = nullptr;
    bool read_only_ = false;
    mutable std::mutex mu_;
};

} // namespace treeact
