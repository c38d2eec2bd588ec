#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treeact/backend.hpp"
#include "treeact/common.hpp"
#include "treeact/sql_store.hpp"

namespace treeact {

// ── Ingestion records ───────────────────────────────────────────────────

enum class RecordKind { detection, caption, asr, ocr, action };

inline const char* record_kind_name(RecordKind k) {
    switch (k) {
        case RecordKind::detection: return "detection";
        case RecordKind::caption: return "caption";
        case RecordKind::asr: return "asr";
        case RecordKind::ocr: return "ocr";
        case RecordKind::action: return "action";
    }
    return "?";
}

struct BoundingBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    bool valid() const { return x1 < x2 && y1 < y2; }
};

// One perception extractor output. Kind-specific payload fields sit beside
// the common ones; unused fields stay defaulted.
struct ExtractionRecord {
    RecordKind kind = RecordKind::caption;
    std::int64_t frame_index = 0;
    double timestamp = 0.0;

    // detection / action
    std::int64_t instance_id = 0;
    std::string category;
    BoundingBox box;
    std::string appearance;
    std::optional<std::string> mask_ref;
    std::string label;

    // caption / asr / ocr
    std::string text;
    double end_timestamp = 0.0;
};

struct RecordParseError {
    size_t line_number = 0;
    std::string message;
};

// Parses one JSONL object. Returns nullopt and fills `error` on a malformed
// record; extractors are noisy, callers skip and continue.
inline std::optional<ExtractionRecord> parse_record(const std::string& line, std::string& error) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        error = "not a JSON object";
        return std::nullopt;
    }
    ExtractionRecord rec;

    auto require = [&](const char* field) -> const nlohmann::json* {
        auto it = j.find(field);
        if (it == j.end()) {
            error = std::string("missing field '") + field + "'";
            return nullptr;
        }
        return &*it;
    };

    const auto* kind = require("kind");
    if (!kind) return std::nullopt;
    std::string k = kind->is_string() ? kind->get<std::string>() : "";
    if (k == "detection") rec.kind = RecordKind::detection;
    else if (k == "caption") rec.kind = RecordKind::caption;
    else if (k == "asr") rec.kind = RecordKind::asr;
    else if (k == "ocr") rec.kind = RecordKind::ocr;
    else if (k == "action") rec.kind = RecordKind::action;
    else {
        error = "unknown kind '" + k + "'";
        return std::nullopt;
    }

    const auto* frame = require("frame_index");
    const auto* ts = require("timestamp");
    if (!frame || !ts) return std::nullopt;
    if (!frame->is_number_integer() || frame->get<std::int64_t>() < 0) {
        error = "frame_index must be a non-negative integer";
        return std::nullopt;
    }
    if (!ts->is_number() || ts->get<double>() < 0) {
        error = "timestamp must be a non-negative number";
        return std::nullopt;
    }
    rec.frame_index = frame->get<std::int64_t>();
    rec.timestamp = ts->get<double>();

    switch (rec.kind) {
        case RecordKind::detection: {
            const auto* iid = require("instance_id");
            const auto* cat = require("category");
            const auto* box = require("box");
            if (!iid || !cat || !box) return std::nullopt;
            if (!iid->is_number_integer() || iid->get<std::int64_t>() < 0) {
                error = "instance_id must be a non-negative integer";
                return std::nullopt;
            }
            rec.instance_id = iid->get<std::int64_t>();
            rec.category = cat->is_string() ? cat->get<std::string>() : "";
            if (!box->is_array() || box->size() != 4 || !(*box)[0].is_number()) {
                error = "box must be an array [x1,y1,x2,y2]";
                return std::nullopt;
            }
            rec.box = {(*box)[0].get<double>(), (*box)[1].get<double>(), (*box)[2].get<double>(),
                       (*box)[3].get<double>()};
            if (!rec.box.valid()) {
                error = "box must satisfy x1 < x2 and y1 < y2";
                return std::nullopt;
            }
            rec.appearance = j.value("appearance", "");
            if (j.contains("mask_ref") && j["mask_ref"].is_string())
                rec.mask_ref = j["mask_ref"].get<std::string>();
            break;
        }
        case RecordKind::action: {
            const auto* iid = require("instance_id");
            const auto* label = require("label");
            if (!iid || !label) return std::nullopt;
            if (!iid->is_number_integer() || iid->get<std::int64_t>() < 0) {
                error = "instance_id must be a non-negative integer";
                return std::nullopt;
            }
            rec.instance_id = iid->get<std::int64_t>();
            rec.label = label->is_string() ? label->get<std::string>() : "";
            break;
        }
        case RecordKind::asr: {
            const auto* text = require("text");
            const auto* end = require("end_timestamp");
            if (!text || !end) return std::nullopt;
            rec.text = text->is_string() ? text->get<std::string>() : "";
            if (!end->is_number() || end->get<double>() < 0) {
                error = "end_timestamp must be a non-negative number";
                return std::nullopt;
            }
            rec.end_timestamp = end->get<double>();
            break;
        }
        case RecordKind::caption:
        case RecordKind::ocr: {
            const auto* text = require("text");
            if (!text) return std::nullopt;
            rec.text = text->is_string() ? text->get<std::string>() : "";
            break;
        }
    }
    return rec;
}

// Reads a JSONL stream; malformed lines land in `errors`.
inline std::vector<ExtractionRecord> read_records(std::istream& in,
                                                  std::vector<RecordParseError>* errors = nullptr) {
    std::vector<ExtractionRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::string err;
        auto rec = parse_record(line, err);
        if (rec) {
            records.push_back(std::move(*rec));
        } else if (errors) {
            errors->push_back({lineno, err});
        }
    }
    return records;
}

// ── Memory type selection ───────────────────────────────────────────────

struct MemoryTypeSelection {
    bool build_space = false;
    bool build_time = false;

    bool valid() const { return build_space || build_time; }
    static MemoryTypeSelection both() { return {true, true}; }

    std::string to_string() const {
        if (build_space && build_time) return "both";
        return build_space ? "space-dominant" : "time-dominant";
    }
};

inline constexpr const char* kSpaceMemoryDescription =
    "space-dominant memory: keyed by object instances; stores each instance's unique ID, "
    "semantic category, per-frame trajectory boxes, segmentation reference, appearance "
    "description, and action label. Suited to questions about specific targets or their "
    "spatial relations.";

inline constexpr const char* kTimeMemoryDescription =
    "time-dominant memory: keyed by time; stores per-frame timestamps, audio content "
    "transcribed by ASR, optical content read by OCR, frame-level captions, and clip-level "
    "captions obtained by deduplicating similar consecutive frames. Suited to questions "
    "about what happens over the course of the video.";

inline std::optional<MemoryTypeSelection> parse_memory_selection(const std::string& completion) {
    static const std::regex re(R"(Action:\s*(space-dominant|time-dominant|both)\s+construction)",
                               std::regex::icase);
    std::smatch m;
    if (!std::regex_search(completion, m, re)) return std::nullopt;
    std::string which = to_lower(m[1].str());
    if (which == "space-dominant") return MemoryTypeSelection{true, false};
    if (which == "time-dominant") return MemoryTypeSelection{false, true};
    return MemoryTypeSelection::both();
}

// Asks the backend which memory type suits the question. Both task
// descriptions go into the prompt; the reply must contain a line of the
// form `Action: <space-dominant|time-dominant|both> construction`.
// Falls back to building both after the retry budget.
inline MemoryTypeSelection select_memory_type(const std::string& question, ChatBackend& backend,
                                              int retries = 2) {
    ChatRequest req;
    req.system_prompt =
        "You decide which symbolic memory to build for a video question. The two memory types "
        "are:\n- " +
        std::string(kSpaceMemoryDescription) + "\n- " + std::string(kTimeMemoryDescription) +
        "\nReply with exactly one line of the form:\n"
        "Action: <space-dominant|time-dominant|both> construction";
    req.turns.push_back({"user", "Question: " + question});
    for (int attempt = 0; attempt <= retries; ++attempt) {
        auto resp = backend.complete(req);
        if (auto sel = parse_memory_selection(resp.text)) return *sel;
    }
    return MemoryTypeSelection::both(); // safe superset
}

// ── Clip deduplication ──────────────────────────────────────────────────

struct Clip {
    std::int64_t start_frame = 0;
    std::int64_t end_frame = 0;
    std::string caption; // first frame's caption

    bool operator==(const Clip&) const = default;
};

// Greedy left-to-right merge: a frame joins the current clip iff the
// token-set Jaccard similarity between its caption and the clip's first
// caption is >= tau. Input must be sorted by frame index without
// duplicates; output clips are contiguous and cover every input frame.
inline std::vector<Clip> deduplicate_clips(
    const std::vector<std::pair<std::int64_t, std::string>>& frame_captions, double tau) {
    std::vector<Clip> clips;
    std::set<std::string> rep_tokens;
    for (const auto& [frame, caption] : frame_captions) {
        auto tokens = token_set(caption);
        if (!clips.empty() && jaccard(tokens, rep_tokens) >= tau) {
            clips.back().end_frame = frame;
        } else {
            clips.push_back({frame, frame, caption});
            rep_tokens = std::move(tokens);
        }
    }
    return clips;
}

// ── Task memory ─────────────────────────────────────────────────────────

inline constexpr double kDefaultDedupTau = 0.6;

// Per-session symbolic store over one video + question. Space-dominant
// tables (instances, trajectories) and time-dominant tables (frames,
// clips) are created per the selection; after ingest the store is
// immutable and safe for concurrent readers.
class TaskMemory {
public:
    TaskMemory(std::string video_id, MemoryTypeSelection selection,
               double dedup_tau = kDefaultDedupTau)
        : video_id_(std::move(video_id)), selection_(selection), tau_(dedup_tau), store_() {
        init_schema();
    }

    TaskMemory(std::string video_id, MemoryTypeSelection selection, const std::string& db_path,
               double dedup_tau = kDefaultDedupTau)
        : video_id_(std::move(video_id)), selection_(selection), tau_(dedup_tau),
          store_(db_path, /*writable=*/true) {
        init_schema();
    }

    // Opens a previously written store file read-only.
    static TaskMemory open(const std::string& db_path) {
        TaskMemory mem(Opened{}, db_path);
        return mem;
    }

    const std::string& video_id() const { return video_id_; }
    MemoryTypeSelection selection() const { return selection_; }
    double dedup_tau() const { return tau_; }
    const SqlStore& store() const { return store_; }

    SqlOutcome execute_sql(const std::string& query) const { return store_.execute(query); }
    std::string schema_description() const { return store_.describe_schema(); }
    std::uint64_t content_hash() const { return store_.content_hash(); }

    // Applies a record stream. Records are sorted by (kind, instance_id,
    // frame_index) first so ingestion is order-insensitive; returns the
    // number of applied records.
    size_t ingest(std::vector<ExtractionRecord> records,
                  std::function<void(const std::string&)> log = {}) {
        if (store_.read_only()) throw std::logic_error("TaskMemory: ingest after finalize");
        std::stable_sort(records.begin(), records.end(),
                         [](const ExtractionRecord& a, const ExtractionRecord& b) {
                             if (a.kind != b.kind) return a.kind < b.kind;
                             if (a.instance_id != b.instance_id) return a.instance_id < b.instance_id;
                             return a.frame_index < b.frame_index;
                         });
        size_t applied = 0;
        for (const auto& rec : records) {
            std::string err;
            if (!apply(rec, err)) {
                if (log) log("skipping " + std::string(record_kind_name(rec.kind)) + " record: " + err);
                continue;
            }
            ++applied;
        }
        if (selection_.build_time) rebuild_clips();
        finalize();
        return applied;
    }

    std::map<std::string, std::int64_t> row_counts() const {
        std::map<std::string, std::int64_t> counts;
        for (const auto& t : store_.table_names()) counts[t] = store_.count(t);
        return counts;
    }

private:
    struct Opened {};
    TaskMemory(Opened, const std::string& db_path) : store_(db_path, /*writable=*/false) {
        auto meta = store_.execute("SELECT key, value FROM session_meta");
        if (!meta.ok()) throw std::runtime_error("not a task memory store: " + db_path);
        for (const auto& row : meta.table->rows) {
            const std::string key = ResultTable::value_text(row[0]);
            const std::string value = ResultTable::value_text(row[1]);
            if (key == "video_id") video_id_ = value;
            else if (key == "build_space") selection_.build_space = value == "1";
            else if (key == "build_time") selection_.build_time = value == "1";
            else if (key == "dedup_tau") tau_ = std::stod(value);
        }
    }

    void init_schema() {
        if (tau_ < 0.0 || tau_ > 1.0) throw std::invalid_argument("dedup tau must be in [0,1]");
        if (!selection_.valid()) throw std::invalid_argument("memory selection must build at least one type");
        store_.exec_raw("CREATE TABLE IF NOT EXISTS session_meta(key TEXT PRIMARY KEY, value TEXT)");
        put_meta("video_id", video_id_);
        put_meta("build_space", selection_.build_space ? "1" : "0");
        put_meta("build_time", selection_.build_time ? "1" : "0");
        {
            std::ostringstream os;
            os << tau_;
            put_meta("dedup_tau", os.str());
        }
        if (selection_.build_space) {
            store_.exec_raw(
                "CREATE TABLE IF NOT EXISTS instances("
                "instance_id INTEGER PRIMARY KEY, category TEXT, appearance TEXT, action TEXT, "
                "first_frame INTEGER, last_frame INTEGER)");
            store_.exec_raw(
                "CREATE TABLE IF NOT EXISTS trajectories("
                "instance_id INTEGER, frame_index INTEGER, "
                "x1 REAL, y1 REAL, x2 REAL, y2 REAL, mask_ref TEXT NULL)");
        }
        if (selection_.build_time) {
            store_.exec_raw(
                "CREATE TABLE IF NOT EXISTS frames("
                "frame_index INTEGER PRIMARY KEY, timestamp REAL, "
                "caption TEXT NULL, ocr_text TEXT NULL, asr_text TEXT NULL)");
            store_.exec_raw(
                "CREATE TABLE IF NOT EXISTS clips("
                "clip_id INTEGER PRIMARY KEY, start_frame INTEGER, end_frame INTEGER, caption TEXT)");
        }
    }

    void put_meta(const std::string& key, const std::string& value) {
        store_.exec_raw("INSERT OR REPLACE INTO session_meta(key, value) VALUES(?, ?)",
                        {SqlValue{key}, SqlValue{value}});
    }

    bool apply(const ExtractionRecord& rec, std::string& err) {
        switch (rec.kind) {
            case RecordKind::detection: {
                if (!selection_.build_space) return true;
                if (!rec.box.valid()) {
                    err = "invalid box";
                    return false;
                }
                ensure_instance(rec.instance_id);
                store_.exec_raw(
                    "UPDATE instances SET "
                    "category = COALESCE(category, ?), "
                    "appearance = CASE WHEN appearance IS NULL AND ? <> '' THEN ? ELSE appearance END, "
                    "first_frame = MIN(COALESCE(first_frame, ?), ?), "
                    "last_frame = MAX(COALESCE(last_frame, ?), ?) "
                    "WHERE instance_id = ?",
                    {SqlValue{rec.category}, SqlValue{rec.appearance}, SqlValue{rec.appearance},
                     SqlValue{rec.frame_index}, SqlValue{rec.frame_index}, SqlValue{rec.frame_index},
                     SqlValue{rec.frame_index}, SqlValue{rec.instance_id}});
                store_.exec_raw(
                    "INSERT INTO trajectories(instance_id, frame_index, x1, y1, x2, y2, mask_ref) "
                    "VALUES(?, ?, ?, ?, ?, ?, ?)",
                    {SqlValue{rec.instance_id}, SqlValue{rec.frame_index}, SqlValue{rec.box.x1},
                     SqlValue{rec.box.y1}, SqlValue{rec.box.x2}, SqlValue{rec.box.y2},
                     rec.mask_ref ? SqlValue{*rec.mask_ref} : SqlValue{std::monostate{}}});
                return true;
            }
            case RecordKind::action: {
                if (!selection_.build_space) return true;
                ensure_instance(rec.instance_id);
                // Distinct labels joined with ", " in frame order.
                store_.exec_raw(
                    "UPDATE instances SET action = CASE "
                    "WHEN action IS NULL THEN ? "
                    "WHEN instr(', ' || action || ', ', ', ' || ? || ', ') > 0 THEN action "
                    "ELSE action || ', ' || ? END "
                    "WHERE instance_id = ?",
                    {SqlValue{rec.label}, SqlValue{rec.label}, SqlValue{rec.label},
                     SqlValue{rec.instance_id}});
                return true;
            }
            case RecordKind::caption:
            case RecordKind::ocr:
            case RecordKind::asr: {
                if (!selection_.build_time) return true;
                ensure_frame(rec.frame_index, rec.timestamp);
                if (rec.kind == RecordKind::caption) {
                    store_.exec_raw("UPDATE frames SET caption = ? WHERE frame_index = ?",
                                    {SqlValue{rec.text}, SqlValue{rec.frame_index}});
                } else {
                    const char* col = rec.kind == RecordKind::ocr ? "ocr_text" : "asr_text";
                    store_.exec_raw(std::string("UPDATE frames SET ") + col + " = CASE WHEN " + col +
                                        " IS NULL THEN ? ELSE " + col + " || ' ' || ? END "
                                        "WHERE frame_index = ?",
                                    {SqlValue{rec.text}, SqlValue{rec.text}, SqlValue{rec.frame_index}});
                }
                return true;
            }
        }
        err = "unhandled kind";
        return false;
    }

    void ensure_instance(std::int64_t id) {
        store_.exec_raw("INSERT OR IGNORE INTO instances(instance_id) VALUES(?)", {SqlValue{id}});
    }

    void ensure_frame(std::int64_t frame, double ts) {
        store_.exec_raw("INSERT OR IGNORE INTO frames(frame_index, timestamp) VALUES(?, ?)",
                        {SqlValue{frame}, SqlValue{ts}});
    }

    void rebuild_clips() {
        store_.exec_raw("DELETE FROM clips");
        auto res = store_.execute(
            "SELECT frame_index, caption FROM frames WHERE caption IS NOT NULL ORDER BY frame_index");
        if (!res.ok()) return;
        std::vector<std::pair<std::int64_t, std::string>> captions;
        for (const auto& row : res.table->rows)
            captions.emplace_back(std::get<std::int64_t>(row[0]), std::get<std::string>(row[1]));
        auto clips = deduplicate_clips(captions, tau_);
        std::int64_t id = 1;
        for (const auto& c : clips) {
            store_.exec_raw(
                "INSERT INTO clips(clip_id, start_frame, end_frame, caption) VALUES(?, ?, ?, ?)",
                {SqlValue{id++}, SqlValue{c.start_frame}, SqlValue{c.end_frame}, SqlValue{c.caption}});
        }
    }

    void finalize() { store_.finalize_read_only(); }

    std::string video_id_;
    MemoryTypeSelection selection_;
    double tau_ = kDefaultDedupTau;
    SqlStore store_;
};

// Builds a finalized in-memory store from a record stream.
inline TaskMemory ingest(std::vector<ExtractionRecord> records, const std::string& video_id,
                         MemoryTypeSelection selection, double tau = kDefaultDedupTau,
                         std::function<void(const std::string&)> log = {}) {
    TaskMemory memory(video_id, selection, tau);
    memory.ingest(std::move(records), std::move(log));
    return memory;
}

} // namespace treeact
