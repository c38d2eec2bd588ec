#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "treeact/treeact.hpp"

namespace {

// Exit codes: 0 success, 1 unreadable/malformed input file, 2 backend or
// configuration problem, 3 finished with zero answers.
constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitBackend = 2;
constexpr int kExitNoAnswers = 3;

struct CommonOptions {
    std::string config_path;
    std::string cassette_path;
    bool record = false;
    bool replay = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config_path, "configuration file (JSON)");
    cmd->add_option("--cassette", opts.cassette_path, "chat completion cassette file");
    cmd->add_flag("--record", opts.record, "record completions into the cassette");
    cmd->add_flag("--replay", opts.replay, "answer completions from the cassette only");
}

treeact::AppConfig load_config(const CommonOptions& opts) {
    treeact::AppConfig cfg;
    cfg.apply_env();
    if (!opts.config_path.empty()) cfg.apply_file(opts.config_path);
    return cfg;
}

// Owns whichever backend layers the flags selected; `use` is the outermost.
struct BackendBundle {
    std::unique_ptr<treeact::HttpBackend> live;
    std::unique_ptr<treeact::RecordReplayBackend> cassette;
    std::unique_ptr<treeact::MeteredBackend> metered;
    treeact::ChatBackend* use = nullptr;
};

BackendBundle make_backend(const treeact::AppConfig& cfg, const CommonOptions& opts) {
    BackendBundle bundle;
    treeact::ChatBackend* base = nullptr;
    if (opts.replay) {
        if (opts.cassette_path.empty())
            throw std::runtime_error("--replay requires --cassette <path>");
        bundle.cassette = std::make_unique<treeact::RecordReplayBackend>(
            nullptr, opts.cassette_path, treeact::CassetteMode::replay);
        base = bundle.cassette.get();
    } else {
        if (cfg.endpoint.empty())
            throw std::runtime_error(
                "no backend endpoint configured (set TREEACT_ENDPOINT, or endpoint in --config)");
        treeact::HttpBackendConfig hc;
        hc.base_url = cfg.endpoint;
        hc.api_key = cfg.api_key;
        hc.model = cfg.model;
        bundle.live = std::make_unique<treeact::HttpBackend>(hc);
        base = bundle.live.get();
        if (opts.record) {
            if (opts.cassette_path.empty())
                throw std::runtime_error("--record requires --cassette <path>");
            bundle.cassette = std::make_unique<treeact::RecordReplayBackend>(
                base, opts.cassette_path, treeact::CassetteMode::record);
            base = bundle.cassette.get();
        }
    }
    bundle.metered = std::make_unique<treeact::MeteredBackend>(*base);
    bundle.use = bundle.metered.get();
    return bundle;
}

treeact::ToolRegistry make_registry(const treeact::AppConfig& cfg) {
    treeact::ToolRegistry registry;
    if (!cfg.tool_config.empty()) {
        treeact::configure_registry_file(registry, cfg.tool_config,
                                         [](const std::string& text) {
                                             return treeact::test_embedding(text);
                                         });
    } else {
        treeact::register_subtask_tools(registry, cfg.subtask_examples_dir);
    }
    return registry;
}

// ── ingest ──────────────────────────────────────────────────────────────

struct IngestOptions {
    std::string records_path;
    std::string out_path;
    std::string question;
    std::string memory_kind; // "", "both", "space", "time"
    std::string video_id;
    double tau = treeact::kDefaultDedupTau;
    CommonOptions common;
};

int run_ingest(const IngestOptions& opts) {
    std::ifstream in(opts.records_path);
    if (!in) {
        std::cerr << "cannot open records file: " << opts.records_path << "\n";
        return kExitInput;
    }
    std::vector<treeact::RecordParseError> errors;
    auto records = treeact::read_records(in, &errors);
    for (const auto& e : errors)
        std::cerr << opts.records_path << ":" << e.line_number << ": skipping record: " << e.message
                  << "\n";

    treeact::MemoryTypeSelection selection;
    if (opts.memory_kind == "both") selection = treeact::MemoryTypeSelection::both();
    else if (opts.memory_kind == "space") selection = {true, false};
    else if (opts.memory_kind == "time") selection = {false, true};
    else {
        if (opts.question.empty()) {
            std::cerr << "either --memory or --question is required\n";
            return kExitInput;
        }
        try {
            auto cfg = load_config(opts.common);
            auto backend = make_backend(cfg, opts.common);
            selection = treeact::select_memory_type(opts.question, *backend.use);
        } catch (const std::exception& e) {
            std::cerr << "memory type selection failed: " << e.what() << "\n";
            return kExitBackend;
        }
    }

    std::string video_id = opts.video_id;
    if (video_id.empty()) video_id = std::filesystem::path(opts.records_path).stem().string();

    try {
        std::filesystem::remove(opts.out_path);
        treeact::TaskMemory memory(video_id, selection, opts.out_path, opts.tau);
        memory.ingest(std::move(records),
                      [](const std::string& msg) { std::cerr << msg << "\n"; });
        for (const auto& [table, count] : memory.row_counts())
            std::cout << table << " " << count << "\n";
    } catch (const std::exception& e) {
        std::cerr << "ingest failed: " << e.what() << "\n";
        return kExitInput;
    }
    return kExitOk;
}

// ── ask ─────────────────────────────────────────────────────────────────

struct AskOptions {
    std::string memory_path;
    std::string question;
    std::string video_ref;
    int n = 2;
    double alpha = 1.0;
    double beta = 0.5;
    std::string policy = "mcts";
    std::uint64_t seed = 0;
    std::string aggregate = "summarize";
    std::string choices_csv;
    std::string trace_out;
    CommonOptions common;
};

int run_ask(const AskOptions& opts, const CLI::App& cmd) {
    treeact::AppConfig cfg;
    try {
        cfg = load_config(opts.common);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitBackend;
    }
    // Flags outrank the config file, but only when actually given.
    if (cmd.count("--alpha")) cfg.reward.alpha = opts.alpha;
    if (cmd.count("--beta")) cfg.reward.beta = opts.beta;
    if (cmd.count("--n")) cfg.reward.iterations = opts.n;
    if (cmd.count("--policy")) {
        auto p = treeact::parse_selection_policy(opts.policy);
        if (!p) {
            std::cerr << "unknown policy: " << opts.policy << "\n";
            return kExitInput;
        }
        cfg.policy = *p;
    }

    std::optional<treeact::TaskMemory> memory;
    try {
        memory.emplace(treeact::TaskMemory::open(opts.memory_path));
    } catch (const std::exception& e) {
        std::cerr << "cannot open memory store: " << e.what() << "\n";
        return kExitInput;
    }

    BackendBundle backend;
    treeact::ToolRegistry registry;
    try {
        backend = make_backend(cfg, opts.common);
        registry = make_registry(cfg);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitBackend;
    }

    treeact::PlannerConfig pc;
    pc.reward = cfg.reward;
    pc.limits = cfg.limits;
    pc.policy = cfg.policy;
    pc.seed = opts.seed;

    std::string video_ref = opts.video_ref.empty() ? memory->video_id() : opts.video_ref;

    treeact::SessionResult result;
    try {
        result = treeact::run_planner(opts.question, video_ref, &*memory, registry, *backend.use, pc);
    } catch (const treeact::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitInput;
    }

    if (!opts.trace_out.empty()) {
        std::ofstream out(opts.trace_out);
        if (!out) {
            std::cerr << "cannot write trace file: " << opts.trace_out << "\n";
            return kExitInput;
        }
        out << result.trace.dump(2) << "\n";
    }

    std::cerr << "backend calls=" << backend.metered->calls()
              << " prompt_tokens=" << backend.metered->usage().prompt_tokens
              << " completion_tokens=" << backend.metered->usage().completion_tokens << "\n";

    if (result.answers.empty()) {
        std::cerr << "search ended with zero answers\n";
        return kExitNoAnswers;
    }

    std::string final_answer;
    try {
        if (opts.aggregate == "vote") {
            std::vector<std::string> choices;
            std::istringstream cs(opts.choices_csv);
            std::string piece;
            while (std::getline(cs, piece, ',')) {
                piece = treeact::trim(piece);
                if (!piece.empty()) choices.push_back(piece);
            }
            if (choices.empty()) {
                std::cerr << "--aggregate vote requires --choices\n";
                return kExitInput;
            }
            auto label = treeact::vote(result.answers, choices);
            if (label) final_answer = *label;
            else final_answer = treeact::summarize(result.answers, opts.question, *backend.use);
        } else {
            final_answer = treeact::summarize(result.answers, opts.question, *backend.use);
        }
    } catch (const treeact::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    }

    std::cout << final_answer << "\n";
    return kExitOk;
}

// ── ablate ──────────────────────────────────────────────────────────────

struct AblateOptions {
    int seeds = 50;
    std::uint64_t first_seed = 1;
    int width = 2;
    int depth = 3;
    double ratio = 0.75;
    int n = 4;
    double alpha = 1.0;
    double beta = 0.5;
    std::string policies_csv = "mcts,dfs,root,uniform";
    bool json = false;
};

int run_ablate(const AblateOptions& opts) {
    std::vector<treeact::SelectionPolicy> policies;
    std::istringstream ps(opts.policies_csv);
    std::string piece;
    while (std::getline(ps, piece, ',')) {
        piece = treeact::trim(piece);
        if (piece.empty()) continue;
        auto p = treeact::parse_selection_policy(piece);
        if (!p) {
            std::cerr << "unknown policy: " << piece << "\n";
            return kExitInput;
        }
        policies.push_back(*p);
    }
    if (policies.empty()) {
        std::cerr << "no policies given\n";
        return kExitInput;
    }
    treeact::RewardConfig reward;
    reward.alpha = opts.alpha;
    reward.beta = opts.beta;
    reward.iterations = opts.n;
    try {
        auto tasks = treeact::generate_tasks(opts.first_seed, opts.seeds, opts.width, opts.depth,
                                             opts.ratio);
        auto report = treeact::evaluate(policies, tasks, reward);
        if (opts.json) std::cout << report.to_json().dump(2) << "\n";
        else std::cout << report.to_text();
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitInput;
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SQL-memory video QA agent with tree-search planning"};
    app.require_subcommand(1);

    IngestOptions ingest;
    auto* cmd_ingest = app.add_subcommand("ingest", "build a task memory store from JSONL records");
    cmd_ingest->add_option("records", ingest.records_path, "perception records (JSON Lines)")
        ->required();
    cmd_ingest->add_option("--out", ingest.out_path, "memory store output path")->required();
    cmd_ingest->add_option("--question", ingest.question, "task question (drives memory type selection)");
    cmd_ingest->add_option("--memory", ingest.memory_kind, "override memory type: both|space|time")
        ->check(CLI::IsMember({"both", "space", "time"}));
    cmd_ingest->add_option("--video-id", ingest.video_id, "video identifier stored with the memory");
    cmd_ingest->add_option("--tau", ingest.tau, "clip dedup similarity threshold in [0,1]");
    add_common(cmd_ingest, ingest.common);

    AskOptions ask;
    auto* cmd_ask = app.add_subcommand("ask", "answer a question over an ingested memory store");
    cmd_ask->add_option("memory", ask.memory_path, "memory store file from ingest")->required();
    cmd_ask->add_option("question", ask.question, "the question to answer")->required();
    cmd_ask->add_option("--video", ask.video_ref, "video reference used in prompts");
    cmd_ask->add_option("--n", ask.n, "search iterations");
    cmd_ask->add_option("--alpha", ask.alpha, "base reward magnitude");
    cmd_ask->add_option("--beta", ask.beta, "reward decay rate");
    cmd_ask->add_option("--policy", ask.policy, "node selection policy: mcts|dfs|root|uniform");
    cmd_ask->add_option("--seed", ask.seed, "random seed");
    cmd_ask->add_option("--aggregate", ask.aggregate, "answer aggregation: vote|summarize")
        ->check(CLI::IsMember({"vote", "summarize"}));
    cmd_ask->add_option("--choices", ask.choices_csv, "comma-separated choice labels for voting");
    cmd_ask->add_option("--trace-out", ask.trace_out, "write the session trace JSON here");
    add_common(cmd_ask, ask.common);

    AblateOptions ablate;
    auto* cmd_ablate = app.add_subcommand("ablate", "run the synthetic-task policy comparison");
    cmd_ablate->add_option("--seeds", ablate.seeds, "number of tasks");
    cmd_ablate->add_option("--first-seed", ablate.first_seed, "seed of the first task");
    cmd_ablate->add_option("--width", ablate.width, "branches per node");
    cmd_ablate->add_option("--depth", ablate.depth, "actions per chain");
    cmd_ablate->add_option("--ratio", ablate.ratio, "terminal failure ratio in (0,1)");
    cmd_ablate->add_option("--n", ablate.n, "search iterations per task");
    cmd_ablate->add_option("--alpha", ablate.alpha, "base reward magnitude");
    cmd_ablate->add_option("--beta", ablate.beta, "reward decay rate");
    cmd_ablate->add_option("--policies", ablate.policies_csv, "comma-separated policy list");
    cmd_ablate->add_flag("--json", ablate.json, "emit the JSON report instead of text");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    if (cmd_ingest->parsed()) return run_ingest(ingest);
    if (cmd_ask->parsed()) return run_ask(ask, *cmd_ask);
    if (cmd_ablate->parsed()) return run_ablate(ablate);
    return kExitInput;
}
