#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "treeact/harness.hpp"
#include "treeact/react.hpp"

using namespace treeact;

namespace {

ChatRequest prompt_request(const std::string& prompt) {
    ChatRequest req;
    req.turns.push_back({"user", prompt});
    return req;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
}

} // namespace

TEST_CASE("generate_task rejects out-of-range parameters") {
    CHECK_THROWS_AS(generate_task(1, 1, 2, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(generate_task(1, 3, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(generate_task(1, 3, 2, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(generate_task(1, 3, 2, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(generate_task(1, 3, 2, -0.2), std::invalid_argument);
    CHECK_THROWS_AS(generate_task(1, 3, 2, 1.7), std::invalid_argument);
}

TEST_CASE("generate_task is deterministic in the seed") {
    SyntheticTask a = generate_task(7, 3, 2, 0.5);
    SyntheticTask b = generate_task(7, 3, 2, 0.5);
    CHECK(a.tool_graph == b.tool_graph);
    CHECK(a.success_paths == b.success_paths);
    CHECK(a.distractor_paths == b.distractor_paths);

    SyntheticTask c = generate_task(8, 3, 2, 0.5);
    bool differs = a.success_paths != c.success_paths || a.distractor_paths != c.distractor_paths;
    CHECK(differs);
}

TEST_CASE("generate_task covers the full branch tree") {
    const int width = 3, depth = 2;
    SyntheticTask task = generate_task(11, width, depth, 0.5);

    // Expected terminals: every width-ary path of the given depth.
    std::set<std::string> terminals;
    for (int i = 0; i < width; ++i)
        for (int j = 0; j < width; ++j)
            terminals.insert(std::to_string(i) + "/" + std::to_string(j));

    std::set<std::string> labeled;
    labeled.insert(task.success_paths.begin(), task.success_paths.end());
    labeled.insert(task.distractor_paths.begin(), task.distractor_paths.end());
    CHECK(labeled == terminals);
    CHECK_FALSE(task.success_paths.empty());
    for (const auto& p : task.success_paths) {
        CHECK(detail::synthetic_path_depth(p) == depth);
        CHECK(task.distractor_paths.count(p) == 0);
    }

    // tool_graph holds one completion per non-root position: 3 + 9 entries.
    CHECK(task.tool_graph.size() == 12);
    for (int i = 0; i < width; ++i) {
        std::string p = std::to_string(i);
        REQUIRE(task.tool_graph.count(p) == 1);
        CHECK(task.tool_graph.at(p) == detail::synthetic_continuation(task, p + "/0"));
    }
    for (const auto& t : terminals) {
        REQUIRE(task.tool_graph.count(t) == 1);
        CHECK(task.tool_graph.at(t) == detail::synthetic_terminal(task, t));
    }
}

TEST_CASE("generate_task always keeps at least one success path") {
    // A high failure ratio makes the all-failure draw likely, exercising the
    // forced-success fallback.
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        SyntheticTask task = generate_task(seed, 2, 2, 0.95);
        CHECK_FALSE(task.success_paths.empty());
        CHECK(task.success_paths.size() + task.distractor_paths.size() == 4);
    }
}

TEST_CASE("generate_tasks matches task-by-task generation") {
    std::vector<SyntheticTask> batch = generate_tasks(5, 4, 3, 2, 0.65);
    REQUIRE(batch.size() == 4);
    for (int i = 0; i < 4; ++i) {
        SyntheticTask single = generate_task(5 + static_cast<std::uint64_t>(i), 3, 2, 0.65);
        CHECK(batch[static_cast<size_t>(i)].seed == single.seed);
        CHECK(batch[static_cast<size_t>(i)].success_paths == single.success_paths);
        CHECK(batch[static_cast<size_t>(i)].tool_graph == single.tool_graph);
    }
}

TEST_CASE("synthetic path helpers") {
    CHECK(detail::synthetic_path_depth("") == 0);
    CHECK(detail::synthetic_path_depth("0") == 1);
    CHECK(detail::synthetic_path_depth("0/2") == 2);
    CHECK(detail::synthetic_path_depth("0/2/1") == 3);

    SyntheticTask task;
    task.success_paths = {"0/1"};
    CHECK(detail::synthetic_continuation(task, "0/1") ==
          "Thought: explore segment 0/1 next\nAction: Explore\nAction Input: synthetic.mp4#0/1");
    CHECK(detail::synthetic_terminal(task, "0/1") ==
          "Thought: this path reaches the goal\nFinal Answer: B");
    CHECK(detail::synthetic_terminal(task, "0/0") ==
          "The segments here do not connect to anything conclusive.");
}

TEST_CASE("synthetic_model walks the branch tree from the prompt") {
    SyntheticTask task = generate_task(11, 3, 2, 0.5);
    FnBackend::Fn model = synthetic_model(task);

    SECTION("fresh prompt starts at branch 0") {
        std::string reply = model(prompt_request("Question: which branch?\nThought:"));
        CHECK(reply == detail::synthetic_continuation(task, "0"));
    }

    SECTION("position is the last action input in the prompt") {
        std::string prompt =
            "Question: which branch?\n"
            "Thought: explore segment 1 next\n"
            "Action: Explore\n"
            "Action Input: synthetic.mp4#1\n"
            "Observation: Segment 1 inspected.\n"
            "Thought:";
        std::string reply = model(prompt_request(prompt));
        CHECK(reply == detail::synthetic_continuation(task, "1/0"));
    }

    SECTION("expansion block forbids listed branches") {
        std::string prompt =
            "Question: which branch?\n"
            "I have thought about the next action before, such as:\n"
            "Thought: explore segment 0 next\n"
            "Action: Explore\n"
            "Action Input: synthetic.mp4#0\n"
            "Thought: explore segment 1 next\n"
            "Action: Explore\n"
            "Action Input: synthetic.mp4#1\n"
            "I want to think out a different action.\n"
            "Thought:";
        std::string reply = model(prompt_request(prompt));
        CHECK(reply == detail::synthetic_continuation(task, "2"));
    }

    SECTION("exhausted options fall back to branch 0") {
        std::string prompt =
            "Question: which branch?\n"
            "I have thought about the next action before, such as:\n"
            "Action Input: synthetic.mp4#0\n"
            "Action Input: synthetic.mp4#1\n"
            "Action Input: synthetic.mp4#2\n"
            "I want to think out a different action.\n"
            "Thought:";
        std::string reply = model(prompt_request(prompt));
        CHECK(reply == detail::synthetic_continuation(task, "0"));
    }

    SECTION("terminal positions replay the scripted completion") {
        REQUIRE_FALSE(task.success_paths.empty());
        REQUIRE_FALSE(task.distractor_paths.empty());
        std::string good = *task.success_paths.begin();
        std::string bad = *task.distractor_paths.begin();

        std::string reply = model(prompt_request("Action Input: synthetic.mp4#" + good + "\nThought:"));
        CHECK(reply == "Thought: this path reaches the goal\nFinal Answer: B");

        reply = model(prompt_request("Action Input: synthetic.mp4#" + bad + "\nThought:"));
        CHECK(reply == "The segments here do not connect to anything conclusive.");
    }

    SECTION("iteration suffix on a duplicate leaf input is ignored") {
        std::string good = *task.success_paths.begin();
        std::string reply = model(
            prompt_request("Action Input: synthetic.mp4#" + good + " [iteration 2]\nThought:"));
        CHECK(reply == "Thought: this path reaches the goal\nFinal Answer: B");
    }

    SECTION("unknown terminal positions dead-end") {
        std::string reply = model(prompt_request("Action Input: synthetic.mp4#9/9\nThought:"));
        CHECK(reply == "The segments here do not connect to anything conclusive.");
    }
}

TEST_CASE("make_task_registry exposes the single exploration tool") {
    ToolRegistry registry = make_task_registry();
    CHECK(registry.size() == 1);
    REQUIRE(registry.find("Explore") != nullptr);
    CHECK(registry.find("Explore")->kind == ToolKind::subtask);

    std::string obs = registry.invoke(ToolInvocation{"Explore", "synthetic.mp4", "0/1"}, ToolContext{});
    CHECK(obs == "Segment 0/1 inspected.");
}

TEST_CASE("run_task is deterministic and bounded") {
    ToolRegistry registry = make_task_registry();
    RewardConfig reward;
    reward.iterations = 4;

    SyntheticTask task = generate_task(3, 3, 2, 0.65);
    TaskRunOutcome first = run_task(task, registry, SelectionPolicy::mcts, reward);
    TaskRunOutcome second = run_task(task, registry, SelectionPolicy::mcts, reward);
    CHECK(first.api_calls == second.api_calls);
    CHECK(first.success == second.success);
    CHECK(first.first_success_iteration == second.first_success_iteration);
    CHECK(first.session.selections == second.session.selections);
    if (!first.success) CHECK(first.first_success_iteration == 0);
}

TEST_CASE("run_task stays within the per-iteration call budget") {
    // Each iteration costs at most one completion per tree level plus one
    // duplicate-correction retry: N*(max_depth+1)+N calls in total.
    ToolRegistry registry = make_task_registry();
    RewardConfig reward;
    reward.iterations = 4;

    const std::vector<SelectionPolicy> policies{SelectionPolicy::mcts, SelectionPolicy::dfs,
                                                SelectionPolicy::root, SelectionPolicy::uniform};
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        SyntheticTask task = generate_task(seed, 3, 2, 0.65);
        const std::int64_t bound =
            static_cast<std::int64_t>(reward.iterations) * (task.depth + 1 + 1) + reward.iterations;
        for (SelectionPolicy policy : policies) {
            TaskRunOutcome outcome = run_task(task, registry, policy, reward);
            CHECK(outcome.api_calls <= bound);
            CHECK(outcome.session.answers.size() <= static_cast<size_t>(reward.iterations));
            for (const auto& answer : outcome.session.answers) {
                CHECK(validate_transcript(answer.path));
                CHECK(answer.iteration >= 1);
                CHECK(answer.iteration <= reward.iterations);
            }
            if (outcome.success) {
                CHECK(outcome.first_success_iteration >= 1);
                CHECK(outcome.first_success_iteration <= reward.iterations);
            }
        }
    }
}

TEST_CASE("evaluate reduces runs to per-policy statistics") {
    std::vector<SyntheticTask> tasks = generate_tasks(1, 6, 3, 2, 0.65);
    RewardConfig reward;
    reward.iterations = 2;

    AblationReport report =
        evaluate({SelectionPolicy::mcts, SelectionPolicy::root}, tasks, reward);
    CHECK(report.task_count == 6);
    CHECK(report.iterations == 2);
    CHECK(report.alpha == 1.0);
    CHECK(report.beta == 0.5);
    REQUIRE(report.policies.size() == 2);
    CHECK(report.policies[0].policy == "mcts");
    CHECK(report.policies[1].policy == "root");
    CHECK(report.find("dfs") == nullptr);

    const PolicyStats* mcts = report.find("mcts");
    REQUIRE(mcts != nullptr);
    CHECK(mcts->tasks == 6);
    CHECK(mcts->successes >= 0);
    CHECK(mcts->successes <= 6);
    CHECK(mcts->success_rate == Catch::Approx(mcts->successes / 6.0));
    CHECK(mcts->mean_api_calls > 0.0);

    CHECK_THROWS_AS(evaluate({SelectionPolicy::mcts}, {}, reward), std::invalid_argument);
}

TEST_CASE("evaluate is reproducible") {
    std::vector<SyntheticTask> tasks = generate_tasks(1, 8, 3, 2, 0.65);
    RewardConfig reward;
    reward.iterations = 4;
    const std::vector<SelectionPolicy> policies{SelectionPolicy::mcts, SelectionPolicy::dfs,
                                                SelectionPolicy::root, SelectionPolicy::uniform};
    AblationReport a = evaluate(policies, tasks, reward);
    AblationReport b = evaluate(policies, tasks, reward);
    CHECK(a.to_json().dump(2) == b.to_json().dump(2));
    CHECK(a.to_text() == b.to_text());
}

TEST_CASE("report serialization") {
    AblationReport report;
    report.alpha = 1.0;
    report.beta = 0.5;
    report.iterations = 2;
    report.task_count = 2;
    PolicyStats won;
    won.policy = "mcts";
    won.tasks = 2;
    won.successes = 1;
    won.success_rate = 0.5;
    won.mean_iterations_to_first_success = 2.0;
    won.mean_api_calls = 7.5;
    PolicyStats lost;
    lost.policy = "root";
    lost.tasks = 2;
    lost.successes = 0;
    lost.success_rate = 0.0;
    lost.mean_iterations_to_first_success = 0.0;
    lost.mean_api_calls = 4.0;
    report.policies = {won, lost};

    SECTION("json carries every column, null when no successes") {
        nlohmann::json j = report.to_json();
        CHECK(j["N"] == 2);
        CHECK(j["alpha"] == 1.0);
        CHECK(j["beta"] == 0.5);
        CHECK(j["task_count"] == 2);
        REQUIRE(j["policies"].size() == 2);
        CHECK(j["policies"][0]["policy"] == "mcts");
        CHECK(j["policies"][0]["successes"] == 1);
        CHECK(j["policies"][0]["success_rate"] == 0.5);
        CHECK(j["policies"][0]["mean_iterations_to_first_success"] == 2.0);
        CHECK(j["policies"][0]["mean_api_calls"] == 7.5);
        CHECK(j["policies"][1]["mean_iterations_to_first_success"].is_null());
    }

    SECTION("text table aligns one row per policy") {
        std::string text = report.to_text();
        std::vector<std::string> lines = lines_of(text);
        REQUIRE(lines.size() == 4);
        CHECK(lines[0] == "tasks=2 N=2 alpha=1 beta=0.5");
        for (size_t i = 1; i < lines.size(); ++i) CHECK(lines[i].size() == 69);
        CHECK(lines[1].find("policy") == 0);
        CHECK(lines[2].find("mcts") == 0);
        CHECK(lines[2].find("0.5000") != std::string::npos);
        CHECK(lines[3].find("root") == 0);
        CHECK(lines[3].find("n/a") != std::string::npos);
    }
}

TEST_CASE("default ablation matches the pinned report") {
    const char* data_dir = std::getenv("TREEACT_DATA");
    REQUIRE(data_dir != nullptr);
    std::ifstream in(std::string(data_dir) + "/golden/ablation_default.json", std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buffer;
    buffer << in.rdbuf();

    std::vector<SyntheticTask> tasks = generate_tasks(1, 50, 2, 3, 0.75);
    RewardConfig reward;
    reward.alpha = 1.0;
    reward.beta = 0.5;
    reward.iterations = 4;
    AblationReport report = evaluate({SelectionPolicy::mcts, SelectionPolicy::dfs,
                                      SelectionPolicy::root, SelectionPolicy::uniform},
                                     tasks, reward);
    CHECK(report.to_json().dump(2) + "\n" == buffer.str());
}
