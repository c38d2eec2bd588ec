#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "treeact/knowledge.hpp"
#include "treeact/memory.hpp"
#include "treeact/toolkit.hpp"

using namespace treeact;

namespace {

const EmbeddingFn kTestEmbed = [](const std::string& text) { return test_embedding(text); };

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() /
               ("treeact_toolkit_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

ToolRegistry basic_registry() {
    ToolRegistry registry;
    registry.add(ToolSpec{"Alpha", "first tool", ToolKind::subtask},
                 [](const ToolInvocation& inv, const ToolContext&) { return "alpha:" + inv.sub_question; });
    registry.add(ToolSpec{"Beta", "second tool", ToolKind::utility},
                 [](const ToolInvocation& inv, const ToolContext&) { return "beta:" + inv.video_ref; });
    return registry;
}

TaskMemory people_memory() {
    std::vector<ExtractionRecord> records;
    for (int i = 0; i < 3; ++i) {
        ExtractionRecord r;
        r.kind = RecordKind::detection;
        r.instance_id = i;
        r.frame_index = i;
        r.timestamp = i;
        r.category = "person";
        r.box = {0, 0, 1, 1};
        records.push_back(r);
    }
    return ingest(std::move(records), "people.mp4", {true, false});
}

} // namespace

TEST_CASE("tool registry validates registrations") {
    ToolRegistry registry = basic_registry();
    CHECK(registry.size() == 2);
    CHECK(registry.names_csv() == "Alpha, Beta");
    REQUIRE(registry.find("Alpha"));
    CHECK(registry.find("Alpha")->kind == ToolKind::subtask);
    CHECK_FALSE(registry.find("alpha")); // case-sensitive

    CHECK_THROWS_AS(registry.add(ToolSpec{"Alpha", "dup", ToolKind::subtask}, {}), std::invalid_argument);
    CHECK_THROWS_AS(registry.add(ToolSpec{"has space", "d", ToolKind::subtask}, {}), std::invalid_argument);
    CHECK_THROWS_AS(registry.add(ToolSpec{"", "d", ToolKind::subtask}, {}), std::invalid_argument);
    CHECK_THROWS_AS(registry.add(ToolSpec{"NoDesc", "", ToolKind::subtask}, {}), std::invalid_argument);

    CHECK_THROWS_AS(registry.invoke(ToolInvocation{"Nope", "v", "q"}, {}), std::logic_error);
    CHECK(registry.invoke(ToolInvocation{"Alpha", "v", "q"}, {}) == "alpha:q");
}

TEST_CASE("registry descriptions render one line per tool") {
    ToolRegistry registry = basic_registry();
    CHECK(registry_descriptions(registry) == "Alpha: first tool\nBeta: second tool");
    ToolRegistry empty;
    CHECK(registry_descriptions(empty) == "");
}

TEST_CASE("invocation parsing implements the command grammar") {
    ToolRegistry registry = basic_registry();

    SECTION("splits at the first '#'") {
        auto r = parse_invocation("Alpha", "vid.mp4#how many #hashtags?", registry);
        REQUIRE(r.ok());
        CHECK(r.invocation->video_ref == "vid.mp4");
        CHECK(r.invocation->sub_question == "how many #hashtags?");
    }

    SECTION("trims and strips one trailing period from the tool name") {
        auto r = parse_invocation("  Alpha. ", " v.mp4 # q ", registry);
        REQUIRE(r.ok());
        CHECK(r.invocation->tool_name == "Alpha");
        CHECK(r.invocation->video_ref == "v.mp4");
        CHECK(r.invocation->sub_question == "q");
    }

    SECTION("unknown tool lists the available tools") {
        auto r = parse_invocation("Gamma", "v#q", registry);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error.find("unknown tool: 'Gamma'") != std::string::npos);
        CHECK(r.error.find("Alpha, Beta") != std::string::npos);
    }

    SECTION("non-utility tools require the separator") {
        auto r = parse_invocation("Alpha", "no separator here", registry);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error.find("missing '#' separator") != std::string::npos);

        auto empty_q = parse_invocation("Alpha", "v.mp4#", registry);
        REQUIRE_FALSE(empty_q.ok());
        CHECK(empty_q.error.find("empty sub-question") != std::string::npos);
    }

    SECTION("utility tools take the whole input without a separator") {
        auto r = parse_invocation("Beta", "raw input", registry);
        REQUIRE(r.ok());
        CHECK(r.invocation->video_ref == "raw input");
        CHECK(r.invocation->sub_question == "");
    }

    SECTION("round-trip through format_invocation_input") {
        ToolInvocation inv{"Alpha", "v.mp4", "what happens?"};
        auto r = parse_invocation("Alpha", format_invocation_input(inv), registry);
        REQUIRE(r.ok());
        CHECK(*r.invocation == inv);
    }
}

TEST_CASE("sql extraction handles fences and markers") {
    CHECK(extract_sql("SELECT 1") == "SELECT 1");
    CHECK(extract_sql("```sql\nSELECT a FROM t\n```") == "SELECT a FROM t");
    CHECK(extract_sql("```sqlite\nSELECT a\nFROM t\n```") == "SELECT a\nFROM t");
    CHECK(extract_sql("```\nSELECT 2\n```") == "SELECT 2");
    CHECK(extract_sql("Sure!\n```sql\nSELECT 3\n```\nthat should work") == "SELECT 3");
    CHECK(extract_sql("SQL: SELECT 4") == "SELECT 4");
    CHECK(extract_sql("  SELECT 5  ") == "SELECT 5");
}

TEST_CASE("sql sub-agent loop executes, corrects, and answers") {
    auto memory = people_memory();

    SECTION("success on the first attempt") {
        ScriptedBackend backend({
            "SQL: SELECT COUNT(*) FROM instances WHERE category='person'",
            "There are 3 people.",
        });
        auto out = run_sql_subagent(memory.store(), builtin_subtask_examples(SubtaskKind::count),
                                    "how many people?", backend);
        CHECK(out == "There are 3 people.");
        CHECK(backend.remaining() == 0);
    }

    SECTION("errors are fed back as correction turns") {
        std::vector<ChatRequest> seen;
        int call = 0;
        FnBackend backend([&](const ChatRequest& req) -> std::string {
            seen.push_back(req);
            switch (call++) {
                case 0: return "SELECT * FROM people"; // unknown table
                case 1: return "SELEKT *";             // syntax error
                case 2: return "SELECT COUNT(*) FROM instances";
                default: return "Three people appear.";
            }
        });
        auto out = run_sql_subagent(memory.store(), "", "how many?", backend);
        CHECK(out == "Three people appear.");
        REQUIRE(seen.size() == 4);
        CHECK(seen[0].system_prompt.find("The store schema:") != std::string::npos);
        CHECK(seen[0].system_prompt.find("Table instances(") != std::string::npos);
        CHECK(seen[1].turns.back().text.find("The query failed: unknown table") != std::string::npos);
        CHECK(seen[2].turns.back().text.find("The query failed: SQL syntax error") != std::string::npos);
        CHECK(seen[3].turns.back().text.find("SQL result:") != std::string::npos);
        CHECK(seen[3].turns.back().text.find("3") != std::string::npos);
        // Conversation layering: user, assistant, user, assistant, user, ...
        CHECK(seen[3].turns[0].role == "user");
        CHECK(seen[3].turns[1].role == "assistant");
    }

    SECTION("error budget exhaustion fails the sub-task") {
        ScriptedBackend backend({"DROP TABLE instances", "DELETE FROM instances", "bogus"});
        auto out = run_sql_subagent(memory.store(), "", "q", backend);
        CHECK(out == "SUBTASK_FAILED: sql_error_budget_exhausted");
        CHECK(backend.remaining() == 0);
    }

    SECTION("write attempts never mutate the store") {
        ScriptedBackend backend({"DELETE FROM instances", "SELECT COUNT(*) FROM instances", "still 3"});
        run_sql_subagent(memory.store(), "", "q", backend);
        auto out = memory.execute_sql("SELECT COUNT(*) FROM instances");
        REQUIRE(out.ok());
        CHECK(std::get<std::int64_t>(out.table->rows[0][0]) == 3);
    }
}

TEST_CASE("subtask tool registration covers all six kinds") {
    ToolRegistry registry;
    register_subtask_tools(registry);
    CHECK(registry.size() == 6);
    CHECK(registry.names_csv() == "VideoWhen, VideoWhy, VideoWhat, VideoHow, VideoCount, VideoOther");
    REQUIRE(registry.find("VideoWhat"));
    CHECK(registry.find("VideoWhat")->description.find(
              "For example: inputs is ./videos/xxx.mp4#What's in the video?") != std::string::npos);

    SECTION("distinct example blocks per kind") {
        std::set<std::string> blocks;
        for (auto kind : kSubtaskKinds) blocks.insert(builtin_subtask_examples(kind));
        CHECK(blocks.size() == 6);
    }

    SECTION("handlers guard against missing context") {
        CHECK(registry.invoke(ToolInvocation{"VideoCount", "v", "q"}, {}) == "SUBTASK_FAILED: no_memory");
        auto memory = people_memory();
        ToolContext ctx{&memory, nullptr};
        CHECK(registry.invoke(ToolInvocation{"VideoCount", "v", "q"}, ctx) == "SUBTASK_FAILED: no_backend");
    }

    SECTION("invocation runs the sql sub-agent against the memory") {
        auto memory = people_memory();
        ScriptedBackend backend({"SELECT COUNT(*) FROM instances", "3 instances."});
        ToolContext ctx{&memory, &backend};
        CHECK(registry.invoke(ToolInvocation{"VideoCount", "v", "how many?"}, ctx) == "3 instances.");
    }
}

TEST_CASE("subtask examples load from files with builtin fallback") {
    auto dir = temp_dir("examples");
    std::ofstream(dir / "count.txt") << "Sub-question: custom\nSQL: SELECT 1\n";
    CHECK(load_subtask_examples(SubtaskKind::count, dir.string()) ==
          "Sub-question: custom\nSQL: SELECT 1\n");
    CHECK(load_subtask_examples(SubtaskKind::when, dir.string()) ==
          builtin_subtask_examples(SubtaskKind::when));

    std::ofstream(dir / "why.txt") << "   \n"; // effectively empty: fall back
    CHECK(load_subtask_examples(SubtaskKind::why, dir.string()) ==
          builtin_subtask_examples(SubtaskKind::why));
    std::filesystem::remove_all(dir);

    SECTION("shipped example files match the builtins") {
        const char* data = std::getenv("TREEACT_DATA");
        REQUIRE(data);
        auto examples = std::filesystem::path(data) / "subtask_examples";
        for (auto kind : kSubtaskKinds) {
            auto p = examples / (std::string(subtask_kind_name(kind)) + ".txt");
            INFO(p.string());
            std::ifstream in(p);
            REQUIRE(in);
            std::ostringstream os;
            os << in.rdbuf();
            CHECK(os.str() == builtin_subtask_examples(kind));
        }
    }
}

TEST_CASE("embedding retrieval is deterministic and tie-stable") {
    auto e1 = test_embedding("a b a");
    auto e2 = test_embedding("a b a");
    CHECK(e1 == e2);
    CHECK(cosine_similarity(e1, e2) == Catch::Approx(1.0));
    CHECK(cosine_similarity(test_embedding(""), e1) == 0.0);

    SECTION("chunking splits on token counts") {
        std::string text;
        for (int i = 0; i < 600; ++i) text += "tok" + std::to_string(i) + " ";
        auto chunks = chunk_text(text, 256);
        REQUIRE(chunks.size() == 3);
        CHECK(chunks[0].find("tok0 ") == 0);
        CHECK(chunks[2].find("tok599") != std::string::npos);
    }

    SECTION("retrieval ranks the matching chunk first and keeps ties in index order") {
        std::vector<std::string> chunks = {"cats purr", "dogs bark loudly", "same words", "same words"};
        auto top = retrieve_chunks(chunks, "dogs bark loudly", kTestEmbed, 4);
        REQUIRE(top.size() == 4);
        CHECK(top[0].index == 1);
        // The two identical chunks tie; ascending index order must hold.
        size_t first_same = 0, second_same = 0;
        for (size_t i = 0; i < top.size(); ++i) {
            if (top[i].index == 2) first_same = i;
            if (top[i].index == 3) second_same = i;
        }
        CHECK(first_same < second_same);

        auto top2 = retrieve_chunks(chunks, "dogs bark loudly", kTestEmbed, 2);
        CHECK(top2.size() == 2);
    }
}

TEST_CASE("textual knowledge tool retrieves and summarizes") {
    auto dir = temp_dir("textual");
    auto doc = dir / "notes.txt";
    std::ofstream(doc) << "The capital of France is Paris. The capital of Peru is Lima.";

    KnowledgeSource source{KnowledgeKind::textual, doc.string(), "Course notes."};

    SECTION("answers from excerpts") {
        std::string seen_user;
        FnBackend backend([&](const ChatRequest& req) {
            seen_user = req.turns.back().text;
            return "  Paris.  ";
        });
        auto out = run_knowledge_tool(source, "capital of France?", backend, kTestEmbed);
        CHECK(out == "Paris.");
        CHECK(seen_user.find("Excerpts:") == 0);
        CHECK(seen_user.find("[1] ") != std::string::npos);
        CHECK(seen_user.find("Question: capital of France?") != std::string::npos);
    }

    SECTION("missing embedding backend") {
        ScriptedBackend backend{std::vector<std::string>{}};
        CHECK(run_knowledge_tool(source, "q", backend) == "KNOWLEDGE_FAILED: embedding_backend_missing");
    }

    SECTION("missing document") {
        ScriptedBackend backend{std::vector<std::string>{}};
        KnowledgeSource missing{KnowledgeKind::textual, (dir / "absent.txt").string(), ""};
        auto out = run_knowledge_tool(missing, "q", backend, kTestEmbed);
        CHECK(out.find("KNOWLEDGE_FAILED: source_unavailable") == 0);
    }

    SECTION("empty document yields no passages") {
        auto empty_doc = dir / "empty.txt";
        std::ofstream(empty_doc) << "";
        ScriptedBackend backend{std::vector<std::string>{}};
        KnowledgeSource empty{KnowledgeKind::textual, empty_doc.string(), ""};
        CHECK(run_knowledge_tool(empty, "q", backend, kTestEmbed) == "no relevant passages found");
    }

    std::filesystem::remove_all(dir);
}

TEST_CASE("symbolic knowledge tool queries an external store") {
    auto dir = temp_dir("symbolic");
    auto db = (dir / "facts.db").string();
    {
        SqlStore store(db);
        store.exec_raw("CREATE TABLE facts(name TEXT, value INTEGER)");
        store.exec_raw("INSERT INTO facts VALUES('answer', 42)");
    }
    KnowledgeSource source{KnowledgeKind::symbolic, db, "Fact store."};
    ScriptedBackend backend({"SELECT value FROM facts WHERE name='answer'", "The value is 42."});
    CHECK(run_knowledge_tool(source, "what is the answer?", backend) == "The value is 42.");

    SECTION("missing store file") {
        ScriptedBackend b2{std::vector<std::string>{}};
        KnowledgeSource missing{KnowledgeKind::symbolic, (dir / "absent.db").string(), ""};
        CHECK(run_knowledge_tool(missing, "q", b2).find("KNOWLEDGE_FAILED: source_unavailable") == 0);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("web knowledge tool substitutes the query and summarizes results") {
    KnowledgeSource source{KnowledgeKind::web, "http://search.test/api?q={query}", "Web search."};

    SECTION("url template substitution with encoding") {
        std::string seen_url;
        WebFetchFn fetch = [&](const std::string& url) {
            seen_url = url;
            return R"({"results": [{"title": "T1", "snippet": "S1"}, {"title": "T2", "text": "S2"}]})";
        };
        std::string seen_user;
        FnBackend backend([&](const ChatRequest& req) {
            seen_user = req.turns.back().text;
            return "Summary answer.";
        });
        auto out = run_knowledge_tool(source, "what is a quark?", backend, {}, fetch);
        CHECK(out == "Summary answer.");
        CHECK(seen_url == "http://search.test/api?q=what%20is%20a%20quark%3F");
        CHECK(seen_user.find("- T1: S1") != std::string::npos);
        CHECK(seen_user.find("- T2: S2") != std::string::npos);
    }

    SECTION("empty results") {
        WebFetchFn fetch = [](const std::string&) { return "[]"; };
        ScriptedBackend backend{std::vector<std::string>{}};
        CHECK(run_knowledge_tool(source, "q", backend, {}, fetch) == "no results found");
    }

    SECTION("fetch failure becomes an observation") {
        WebFetchFn fetch = [](const std::string&) -> std::string {
            throw std::runtime_error("socket down");
        };
        ScriptedBackend backend{std::vector<std::string>{}};
        auto out = run_knowledge_tool(source, "q", backend, {}, fetch);
        CHECK(out.find("KNOWLEDGE_FAILED: source_unavailable") == 0);
        CHECK(out.find("socket down") != std::string::npos);
    }

    SECTION("template without {query} is a configuration failure") {
        KnowledgeSource bad{KnowledgeKind::web, "http://search.test/api", ""};
        ScriptedBackend backend{std::vector<std::string>{}};
        CHECK(run_knowledge_tool(bad, "q", backend).find("KNOWLEDGE_FAILED: source_unavailable") == 0);
    }
}

TEST_CASE("search result parsing accepts both shapes") {
    auto arr = parse_search_results(R"([{"title": "a", "snippet": "s"}])");
    REQUIRE(arr.size() == 1);
    CHECK(arr[0].title == "a");
    auto obj = parse_search_results(R"({"results": [{"title": "b", "text": "t"}]})");
    REQUIRE(obj.size() == 1);
    CHECK(obj[0].snippet == "t");
    CHECK(parse_search_results("not json").empty());
    CHECK(parse_search_results(R"({"other": 1})").empty());
}

TEST_CASE("utility tools shell out with quoted placeholders") {
    ToolRegistry registry;
    register_utility_tool(registry, "Echo", "echoes its input", "echo {input}");
    register_utility_tool(registry, "Fail", "always fails", "sh -c 'echo boom; exit 3'");

    ToolInvocation inv{"Echo", "vid.mp4", "it's a test"};
    CHECK(registry.invoke(inv, {}) == "vid.mp4#it's a test");

    auto failed = registry.invoke(ToolInvocation{"Fail", "x", ""}, {});
    CHECK(failed.find("UTILITY_FAILED(status ") == 0);
    CHECK(failed.find("boom") != std::string::npos);

    SECTION("quoting survives hostile input") {
        CHECK(shell_quote("a'b") == "'a'\\''b'");
        ToolInvocation hostile{"Echo", "$(rm -rf /tmp/nope)", "`date`"};
        auto out = registry.invoke(hostile, {});
        CHECK(out == "$(rm -rf /tmp/nope)#`date`");
    }

    SECTION("run_command captures stdout and exit status") {
        auto ok = run_command("echo hi");
        CHECK(ok.status == 0);
        CHECK(ok.output == "hi\n");
        auto bad = run_command("exit 7");
        CHECK(bad.status != 0);
    }
}

TEST_CASE("declarative registry configuration") {
    auto dir = temp_dir("config");
    auto doc = dir / "doc.txt";
    std::ofstream(doc) << "alpha beta gamma";

    nlohmann::json config{
        {"tools",
         nlohmann::json::array(
             {{{"name", "Notes"},
               {"kind", "knowledge"},
               {"source_kind", "textual"},
               {"locator", doc.string()},
               {"description", "Project notes."}},
              {{"name", "Shell"}, {"kind", "utility"}, {"command", "echo {sub_question}"}, {"description", "Echo."}}})},
    };

    ToolRegistry registry;
    configure_registry(registry, config, kTestEmbed);
    CHECK(registry.size() == 8); // six subtask tools + two configured
    REQUIRE(registry.find("Notes"));
    CHECK(registry.find("Notes")->kind == ToolKind::knowledge);
    CHECK(registry.find("Notes")->description.find("The inputs are a context reference") !=
          std::string::npos);
    REQUIRE(registry.find("Shell"));

    SECTION("subtask registration can be disabled") {
        ToolRegistry bare;
        configure_registry(bare, {{"register_subtask_tools", false}});
        CHECK(bare.empty());
    }

    SECTION("unknown kinds are rejected") {
        ToolRegistry r2;
        CHECK_THROWS_AS(
            configure_registry(r2, {{"register_subtask_tools", false},
                                    {"tools", nlohmann::json::array({{{"name", "X"}, {"kind", "magic"}}})}}),
            std::invalid_argument);
        ToolRegistry r3;
        CHECK_THROWS_AS(
            configure_registry(r3,
                               {{"register_subtask_tools", false},
                                {"tools", nlohmann::json::array({{{"name", "X"},
                                                                  {"kind", "knowledge"},
                                                                  {"source_kind", "psychic"}}})}}),
            std::invalid_argument);
        CHECK_THROWS_AS(configure_registry(r3, nlohmann::json::array()), std::invalid_argument);
    }

    SECTION("file loading") {
        auto cfg_path = dir / "tools.json";
        std::ofstream(cfg_path) << config.dump();
        ToolRegistry from_file;
        configure_registry_file(from_file, cfg_path.string(), kTestEmbed);
        CHECK(from_file.size() == 8);
        ToolRegistry r4;
        CHECK_THROWS_AS(configure_registry_file(r4, (dir / "absent.json").string()), std::runtime_error);
    }

    std::filesystem::remove_all(dir);
}
