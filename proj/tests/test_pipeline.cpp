#include <gtest/gtest.h>

#include "forge/error.hpp"
#include "forge/pipeline.hpp"
#include "support.hpp"

using namespace forge;
using namespace forge::testing;

namespace {

std::string blocks(int n, int first = 1) {
    std::string out;
    for (int i = first; i < first + n; ++i) {
        auto k = std::to_string(i);
        out += k + ".\nQ: What color is object " + k + "?\nA+: crimson " + k + "\nA-1: azure " + k + "\nA-2: olive " +
               k + "\nA-3: amber " + k + "\n\n";
    }
    return out;
}

struct Rig {
    TempDir dir{"pipe"};
    PipelineConfig cfg;
    std::unique_ptr<Gateway> gw;
    MemoryExchangeSink sink;

    Rig(const json& strong, const std::vector<json>& downstream) {
        cfg.run_id = "unit";
        cfg.n_questions = 10;
        cfg.n_negatives = 3;
        cfg.retry.base_delay_ms = 0;
        cfg.retry.max_delay_ms = 0;
        cfg.agents.push_back(mock_profile("strong", AgentRole::strong, write_json(dir / "strong.json", strong)));
        for (std::size_t i = 0; i < downstream.size(); ++i) {
            auto name = "d" + std::to_string(i + 1);
            cfg.agents.push_back(mock_profile(name, AgentRole::downstream, write_json(dir / (name + ".json"), downstream[i])));
        }
        auto opts = gateway_options(cfg);
        opts.default_sink = &sink;
        opts.sleeper = [](std::chrono::milliseconds) {};
        gw = std::make_unique<Gateway>(cfg.agents, opts);
    }

    ImageContext image(const std::string& id = "img1", Partition p = Partition::replace_att) {
        ImageContext c;
        c.record.image_id = id;
        c.record.partition = p;
        return c;
    }
};

json answering(const std::string& fallback) { return json{{"fallback", fallback}}; }

json standard_strong(const std::string& stage3 = blocks(10)) {
    return json{{"rules",
                 {{{"stage", "stage1"}, {"response", "DESC {image_id}"}},
                  {{"stage", "stage3"}, {"response", stage3}},
                  {{"stage", "stage6"}, {"response", blocks(2, 1)}}}}};
}

}  // namespace

TEST(Stage1, StoresScriptedText) {
    Rig rig(standard_strong(), {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    auto d = p.stage1_describe(rig.image("img7"));
    EXPECT_EQ(d.text, "DESC img7");
    EXPECT_EQ(d.stage, DescriptionStage::stage1);
    EXPECT_EQ(d.agent_name, "strong");
    EXPECT_EQ(json(d), json(Pipeline(*rig.gw, rig.cfg).stage1_describe(rig.image("img7"))));
}

TEST(Stage1, EmptyCompletionIsStageError) {
    Rig rig({{"rules", {{{"stage", "stage1"}, {"response", "   "}}}}}, {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    try {
        p.stage1_describe(rig.image());
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "stage1");
    }
}

TEST(Stage1, GatewayFailureCarriesStageTag) {
    Rig rig({{"rules", {{{"stage", "stage1"}, {"response", {{"fail", "transport"}}}}}}}, {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    try {
        p.stage1_describe(rig.image());
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "stage1");
    }
}

TEST(Stage2, FourAgentsFourDescriptions) {
    Rig rig(standard_strong(), std::vector<json>(4, answering("I see things.")));
    Pipeline p(*rig.gw, rig.cfg);
    auto r = p.stage2_describe_all(rig.image());
    EXPECT_EQ(r.descriptions.size(), 4u);
    EXPECT_TRUE(r.failures.empty());
}

TEST(Stage2, OneAgentExhaustsRetries) {
    json broken{{"rules", {{{"stage", "stage2"}, {"response", {{"fail", "transport"}}}}}}};
    Rig rig(standard_strong(), {answering("ok"), broken, answering("ok"), answering("ok")});
    Pipeline p(*rig.gw, rig.cfg);
    auto r = p.stage2_describe_all(rig.image());
    EXPECT_EQ(r.descriptions.size(), 3u);
    ASSERT_EQ(r.failures.size(), 1u);
    EXPECT_EQ(r.failures[0].agent, "d2");
    // Still eligible for stage 3.
    auto d1 = p.stage1_describe(rig.image());
    EXPECT_EQ(p.stage3_generate(rig.image(), d1, r.descriptions).questions.size(), 10u);
    int attempts = 0;
    for (const auto& rec : rig.sink.records())
        if (rec.agent == "d2") attempts = rec.attempts;
    EXPECT_EQ(attempts, 1 + rig.cfg.retry.budget);
}

TEST(Stage2, NoDownstreamAgentsIsConfigErrorBeforeAnyCall) {
    Rig rig(standard_strong(), {});
    EXPECT_THROW(Pipeline(*rig.gw, rig.cfg), ConfigError);
    EXPECT_THROW(rig.cfg.validate(), ConfigError);
    EXPECT_TRUE(rig.sink.records().empty());
}

TEST(Stage3, TenBlocksThirtySamples) {
    Rig rig(standard_strong(), {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    auto img = rig.image();
    auto r = p.stage3_generate(img, p.stage1_describe(img), {{"img1", "d1", "desc", DescriptionStage::stage2}});
    EXPECT_EQ(r.questions.size(), 10u);
    EXPECT_EQ(r.samples.size(), 30u);
    EXPECT_TRUE(r.quarantine.empty());
    for (const auto& s : r.samples) EXPECT_EQ(s.partition, Partition::replace_att);
}

TEST(Stage3, MalformedBlockQuarantined) {
    std::string raw = blocks(9) + "10.\nQ: Broken block?\nA-1: nothing\n";
    Rig rig(standard_strong(raw), {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    auto img = rig.image();
    auto r = p.stage3_generate(img, p.stage1_describe(img), {{"img1", "d1", "desc", DescriptionStage::stage2}});
    EXPECT_EQ(r.questions.size(), 9u);
    EXPECT_EQ(r.quarantine.size(), 1u);
}

TEST(Stage3, TooFewQuestionsIsStageError) {
    Rig rig(standard_strong("I'd rather not."), {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    auto img = rig.image();
    auto d1 = p.stage1_describe(img);
    try {
        p.stage3_generate(img, d1, {{"img1", "d1", "desc", DescriptionStage::stage2}});
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "stage3");
    }
    EXPECT_THROW(p.stage3_generate(img, d1, {}), StageError);
}

// ---------------------------------------------------------------------------
// filter

TEST(Stage4, AllCorrectDiscardedOneWrongKept) {
    // d4 is wrong only when the negative mentions olive.
    json picky{{"rules", {{{"contains", "olive"}, {"response", "{letter_not_of:crimson}"}}}}, {"fallback", "{letter_of:crimson}"}};
    std::vector<json> agents(3, answering("{letter_of:crimson}"));
    agents.push_back(picky);
    Rig rig(standard_strong(blocks(1)), agents);
    Pipeline p(*rig.gw, rig.cfg);
    CRQuestion q = parse_cr_questions(blocks(1), "img1", 1, "stage3").questions.at(0);
    auto samples = explode(q, Partition::replace_att);
    auto out = p.stage4_evaluate_filter(rig.image(), samples);
    ASSERT_EQ(out.kept.size(), 1u);
    EXPECT_EQ(out.kept[0], samples[1].sample_id);  // the olive negative
    EXPECT_EQ(out.discarded.size(), 2u);
    EXPECT_EQ(out.results.size(), 12u);
    EXPECT_DOUBLE_EQ(*out.per_agent["d1"].pre_accuracy(), 100.0);
    EXPECT_NEAR(*out.per_agent["d4"].pre_accuracy(), 200.0 / 3.0, 1e-9);
    EXPECT_DOUBLE_EQ(*out.per_agent["d4"].post_accuracy(), 0.0);
}

TEST(Stage4, AllAgentsFailingIsIndeterminate) {
    json dead{{"rules", {{{"stage", "stage4"}, {"response", {{"fail", "transport"}}}}}}};
    Rig rig(standard_strong(), {dead, dead});
    Pipeline p(*rig.gw, rig.cfg);
    auto samples = explode(parse_cr_questions(blocks(1), "img1", 1, "stage3").questions.at(0), Partition::replace_att);
    auto out = p.stage4_evaluate_filter(rig.image(), samples);
    EXPECT_EQ(out.indeterminate.size(), 3u);
    EXPECT_TRUE(out.kept.empty());
    EXPECT_TRUE(out.discarded.empty());
    EXPECT_EQ(out.per_agent["d1"].pre_n, 0u);
    EXPECT_FALSE(out.per_agent["d1"].pre_accuracy().has_value());
}

TEST(Filter, ExhaustiveFourAgentPatterns) {
    for (int mask = 0; mask < 16; ++mask) {
        std::vector<EvalResult> rs;
        for (int a = 0; a < 4; ++a) {
            EvalResult r;
            r.sample_id = "s";
            r.agent_name = "a" + std::to_string(a);
            r.is_correct = (mask >> a) & 1;
            rs.push_back(r);
        }
        auto out = apply_filter({"s"}, rs);
        EXPECT_EQ(out.fate["s"], mask == 15 ? SampleFate::discarded : SampleFate::kept) << mask;
    }
}

TEST(Filter, IndeterminateVerdictsDoNotDecide) {
    std::vector<EvalResult> rs(2);
    rs[0].sample_id = rs[1].sample_id = "s";
    rs[0].agent_name = "a";
    rs[1].agent_name = "b";
    rs[0].is_correct = true;
    rs[1].determinate = false;  // failed call, recorded as incorrect
    auto out = apply_filter({"s"}, rs);
    EXPECT_EQ(out.fate["s"], SampleFate::discarded);
    EXPECT_EQ(out.per_agent["b"].pre_n, 0u);
}

TEST(Filter, JsonRoundTrip) {
    std::vector<EvalResult> rs(2);
    rs[0].sample_id = "s1";
    rs[1].sample_id = "s2";
    rs[0].agent_name = rs[1].agent_name = "a";
    rs[0].is_correct = true;
    auto out = apply_filter({"s1", "s2"}, rs);
    EXPECT_EQ(json(json(out).get<FilterOutcome>()), json(out));
}

// ---------------------------------------------------------------------------

TEST(Stage5, OpenAnswersPerSurvivingQuestion) {
    json refusing{{"rules", {{{"stage", "stage5"}, {"response", "I can't tell from this image."}}}}, {"fallback", "A"}};
    Rig rig(standard_strong(), std::vector<json>(4, refusing));
    Pipeline p(*rig.gw, rig.cfg);
    auto qs = parse_cr_questions(blocks(3), "img1", 1, "stage3").questions;
    FilterOutcome f;
    // q1 and q2 each keep one sample; every sample of q3 was discarded.
    f.kept = {explode(qs[0], Partition::replace_att)[2].sample_id, explode(qs[1], Partition::replace_att)[0].sample_id};
    for (const auto& s : explode(qs[2], Partition::replace_att)) f.discarded.push_back(s.sample_id);
    auto r = p.stage5_open_answers(rig.image(), qs, f);
    EXPECT_EQ(r.answers.size(), 8u);
    EXPECT_EQ(r.answers[0].text, "I can't tell from this image.");
    EXPECT_EQ(r.excluded_questions, std::vector<std::string>{qs[2].question_id});
}

TEST(Stage5, PerPairFailuresRecorded) {
    json flaky{{"rules", {{{"stage", "stage5"}, {"contains", "object 2"}, {"response", {{"fail", "rejected"}}}}}},
               {"fallback", "some answer"}};
    Rig rig(standard_strong(), {answering("fine"), flaky});
    Pipeline p(*rig.gw, rig.cfg);
    auto qs = parse_cr_questions(blocks(2), "img1", 1, "stage3").questions;
    FilterOutcome f;
    for (const auto& q : qs) f.kept.push_back(explode(q, Partition::replace_att)[0].sample_id);
    auto r = p.stage5_open_answers(rig.image(), qs, f);
    EXPECT_EQ(r.answers.size(), 3u);
    ASSERT_EQ(r.failures.size(), 1u);
    EXPECT_EQ(r.failures[0].agent, "d2");
    EXPECT_EQ(r.failures[0].item_id, qs[1].question_id);
}

TEST(Stage6, IterationTwoQuestions) {
    Rig rig(standard_strong(), {answering("x")});
    Pipeline p(*rig.gw, rig.cfg);
    auto img = rig.image();
    auto d1 = p.stage1_describe(img);
    auto it1 = parse_cr_questions(blocks(2), "img1", 1, "stage3").questions;
    auto r = p.stage6_generate(img, d1, it1, {{it1[0].question_id, "d1", "azure"}});
    ASSERT_EQ(r.questions.size(), 2u);
    EXPECT_EQ(r.questions[0].iteration, 2);
    EXPECT_EQ(r.questions[0].question_id, "img1/it2/q1");
    EXPECT_EQ(r.samples[0].iteration, 2);
    // The strong agent saw the iteration-1 questions in its prompt.
    bool saw = false;
    for (const auto& rec : rig.sink.records())
        if (rec.stage == "stage6") saw = request_text(rec.request).find(it1[1].question_text) != std::string::npos;
    EXPECT_TRUE(saw);
}

// ---------------------------------------------------------------------------
// orchestration on the five-image fixture

TEST(RunPipeline, EndToEndExport) {
    TempDir dir;
    auto cfg = e2e_config();
    auto images = load_image_manifest(cfg.base_dir / cfg.images);
    auto s = run_pipeline(cfg, images, dir / "run");
    ASSERT_TRUE(s.exported.has_value());
    EXPECT_FALSE(s.halted);
    EXPECT_EQ(s.images.size(), 5u);
    for (const auto& o : s.images) {
        EXPECT_FALSE(o.failed) << o.image_id << ": " << o.error;
        EXPECT_EQ(o.last_stage, 7);
    }
    EXPECT_TRUE(verify_export_counts(dir / "run" / "export"));
    RunStore store(dir / "run");
    for (const auto& img : images)
        for (int k = 1; k <= 7; ++k) EXPECT_TRUE(store.load_checkpoint(img.image_id, k).has_value());
    // Stage artifacts per partition.
    EXPECT_TRUE(std::filesystem::exists(store.stage_artifact_path(4, "replace-att")));
}

TEST(RunPipeline, FailedImageDoesNotAbortRun) {
    TempDir dir;
    auto cfg = e2e_config();
    // img2's stage-1 description comes back empty.
    auto strong = json::parse(read_file(fixtures_dir() / "e2e" / "mocks" / "strong.json"));
    strong["rules"].insert(strong["rules"].begin(), json{{"stage", "stage1"}, {"image_id", "img2"}, {"response", ""}});
    auto path = write_json(dir / "strong.json", strong);
    for (auto& a : cfg.agents)
        if (a.name == "strong") a.script = path.string();
    auto s = run_pipeline(cfg, load_image_manifest(cfg.base_dir / cfg.images), dir / "run");
    ASSERT_TRUE(s.exported.has_value());
    int failed = 0;
    for (const auto& o : s.images) {
        if (o.image_id == "img2") {
            EXPECT_TRUE(o.failed);
            EXPECT_EQ(o.failed_stage, "stage1");
            ++failed;
        } else {
            EXPECT_FALSE(o.failed);
        }
    }
    EXPECT_EQ(failed, 1);
    for (const auto& rec : import_benchmark(dir / "run" / "export" / "benchmark.jsonl").dataset)
        EXPECT_NE(rec.image_id, "img2");
}

TEST(RunPipeline, IterationTwoDisabledExportsStageFour) {
    TempDir dir;
    auto cfg = e2e_config();
    cfg.iteration_2_enabled = false;
    auto images = load_image_manifest(cfg.base_dir / cfg.images);
    auto s = run_pipeline(cfg, images, dir / "run");
    ASSERT_TRUE(s.exported.has_value());
    auto data = import_benchmark(dir / "run" / "export" / "benchmark.jsonl").dataset;
    ASSERT_FALSE(data.empty());
    for (const auto& r : data) EXPECT_EQ(r.iteration, 1);
    RunStore store(dir / "run");
    EXPECT_FALSE(store.load_checkpoint("img1", 5).has_value());
}

TEST(RunPipeline, InvalidConfigFailsBeforeAnyCall) {
    TempDir dir;
    auto cfg = e2e_config();
    std::erase_if(cfg.agents, [](const AgentProfile& a) { return a.role == AgentRole::downstream; });
    EXPECT_THROW(run_pipeline(cfg, load_image_manifest(cfg.base_dir / cfg.images), dir / "run"), ConfigError);
    EXPECT_FALSE(std::filesystem::exists(dir / "run" / "exchanges"));
}

TEST(RunPipeline, ConfigChangeOnResumeRejected) {
    TempDir dir;
    auto cfg = e2e_config();
    auto images = load_image_manifest(cfg.base_dir / cfg.images);
    RunOptions halt;
    halt.halt_after_stage = 2;
    run_pipeline(cfg, images, dir / "run", halt);
    cfg.n_questions = 5;
    EXPECT_THROW(run_pipeline(cfg, images, dir / "run"), ConfigError);
}

TEST(RunPipeline, HaltThenResumeMatchesFullRun) {
    TempDir dir;
    auto cfg = e2e_config();
    auto images = load_image_manifest(cfg.base_dir / cfg.images);
    run_pipeline(cfg, images, dir / "full");
    RunOptions halt;
    halt.halt_after_stage = 4;
    auto h = run_pipeline(cfg, images, dir / "resumed", halt);
    EXPECT_TRUE(h.halted);
    EXPECT_FALSE(std::filesystem::exists(dir / "resumed" / "export" / "benchmark.jsonl"));
    run_pipeline(cfg, images, dir / "resumed");
    EXPECT_EQ(snapshot(dir / "full", deterministic_outputs()), snapshot(dir / "resumed", deterministic_outputs()));
}

TEST(RunPipeline, DryRunPlan) {
    auto cfg = e2e_config();
    auto plan = stage_plan(cfg, load_image_manifest(cfg.base_dir / cfg.images));
    ASSERT_GE(plan.size(), 7u);
    std::string all;
    for (const auto& l : plan) all += l + "\n";
    EXPECT_NE(all.find("stage1"), std::string::npos);
    EXPECT_NE(all.find("stage7"), std::string::npos);
}

TEST(Config, RejectsUnknownKeys) {
    EXPECT_THROW(parse_config(json{{"run_id", "x"}, {"surprise", 1}}, "."), ConfigError);
}

TEST(Config, SnapshotHoldsCredentialNamesOnly) {
    json j = json::parse(read_file(fixtures_dir() / "e2e" / "config.json"));
    j["agents"][1] = {{"name", "remote-a"},         {"kind", "remote"},      {"endpoint", "https://example.invalid/v1"},
                      {"credential_ref", "AGENT_A_KEY"}, {"role", "downstream"}};
    auto cfg = parse_config(j, fixtures_dir() / "e2e");
    auto snap = json(cfg).dump();
    EXPECT_NE(snap.find("AGENT_A_KEY"), std::string::npos);
    EXPECT_EQ(snap.find("Bearer"), std::string::npos);
}
