#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "forge/error.hpp"
#include "forge/pipeline.hpp"

namespace forge {

namespace {

json stats_json(const std::map<std::string, AgentFilterStats>& m) {
    json out = json::object();
    for (const auto& [name, s] : m) {
        auto pre = s.pre_accuracy();
        auto post = s.post_accuracy();
        out[name] = json{{"pre_n", s.pre_n},
                         {"pre_correct", s.pre_correct},
                         {"post_n", s.post_n},
                         {"post_correct", s.post_correct},
                         {"pre_accuracy", pre ? json(round1(*pre)) : json(nullptr)},
                         {"post_accuracy", post ? json(round1(*post)) : json(nullptr)}};
    }
    return out;
}

}  // namespace

void to_json(json& j, const RunSummary& s) {
    json images = json::array();
    for (const auto& o : s.images)
        images.push_back(json{{"image_id", o.image_id},
                              {"partition", o.partition},
                              {"last_stage", o.last_stage},
                              {"failed", o.failed},
                              {"failed_stage", o.failed_stage},
                              {"error", o.error},
                              {"kept", o.kept}});
    j = json{{"run_id", s.run_id},
             {"images", images},
             {"halted", s.halted},
             {"stage4", stats_json(s.stage4)},
             {"stage7", stats_json(s.stage7)},
             {"warnings", s.warnings}};
    if (s.exported)
        j["export"] = json{{"total", s.exported->total}, {"per_partition", s.exported->per_partition}};
    else
        j["export"] = nullptr;
}

std::vector<std::string> stage_plan(const PipelineConfig& cfg, const std::vector<ImageRecord>& images) {
    std::string strong;
    std::vector<std::string> downstream;
    for (const auto& a : cfg.agents) {
        if (a.role == AgentRole::strong) strong = a.name;
        if (a.role == AgentRole::downstream) downstream.push_back(a.name);
    }
    const std::size_t n_img = images.size();
    const std::size_t n_down = downstream.size();
    const std::size_t n_samples = static_cast<std::size_t>(cfg.n_questions) * static_cast<std::size_t>(cfg.n_negatives);
    std::string names;
    for (const auto& d : downstream) names += (names.empty() ? "" : ", ") + d;

    std::vector<std::string> out;
    out.push_back("images: " + std::to_string(n_img) + "; strong agent: " + strong + "; downstream agents: " + names);
    out.push_back("stage1 describe (strong): " + std::to_string(n_img) + " calls");
    out.push_back("stage2 describe (downstream): " + std::to_string(n_img * n_down) + " calls");
    out.push_back("stage3 generate " + std::to_string(cfg.n_questions) + " questions x " +
                  std::to_string(cfg.n_negatives) + " negatives (strong): " + std::to_string(n_img) + " calls");
    out.push_back("stage4 evaluate + filter (downstream, generate mode): up to " +
                  std::to_string(n_img * n_samples * n_down) + " calls");
    if (!cfg.iteration_2_enabled) {
        out.push_back("stages 5-7 disabled (iteration_2_enabled=false); export from stage-4 kept samples");
        return out;
    }
    out.push_back("stage5 open answers (downstream): up to " +
                  std::to_string(n_img * static_cast<std::size_t>(cfg.n_questions) * n_down) + " calls");
    out.push_back("stage6 harder questions (strong): " + std::to_string(n_img) + " calls");
    out.push_back("stage7 evaluate + filter (downstream, generate mode): up to " +
                  std::to_string(n_img * n_samples * n_down) + " calls");
    return out;
}

Dataset collect_final_dataset(const RunStore& store, const std::vector<ImageRecord>& images, bool iteration_2_enabled) {
    const int eval_stage = iteration_2_enabled ? 7 : 4;
    const int gen_stage = iteration_2_enabled ? 6 : 3;
    Dataset out;
    for (const auto& img : images) {
        auto filter = store.load_checkpoint(img.image_id, eval_stage);
        auto gen = store.load_checkpoint(img.image_id, gen_stage);
        if (!filter || !gen) continue;
        auto outcome = filter->get<FilterOutcome>();
        auto questions = gen->get<QuestionsResult>();
        std::set<std::string> kept(outcome.kept.begin(), outcome.kept.end());
        for (const auto& s : questions.samples)
            if (kept.count(s.sample_id)) out.push_back(s);
    }
    std::sort(out.begin(), out.end(), [](const CRSample& a, const CRSample& b) { return a.sample_id < b.sample_id; });
    return out;
}

namespace {

// Drops exchange records of stages that have no checkpoint yet, so a resumed
// image logs exactly what an uninterrupted run would.
void truncate_exchanges(const std::filesystem::path& path, int last_stage) {
    if (!std::filesystem::exists(path)) return;
    std::string kept;
    for (const auto& line : split_lines(read_file(path))) {
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        int k = stage_index(j.value("stage", ""));
        if (k >= 1 && k <= last_stage) kept += line + "\n";
    }
    write_file_atomic(path, kept);
}

struct ImageState {
    std::optional<Description> s1;
    std::optional<DescriptionsResult> s2;
    std::optional<QuestionsResult> s3;
    std::optional<FilterOutcome> s4;
    std::optional<OpenAnswersResult> s5;
    std::optional<QuestionsResult> s6;
    std::optional<FilterOutcome> s7;
};

void load_state(const RunStore& store, const std::string& id, int last, ImageState& st) {
    auto get = [&](int k) { return *store.load_checkpoint(id, k); };
    if (last >= 1) st.s1 = get(1).get<Description>();
    if (last >= 2) st.s2 = get(2).get<DescriptionsResult>();
    if (last >= 3) st.s3 = get(3).get<QuestionsResult>();
    if (last >= 4) st.s4 = get(4).get<FilterOutcome>();
    if (last >= 5) st.s5 = get(5).get<OpenAnswersResult>();
    if (last >= 6) st.s6 = get(6).get<QuestionsResult>();
    if (last >= 7) st.s7 = get(7).get<FilterOutcome>();
}

json run_stage(Pipeline& p, const ImageContext& ctx, int k, ImageState& st) {
    switch (k) {
        case 1: st.s1 = p.stage1_describe(ctx); return *st.s1;
        case 2: st.s2 = p.stage2_describe_all(ctx); return *st.s2;
        case 3: st.s3 = p.stage3_generate(ctx, *st.s1, st.s2->descriptions); return *st.s3;
        case 4: st.s4 = p.stage4_evaluate_filter(ctx, st.s3->samples); return *st.s4;
        case 5: st.s5 = p.stage5_open_answers(ctx, st.s3->questions, *st.s4); return *st.s5;
        case 6: st.s6 = p.stage6_generate(ctx, *st.s1, st.s3->questions, st.s5->answers); return *st.s6;
        case 7: st.s7 = p.stage7_evaluate_filter(ctx, st.s6->samples); return *st.s7;
    }
    throw PreconditionError("no stage " + std::to_string(k));
}

}  // namespace

RunSummary run_pipeline(const PipelineConfig& cfg, const std::vector<ImageRecord>& all_images,
                        const std::filesystem::path& run_dir, const RunOptions& options, Gateway* gateway) {
    cfg.validate();
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    std::error_code ec;
    std::filesystem::create_directories(run_dir, ec);
    if (ec) throw StorageError("cannot create run directory " + run_dir.string() + ": " + ec.message());
    RunLock lock(run_dir);
    RunStore store(run_dir);

    std::vector<ImageRecord> images;
    for (const auto& img : all_images)
        if (cfg.partitions.empty() ||
            std::find(cfg.partitions.begin(), cfg.partitions.end(), img.partition) != cfg.partitions.end())
            images.push_back(img);
    std::sort(images.begin(), images.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });

    RunManifest manifest;
    manifest.run_id = cfg.run_id;
    manifest.config = cfg;
    manifest.config.erase("workers");  // execution detail; resuming with another width is fine
    manifest.seeds = json{{"order", cfg.order_seed}, {"review", cfg.review_seed}};
    store.init_run(manifest);

    RunSummary summary;
    summary.run_id = cfg.run_id;

    // Ingest.
    std::map<std::string, std::optional<ImagePayload>> payloads;
    std::map<std::string, std::string> ingest_errors;
    for (auto& img : images) {
        try {
            payloads[img.image_id] = load_image(img);
        } catch (const Error& e) {
            ingest_errors[img.image_id] = e.what();
        } catch (const std::exception& e) {
            ingest_errors[img.image_id] = e.what();
        }
    }
    store.save_images(images);

    std::unique_ptr<Gateway> owned;
    if (!gateway) {
        owned = std::make_unique<Gateway>(cfg.agents, gateway_options(cfg));
        gateway = owned.get();
    }
    Pipeline pipeline(*gateway, cfg);

    // Capability probes are run-level and logged separately.
    std::filesystem::create_directories(store.run_exchanges_path().parent_path());
    write_file_atomic(store.run_exchanges_path(), "");
    {
        JsonlExchangeSink run_sink(store.run_exchanges_path());
        for (const auto& a : cfg.agents) {
            if (a.role == AgentRole::judge) continue;
            CapabilitySet caps;
            try {
                caps = gateway->probe_capabilities(a.name, ExchangeContext{"probe", "", "", &run_sink});
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                summary.warnings.push_back("capability probe failed for " + a.name + ": " + e.what());
                continue;
            }
            if (!caps.supports_images)
                throw CapabilityError("agent " + a.name + " does not accept images");
        }
    }

    std::vector<std::string> ids;
    for (const auto& img : images) ids.push_back(img.image_id);
    auto resume = store.resume(ids);
    for (const auto& w : resume.warnings) {
        summary.warnings.push_back(w);
        log("warning: " + w);
    }

    const int final_stage = cfg.iteration_2_enabled ? kStageCount : 4;
    summary.images.resize(images.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> halted{false};
    std::atomic<bool> abort{false};
    std::exception_ptr fatal;
    std::mutex fatal_mu;

    auto work = [&](std::size_t i) {
        const auto& img = images[i];
        ImageOutcome& out = summary.images[i];
        out.image_id = img.image_id;
        out.partition = to_string(img.partition);
        const auto rs = resume.images.at(img.image_id);
        out.last_stage = rs.last_stage;
        if (rs.failed) store.clear_failure(img.image_id);

        if (auto it = ingest_errors.find(img.image_id); it != ingest_errors.end()) {
            out.failed = true;
            out.failed_stage = "ingest";
            out.error = it->second;
            store.record_failure(img.image_id, 0, it->second);
            log(img.image_id + ": ingest failed: " + it->second);
            return;
        }

        const auto ex_path = store.exchanges_path(img.image_id);
        std::filesystem::create_directories(ex_path.parent_path());
        truncate_exchanges(ex_path, rs.last_stage);
        JsonlExchangeSink sink(ex_path);
        ImageContext ctx{img, payloads[img.image_id], &sink};

        ImageState st;
        load_state(store, img.image_id, rs.last_stage, st);

        for (int k = rs.last_stage + 1; k <= final_stage; ++k) {
            if (abort) return;
            if (options.halt_after_stage && k > *options.halt_after_stage) {
                halted = true;
                return;
            }
            try {
                json payload = run_stage(pipeline, ctx, k, st);
                store.checkpoint(img.image_id, k, payload);
                out.last_stage = k;
                log(img.image_id + ": " + stage_name(k) + " done");
            } catch (const StageError& e) {
                out.failed = true;
                out.failed_stage = e.stage();
                out.error = e.what();
                store.record_failure(img.image_id, k, e.what());
                log(img.image_id + ": failed: " + e.what());
                return;
            }
        }
        if (final_stage == kStageCount ? st.s7.has_value() : st.s4.has_value())
            out.kept = (final_stage == kStageCount ? st.s7 : st.s4)->kept.size();
    };

    const int width = std::max(1, std::min<int>(options.workers.value_or(cfg.workers), static_cast<int>(images.size())));
    {
        std::vector<std::jthread> pool;
        for (int w = 0; w < width; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < images.size() && !abort; i = next++) {
                    try {
                        work(i);
                    } catch (...) {
                        std::lock_guard g(fatal_mu);
                        if (!fatal) fatal = std::current_exception();
                        abort = true;
                    }
                }
            });
    }
    if (fatal) std::rethrow_exception(fatal);

    summary.halted = halted;
    if (summary.halted) {
        log("halted after " + stage_name(*options.halt_after_stage));
        return summary;
    }

    // Stage artifacts: one line per image, grouped by partition.
    for (int k = 1; k <= final_stage; ++k) {
        std::map<std::string, std::vector<json>> rows;
        for (const auto& img : images)
            if (auto cp = store.load_checkpoint(img.image_id, k))
                rows[to_string(img.partition)].push_back(json{{"image_id", img.image_id}, {"payload", *cp}});
        for (const auto& [part, lines] : rows) {
            auto path = store.stage_artifact_path(k, part);
            std::filesystem::create_directories(path.parent_path());
            write_file_atomic(path, to_jsonl(lines));
        }
    }

    for (const auto& img : images) {
        if (auto cp = store.load_checkpoint(img.image_id, 4))
            for (const auto& [a, s] : cp->get<FilterOutcome>().per_agent) summary.stage4[a] += s;
        if (cfg.iteration_2_enabled)
            if (auto cp = store.load_checkpoint(img.image_id, 7))
                for (const auto& [a, s] : cp->get<FilterOutcome>().per_agent) summary.stage7[a] += s;
    }
    std::filesystem::create_directories(store.reports_dir());
    write_file_atomic(store.reports_dir() / "filter_stats.json",
                      json{{"stage4", stats_json(summary.stage4)}, {"stage7", stats_json(summary.stage7)}}.dump(2) +
                          "\n");

    summary.exported = export_benchmark(collect_final_dataset(store, images, cfg.iteration_2_enabled), store.export_dir());
    write_file_atomic(store.reports_dir() / "run_summary.json", json(summary).dump(2) + "\n");
    log("exported " + std::to_string(summary.exported->total) + " samples");
    return summary;
}

}  // namespace forge
