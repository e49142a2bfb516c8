#include "forge/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "forge/error.hpp"

namespace forge {

Dataset load_dataset(const std::filesystem::path& run_dir, const std::optional<std::filesystem::path>& path) {
    auto p = path ? *path : RunStore(run_dir).export_dir() / "benchmark.jsonl";
    if (!std::filesystem::exists(p)) throw ConfigError("dataset not found: " + p.string());
    auto imported = import_benchmark(p);
    if (!imported.errors.empty()) {
        std::ostringstream msg;
        msg << p.string() << ": " << imported.errors.size() << " invalid line(s); first at line "
            << imported.errors.front().line << ": " << imported.errors.front().message;
        throw ConfigError(msg.str());
    }
    return imported.dataset;
}

Dataset filter_partitions(Dataset d, const std::vector<Partition>& keep) {
    if (keep.empty()) return d;
    std::erase_if(d, [&](const CRSample& s) { return std::find(keep.begin(), keep.end(), s.partition) == keep.end(); });
    return d;
}

namespace {

template <typename Job>
void run_pool(std::size_t n, int workers, Job job) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex mu;
    const int width = std::max(1, std::min<int>(workers, static_cast<int>(n)));
    {
        std::vector<std::jthread> pool;
        for (int w = 0; w < width; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        job(i);
                    } catch (...) {
                        std::lock_guard g(mu);
                        if (!fatal) fatal = std::current_exception();
                        next = n;
                    }
                }
            });
    }
    if (fatal) std::rethrow_exception(fatal);
}

std::vector<std::string> partitions_present(const Dataset& d) {
    std::set<std::string> s;
    for (const auto& x : d) s.insert(to_string(x.partition));
    return {s.begin(), s.end()};
}

}  // namespace

EvalSummary evaluate_dataset(const PipelineConfig& cfg, const std::filesystem::path& run_dir, const EvalOptions& opts,
                             Gateway* gateway) {
    auto dataset = filter_partitions(load_dataset(run_dir, opts.dataset), opts.partitions);
    std::unique_ptr<Gateway> owned;
    if (!gateway) {
        owned = std::make_unique<Gateway>(cfg.agents, gateway_options(cfg));
        gateway = owned.get();
    }
    std::vector<std::string> agents = opts.agents;
    if (agents.empty()) agents = gateway->agents_with_role(AgentRole::downstream);
    for (const auto& a : agents) gateway->profile(a);  // unknown agent -> ConfigError

    RunStore store(run_dir);
    const auto dir = store.eval_dir(opts.mode);
    std::filesystem::create_directories(dir);
    JsonlExchangeSink sink(dir / "exchanges.jsonl");
    write_file_atomic(sink.path(), "");

    if (opts.mode == EvalMode::perplexity)
        for (const auto& a : agents) {
            auto caps = gateway->probe_capabilities(a, ExchangeContext{"probe", "", "", &sink});
            if (!caps.supports_logprobs)
                throw CapabilityError("agent " + a + " does not return token logprobs; perplexity mode needs them");
        }

    // Images are loaded once and shared read-only.
    std::map<std::string, std::optional<ImagePayload>> payloads;
    std::map<std::string, ImageRecord> records;
    if (std::filesystem::exists(store.images_path()))
        for (const auto& r : store.load_images()) records[r.image_id] = r;
    for (const auto& s : dataset) {
        if (payloads.count(s.image_id)) continue;
        auto it = records.find(s.image_id);
        if (it == records.end()) {
            payloads[s.image_id] = std::nullopt;
            continue;
        }
        ImageRecord rec = it->second;
        try {
            payloads[s.image_id] = load_image(rec);
        } catch (const Error& e) {
            if (opts.log) opts.log("warning: image " + s.image_id + ": " + e.what());
            payloads[s.image_id] = std::nullopt;
        }
    }

    const auto items = make_mcqs(dataset, cfg.order_seed, cfg.order_mode);
    std::map<std::string, std::string> image_of;
    for (const auto& s : dataset) image_of[s.sample_id] = s.image_id;

    EvalSummary out;
    out.results.resize(items.size() * agents.size());
    run_pool(out.results.size(), opts.workers, [&](std::size_t k) {
        const auto& item = items[k / agents.size()];
        const auto& agent = agents[k % agents.size()];
        const auto& image_id = image_of.at(item.sample_id);
        ExchangeContext ctx{"eval-" + to_string(opts.mode), image_id, item.sample_id, &sink};
        const auto& img = payloads.at(image_id);
        out.results[k] = opts.mode == EvalMode::generate ? eval_generate(*gateway, agent, item, img, ctx)
                                                         : eval_perplexity(*gateway, agent, item, img, ctx);
    });
    for (const auto& r : out.results)
        if (!r.determinate) ++out.indeterminate;

    const auto parts = partition_index(dataset);
    const auto expected = partitions_present(dataset);
    json reports = json::array();
    for (const auto& a : agents) {
        std::vector<EvalResult> mine;
        for (const auto& r : out.results)
            if (r.agent_name == a) mine.push_back(r);
        auto rep = aggregate(mine, parts, expected);
        rep.agent_name = a;
        rep.mode = opts.mode;
        out.reports.push_back(rep);
        reports.push_back(rep);
    }
    out.results_path = dir / "results.jsonl";
    out.report_path = dir / "report.json";
    save_eval_results(out.results_path, out.results);
    write_file_atomic(out.report_path, json{{"mode", to_string(opts.mode)}, {"n_samples", dataset.size()},
                                            {"agents", reports}}
                                               .dump(2) +
                                           "\n");
    return out;
}

AnalyzeSummary analyze_run(const PipelineConfig& cfg, const std::filesystem::path& run_dir, const AnalyzeOptions& opts,
                           Gateway* gateway) {
    AnalyzeSummary out;
    out.spec = opts.taxonomy_file ? load_taxonomy(*opts.taxonomy_file) : builtin_taxonomy(opts.taxonomy);
    RunStore store(run_dir);
    auto results_path = store.eval_dir(opts.mode) / "results.jsonl";
    if (!std::filesystem::exists(results_path))
        throw ConfigError("no " + to_string(opts.mode) + " evaluation results in " + run_dir.string() +
                          "; run `forge eval` first");
    auto results = load_eval_results(results_path);
    auto dataset = load_dataset(run_dir);

    if (!opts.full_set) {
        VerdictLog log(store.verdicts_path());
        auto subset = verified_subset(dataset, log.latest_by_sample(), std::min(opts.target_n, dataset.size()),
                                      cfg.review_seed);
        if (!subset.complete)
            out.warnings.push_back("verified subset incomplete: " + std::to_string(subset.n_valid) + " of " +
                                   std::to_string(subset.target) + " valid samples");
        std::set<std::string> keep(subset.subset.begin(), subset.subset.end());
        std::erase_if(dataset, [&](const CRSample& s) { return !keep.count(s.sample_id); });
    }

    std::unique_ptr<Gateway> owned;
    if (!gateway) {
        owned = std::make_unique<Gateway>(cfg.agents, gateway_options(cfg));
        gateway = owned.get();
    }
    std::string judge;
    if (opts.judge) {
        judge = *opts.judge;
        gateway->profile(judge);
    } else {
        auto judges = gateway->agents_with_role(AgentRole::judge);
        if (judges.size() != 1) throw ConfigError("analyze needs exactly one judge agent (or --judge)");
        judge = judges.front();
    }

    const auto dir = store.analysis_dir(out.spec.name);
    std::filesystem::create_directories(dir);
    JsonlExchangeSink sink(dir / "exchanges.jsonl");
    write_file_atomic(sink.path(), "");
    out.labels = classify_all(*gateway, judge, dataset, out.spec, opts.workers, &sink);
    std::vector<json> rows(out.labels.begin(), out.labels.end());
    write_file_atomic(dir / "labels.jsonl", to_jsonl(rows));

    std::set<std::string> agents;
    for (const auto& r : results) agents.insert(r.agent_name);
    for (const auto& a : agents) out.distributions.push_back(mistake_rates(out.spec, out.labels, results, a));
    out.files = emit_report(out.distributions, dir);
    return out;
}

// ---------------------------------------------------------------------------

AccuracyTable build_accuracy_table(const std::vector<AccuracyRow>& rows) {
    AccuracyTable t;
    std::vector<double> base, acc, sub;
    for (const auto& r : rows) {
        AccuracyTable::Row row{r, std::nullopt};
        if (r.baseline && r.accuracy) {
            row.drop = compute_drop(*r.baseline, *r.accuracy, r.reported_drop);
            if (row.drop->discrepancy) t.notes.push_back(r.model + ": " + row.drop->note);
        }
        if (r.baseline) base.push_back(*r.baseline);
        if (r.accuracy) acc.push_back(*r.accuracy);
        if (r.subset) sub.push_back(*r.subset);
        t.rows.push_back(row);
    }
    if (!base.empty()) t.mean_baseline = mean_accuracy(base);
    if (!acc.empty()) t.mean_accuracy = mean_accuracy(acc);
    if (!sub.empty()) t.mean_subset = mean_accuracy(sub);
    if (t.mean_baseline && t.mean_accuracy) t.mean_drop = compute_drop(*t.mean_baseline, *t.mean_accuracy);
    return t;
}

std::string render_accuracy_table(const AccuracyTable& t) {
    auto cell = [](const std::optional<double>& v) { return v ? format1(*v) : std::string("-"); };
    std::size_t w = 5;
    for (const auto& r : t.rows) w = std::max(w, r.in.model.size());
    std::ostringstream out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-*s  %9s  %9s  %7s  %9s\n", static_cast<int>(w), "Model", "Baseline", "Accuracy",
                  "Drop", "Verified");
    out << buf;
    for (const auto& r : t.rows) {
        std::snprintf(buf, sizeof(buf), "%-*s  %9s  %9s  %7s  %9s\n", static_cast<int>(w), r.in.model.c_str(),
                      cell(r.in.baseline).c_str(), cell(r.in.accuracy).c_str(),
                      cell(r.drop ? std::optional<double>(r.drop->value) : std::nullopt).c_str(),
                      cell(r.in.subset).c_str());
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-*s  %9s  %9s  %7s  %9s\n", static_cast<int>(w), "Mean", cell(t.mean_baseline).c_str(),
                  cell(t.mean_accuracy).c_str(),
                  cell(t.mean_drop ? std::optional<double>(t.mean_drop->value) : std::nullopt).c_str(),
                  cell(t.mean_subset).c_str());
    out << buf;
    for (const auto& n : t.notes) out << "note: " << n << "\n";
    return out.str();
}

void to_json(json& j, const AccuracyTable& t) {
    auto opt = [](const std::optional<double>& v) { return v ? json(round1(*v)) : json(nullptr); };
    json rows = json::array();
    for (const auto& r : t.rows)
        rows.push_back(json{{"model", r.in.model},
                            {"baseline", opt(r.in.baseline)},
                            {"accuracy", opt(r.in.accuracy)},
                            {"drop", r.drop ? json(r.drop->value) : json(nullptr)},
                            {"verified_subset", opt(r.in.subset)}});
    j = json{{"rows", rows},
             {"mean", {{"baseline", opt(t.mean_baseline)},
                       {"accuracy", opt(t.mean_accuracy)},
                       {"drop", t.mean_drop ? json(t.mean_drop->value) : json(nullptr)},
                       {"verified_subset", opt(t.mean_subset)}}},
             {"notes", t.notes}};
}

RunReport report_run(const std::filesystem::path& run_dir, const ReportOptions& opts) {
    RunStore store(run_dir);
    auto report_path = store.eval_dir(opts.mode) / "report.json";
    if (!std::filesystem::exists(report_path))
        throw ConfigError("no " + to_string(opts.mode) + " evaluation report in " + run_dir.string() +
                          "; run `forge eval` first");
    json rep = json::parse(read_file(report_path));

    std::map<std::string, double> baseline;
    if (opts.baseline) {
        try {
            baseline = json::parse(read_file(*opts.baseline)).get<std::map<std::string, double>>();
        } catch (const json::exception& e) {
            throw ConfigError("baseline " + opts.baseline->string() + ": " + e.what());
        }
    }

    std::map<std::string, SubsetAgentStats> subset;
    if (std::filesystem::exists(store.verdicts_path())) {
        auto dataset = load_dataset(run_dir);
        auto results = load_eval_results(store.eval_dir(opts.mode) / "results.jsonl");
        VerdictLog log(store.verdicts_path());
        auto r = verified_subset(dataset, log.latest_by_sample(), std::min(opts.target_n, dataset.size()),
                                 opts.review_seed, results);
        subset = r.per_agent;
    }

    std::vector<AccuracyRow> rows;
    for (const auto& a : rep.at("agents")) {
        AccuracyRow row;
        row.model = a.at("agent_name").get<std::string>();
        if (!a.at("overall").is_null()) row.accuracy = a.at("overall").get<double>();
        if (auto it = baseline.find(row.model); it != baseline.end()) row.baseline = it->second;
        if (auto it = subset.find(row.model); it != subset.end()) row.subset = it->second.subset_accuracy;
        rows.push_back(row);
    }

    RunReport out;
    out.table = build_accuracy_table(rows);
    std::ostringstream text;
    text << "Accuracy (" << to_string(opts.mode) << ", %)\n" << render_accuracy_table(out.table);

    const auto analysis_root = run_dir / "analysis";
    if (std::filesystem::is_directory(analysis_root)) {
        std::vector<std::filesystem::path> dirs;
        for (const auto& e : std::filesystem::directory_iterator(analysis_root))
            if (std::filesystem::exists(e.path() / "distributions.json")) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) {
            auto dists = json::parse(read_file(d / "distributions.json")).get<std::vector<MistakeDistribution>>();
            for (const auto& dist : dists) {
                text << "\nMistake rate by " << dist.taxonomy_name << ", " << dist.agent_name << " (%)\n";
                for (const auto& s : dist.per_label) {
                    char buf[128];
                    std::snprintf(buf, sizeof(buf), "  %-18s %6s  (%zu/%zu)\n", s.label.c_str(),
                                  s.mistake_rate ? format1(*s.mistake_rate).c_str() : "-", s.n_mistakes, s.n_samples);
                    text << buf;
                }
                if (dist.excluded_no_result)
                    text << "  excluded (labeled, no result): " << dist.excluded_no_result << "\n";
                out.distributions.push_back(dist);
            }
        }
    }
    out.text = text.str();
    std::filesystem::create_directories(store.reports_dir());
    write_file_atomic(store.reports_dir() / "report.json",
                      json{{"mode", to_string(opts.mode)}, {"table", out.table}, {"distributions", out.distributions}}
                              .dump(2) +
                          "\n");
    write_file_atomic(store.reports_dir() / "report.txt", out.text);
    return out;
}

}  // namespace forge
