#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "forge/commands.hpp"
#include "forge/error.hpp"
#include "forge/pipeline.hpp"
#include "forge/review_service.hpp"

using namespace forge;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
    std::string config;
    std::string run_dir;
    std::optional<int> workers;
    std::optional<std::int64_t> seed;
    std::vector<std::string> partitions;
};

std::vector<Partition> parse_partitions(const std::vector<std::string>& names) {
    std::vector<Partition> out;
    for (const auto& n : names) {
        try {
            out.push_back(parse_partition(n));
        } catch (const PreconditionError& e) {
            throw ConfigError(e.what());
        }
    }
    return out;
}

// Flags override the file; the merged result is what the manifest records.
PipelineConfig load_merged(const Common& c) {
    if (c.config.empty()) throw ConfigError("--config is required");
    auto cfg = load_config(c.config);
    if (c.workers) cfg.workers = *c.workers;
    if (c.seed) cfg.order_seed = *c.seed;
    if (!c.partitions.empty()) cfg.partitions = parse_partitions(c.partitions);
    return cfg;
}

std::filesystem::path run_dir_for(const Common& c, const PipelineConfig* cfg) {
    if (!c.run_dir.empty()) return c.run_dir;
    if (cfg) return std::filesystem::path("runs") / cfg->run_id;
    throw ConfigError("--run-dir is required");
}

std::uint64_t manifest_review_seed(const std::filesystem::path& run_dir) {
    RunStore store(run_dir);
    if (auto m = store.load_manifest(); m && m->seeds.contains("review"))
        return m->seeds["review"].get<std::uint64_t>();
    return 0;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

int cmd_run(const Common& c, bool dry_run, std::optional<int> halt_after) {
    auto cfg = load_merged(c);
    cfg.validate();
    auto images = load_image_manifest(cfg.images.is_absolute() ? cfg.images : cfg.base_dir / cfg.images);
    if (dry_run) {
        std::vector<ImageRecord> selected;
        for (const auto& img : images)
            if (cfg.partitions.empty() ||
                std::find(cfg.partitions.begin(), cfg.partitions.end(), img.partition) != cfg.partitions.end())
                selected.push_back(img);
        for (const auto& line : stage_plan(cfg, selected)) std::cout << line << "\n";
        return 0;
    }
    RunOptions opts;
    opts.workers = cfg.workers;
    opts.halt_after_stage = halt_after;
    opts.log = log_line;
    auto dir = run_dir_for(c, &cfg);
    auto summary = run_pipeline(cfg, images, dir, opts);

    std::size_t failed = 0;
    for (const auto& o : summary.images)
        if (o.failed) {
            ++failed;
            std::cout << "failed " << o.image_id << " at " << o.failed_stage << ": " << o.error << "\n";
        }
    for (const auto& w : summary.warnings) std::cout << "warning: " << w << "\n";
    std::cout << "images: " << summary.images.size() << ", failed: " << failed << "\n";
    if (summary.halted) std::cout << "halted after stage " << *halt_after << "\n";
    if (summary.exported) {
        std::cout << "exported " << summary.exported->total << " samples to " << summary.exported->records_path.string()
                  << "\n";
        for (const auto& [p, n] : summary.exported->per_partition) std::cout << "  " << p << ": " << n << "\n";
    }
    return 0;
}

int cmd_eval(const Common& c, const std::string& mode, const std::vector<std::string>& agents,
             const std::string& dataset) {
    auto cfg = load_merged(c);
    cfg.validate();
    EvalOptions opts;
    opts.mode = parse_eval_mode(mode);
    opts.agents = agents;
    opts.partitions = cfg.partitions;
    opts.workers = cfg.workers;
    opts.log = log_line;
    if (!dataset.empty()) opts.dataset = dataset;
    auto dir = run_dir_for(c, &cfg);
    auto s = evaluate_dataset(cfg, dir, opts);
    for (const auto& r : s.reports) {
        std::cout << r.agent_name << " (" << to_string(r.mode) << "): overall "
                  << (r.overall ? format1(*r.overall) : std::string("-"));
        for (const auto& [p, a] : r.per_partition)
            std::cout << "  " << p << " " << format1(a.accuracy) << " (" << a.correct << "/" << a.n << ")";
        std::cout << "\n";
        for (const auto& w : r.warnings) std::cout << "  warning: " << w << "\n";
    }
    if (s.indeterminate) std::cout << s.indeterminate << " indeterminate result(s) excluded from accuracy\n";
    std::cout << "results: " << s.results_path.string() << "\n";
    return 0;
}

int cmd_analyze(const Common& c, const AnalyzeOptions& base) {
    auto cfg = load_merged(c);
    cfg.validate();
    auto opts = base;
    opts.workers = cfg.workers;
    auto dir = run_dir_for(c, &cfg);
    auto s = analyze_run(cfg, dir, opts);
    for (const auto& w : s.warnings) std::cout << "warning: " << w << "\n";
    std::size_t unclassified = 0;
    for (const auto& l : s.labels)
        if (l.label == kUnclassified) ++unclassified;
    std::cout << "labeled " << s.labels.size() << " samples (" << unclassified << " unclassified) with "
              << s.spec.name << "\n";
    std::cout << "report: " << s.files.json_path.string() << "\n";
    return 0;
}

int cmd_export(const Common& c, const std::string& out) {
    auto dir = run_dir_for(c, nullptr);
    RunStore store(dir);
    auto manifest = store.load_manifest();
    if (!manifest) throw ConfigError("not a run directory: " + dir.string());
    const bool iter2 = manifest->config.value("iteration_2_enabled", true);
    auto data = collect_final_dataset(store, store.load_images(), iter2);
    auto e = export_benchmark(data, out.empty() ? store.export_dir() : std::filesystem::path(out));
    std::cout << "exported " << e.total << " samples to " << e.records_path.string() << "\n";
    return 0;
}

int cmd_review(const Common& c, const std::string& serve, std::size_t target_n, std::optional<std::uint64_t> seed,
               const std::string& token_env, bool blind, const std::string& static_dir) {
    auto dir = run_dir_for(c, nullptr);
    ReviewOptions opts;
    opts.order_seed = seed ? *seed : manifest_review_seed(dir);
    opts.target_n = target_n;
    opts.blind = blind;
    if (!token_env.empty()) {
        const char* v = std::getenv(token_env.c_str());
        if (!v || !*v) throw ConfigError("environment variable " + token_env + " is not set");
        opts.token = v;
    }
    if (!static_dir.empty()) opts.static_dir = static_dir;
    ReviewService svc(dir, opts);

    auto colon = serve.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--serve expects host:port");
    const std::string host = serve.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(serve.substr(colon + 1));
    } catch (const std::exception&) {
        throw ConfigError("--serve expects host:port");
    }
    std::cout << "reviewing " << svc.order().size() << " samples on http://" << serve << "\n" << std::flush;
    serve_review(svc, host, port);
    return 0;
}

int cmd_report(const Common& c, const std::string& mode, const std::string& baseline, std::size_t target_n,
               std::optional<std::uint64_t> seed) {
    auto dir = run_dir_for(c, nullptr);
    ReportOptions opts;
    opts.mode = parse_eval_mode(mode);
    if (!baseline.empty()) opts.baseline = baseline;
    opts.target_n = target_n;
    opts.review_seed = seed ? *seed : manifest_review_seed(dir);
    auto r = report_run(dir, opts);
    std::cout << r.text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"forge: hard compositional-reasoning QA generation and evaluation"};
    app.require_subcommand(1);

    Common c;
    auto add_common = [&](CLI::App* sub, bool config) {
        if (config) sub->add_option("--config", c.config, "run config (JSON)");
        sub->add_option("--run-dir", c.run_dir, "run directory");
    };
    auto add_pipeline_flags = [&](CLI::App* sub) {
        sub->add_option("--workers", c.workers, "worker pool width");
        sub->add_option("--seed", c.seed, "option-order seed");
        sub->add_option("--partition", c.partitions, "restrict to partition(s)");
    };

    auto* run = app.add_subcommand("run", "run or resume the generation pipeline");
    add_common(run, true);
    add_pipeline_flags(run);
    bool dry_run = false;
    std::optional<int> halt_after;
    run->add_flag("--dry-run", dry_run, "print the stage plan without calling any agent");
    run->add_option("--halt-after", halt_after, "stop every image after this stage's checkpoint")
        ->check(CLI::Range(1, kStageCount));

    auto* eval = app.add_subcommand("eval", "evaluate agents on the benchmark");
    add_common(eval, true);
    add_pipeline_flags(eval);
    std::string mode = "generate";
    std::vector<std::string> agents;
    std::string dataset;
    eval->add_option("--mode", mode, "generate | perplexity")->check(CLI::IsMember({"generate", "perplexity"}));
    eval->add_option("--agent", agents, "agents to evaluate (default: downstream agents)");
    eval->add_option("--dataset", dataset, "benchmark JSONL to evaluate instead of the run export");

    auto* analyze = app.add_subcommand("analyze", "classify samples by taxonomy and compute mistake rates");
    add_common(analyze, true);
    add_pipeline_flags(analyze);
    AnalyzeOptions aopts;
    std::string taxonomy_file, judge, amode = "generate";
    analyze->add_option("--taxonomy", aopts.taxonomy, "question_format | error_category");
    analyze->add_option("--taxonomy-file", taxonomy_file, "custom taxonomy (JSON)");
    analyze->add_option("--judge", judge, "judge agent name");
    analyze->add_flag("--full-set", aopts.full_set, "use every sample instead of the verified subset");
    analyze->add_option("--target-n", aopts.target_n, "verified subset size");
    analyze->add_option("--mode", amode, "evaluation results to analyze")->check(CLI::IsMember({"generate", "perplexity"}));

    auto* exp = app.add_subcommand("export", "write the benchmark export of a run");
    add_common(exp, false);
    std::string out;
    exp->add_option("--out", out, "output directory (default: <run>/export)");

    auto* review = app.add_subcommand("review", "serve the manual verification API");
    add_common(review, false);
    std::string serve = "127.0.0.1:8080", token_env, static_dir;
    std::size_t target_n = 1000;
    std::optional<std::uint64_t> review_seed;
    bool blind = false;
    review->add_option("--serve", serve, "host:port");
    review->add_option("--target-n", target_n, "verified subset size");
    review->add_option("--seed", review_seed, "serving-order seed (default: the run's review seed)");
    review->add_option("--token-env", token_env, "environment variable holding the shared bearer token");
    review->add_flag("--blind", blind, "hide which option is correct");
    review->add_option("--static", static_dir, "directory with the review UI bundle");

    auto* report = app.add_subcommand("report", "accuracy / drop table and mistake-rate distributions");
    add_common(report, false);
    std::string rmode = "generate", baseline;
    std::size_t rtarget = 1000;
    std::optional<std::uint64_t> rseed;
    report->add_option("--mode", rmode, "generate | perplexity")->check(CLI::IsMember({"generate", "perplexity"}));
    report->add_option("--baseline", baseline, "JSON {agent: baseline accuracy}");
    report->add_option("--target-n", rtarget, "verified subset size");
    report->add_option("--seed", rseed, "serving-order seed (default: the run's review seed)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(c, dry_run, halt_after);
        if (eval->parsed()) return cmd_eval(c, mode, agents, dataset);
        if (analyze->parsed()) {
            if (!taxonomy_file.empty()) aopts.taxonomy_file = taxonomy_file;
            if (!judge.empty()) aopts.judge = judge;
            aopts.mode = parse_eval_mode(amode);
            return cmd_analyze(c, aopts);
        }
        if (exp->parsed()) return cmd_export(c, out);
        if (review->parsed()) return cmd_review(c, serve, target_n, review_seed, token_env, blind, static_dir);
        if (report->parsed()) return cmd_report(c, rmode, baseline, rtarget, rseed);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CapabilityError& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
