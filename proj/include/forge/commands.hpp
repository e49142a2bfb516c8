#pragma once

// Run-level operations behind the CLI subcommands: dataset evaluation,
// taxonomy analysis and the accuracy / drop report.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "forge/evaluation.hpp"
#include "forge/pipeline.hpp"
#include "forge/store.hpp"
#include "forge/taxonomy.hpp"

namespace forge {

/// The run's exported benchmark, or an explicit JSONL file in the same schema.
Dataset load_dataset(const std::filesystem::path& run_dir, const std::optional<std::filesystem::path>& path = {});

Dataset filter_partitions(Dataset d, const std::vector<Partition>& keep);

struct EvalOptions {
    EvalMode mode = EvalMode::generate;
    std::vector<std::string> agents;  // empty: every downstream agent
    std::vector<Partition> partitions;
    std::optional<std::filesystem::path> dataset;
    int workers = 4;
    std::function<void(const std::string&)> log;
};

struct EvalSummary {
    std::vector<EvalResult> results;
    std::vector<AccuracyReport> reports;
    std::filesystem::path results_path;
    std::filesystem::path report_path;
    std::size_t indeterminate = 0;
};

/// Evaluates agents on the dataset and writes eval/<mode>/results.jsonl and report.json.
/// Perplexity mode checks logprob support for every agent before any evaluation call.
EvalSummary evaluate_dataset(const PipelineConfig& cfg, const std::filesystem::path& run_dir, const EvalOptions& opts,
                             Gateway* gateway = nullptr);

struct AnalyzeOptions {
    std::string taxonomy = "error_category";
    std::optional<std::filesystem::path> taxonomy_file;
    std::optional<std::string> judge;  // default: the single judge agent
    bool full_set = false;             // default: the verified subset
    std::size_t target_n = 1000;
    EvalMode mode = EvalMode::generate;
    int workers = 4;
};

struct AnalyzeSummary {
    TaxonomySpec spec;
    std::vector<TaxonomyLabel> labels;
    std::vector<MistakeDistribution> distributions;
    ReportFiles files;
    std::vector<std::string> warnings;
};

/// Labels the samples with the judge, then writes analysis/<taxonomy>/ (labels.jsonl,
/// distributions.json/csv, charts). Needs eval/<mode>/results.jsonl.
AnalyzeSummary analyze_run(const PipelineConfig& cfg, const std::filesystem::path& run_dir, const AnalyzeOptions& opts,
                           Gateway* gateway = nullptr);

// ---------------------------------------------------------------------------
// accuracy / drop table

struct AccuracyRow {
    std::string model;
    std::optional<double> baseline;  // accuracy on the source benchmark
    std::optional<double> accuracy;  // accuracy on the generated benchmark
    std::optional<double> subset;    // accuracy on the verified subset
    std::optional<double> reported_drop;
};

struct AccuracyTable {
    struct Row {
        AccuracyRow in;
        std::optional<Drop> drop;
    };
    std::vector<Row> rows;
    std::optional<double> mean_baseline, mean_accuracy, mean_subset;
    std::optional<Drop> mean_drop;  // mean accuracy minus mean baseline
    std::vector<std::string> notes;
};

/// Means are plain averages over rows that have the column; drops are accuracy - baseline.
AccuracyTable build_accuracy_table(const std::vector<AccuracyRow>& rows);
std::string render_accuracy_table(const AccuracyTable& t);
void to_json(json& j, const AccuracyTable& t);

struct ReportOptions {
    std::optional<std::filesystem::path> baseline;  // JSON {agent: accuracy}
    EvalMode mode = EvalMode::generate;
    std::size_t target_n = 1000;
    std::uint64_t review_seed = 0;
};

struct RunReport {
    AccuracyTable table;
    std::vector<MistakeDistribution> distributions;
    std::string text;
};

/// Builds the table from eval/<mode>/report.json (plus subset accuracy from verdicts)
/// and collects any analysis distributions; writes reports/report.json and report.txt.
RunReport report_run(const std::filesystem::path& run_dir, const ReportOptions& opts);

}  // namespace forge
