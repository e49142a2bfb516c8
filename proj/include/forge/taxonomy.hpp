#pragma once

// LLM-judge classification of samples into a fixed label set, and per-agent
// mistake-rate distributions over those labels.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forge/evaluation.hpp"
#include "forge/gateway.hpp"
#include "forge/store.hpp"
#include "forge/types.hpp"

namespace forge {

inline constexpr const char* kUnclassified = "unclassified";

struct TaxonomyLabelDef {
    std::string label;
    std::string definition;
    std::string example;
};

struct TaxonomySpec {
    std::string name;
    std::vector<TaxonomyLabelDef> labels;

    std::vector<std::string> label_names() const;
    bool has_label(const std::string& label) const;
};

void to_json(json& j, const TaxonomySpec& s);
void from_json(const json& j, TaxonomySpec& s);

const TaxonomySpec& question_format_taxonomy();
const TaxonomySpec& error_category_taxonomy();
/// "question_format" | "error_category"; anything else throws ConfigError.
const TaxonomySpec& builtin_taxonomy(const std::string& name);
/// JSON file {name, labels:[{label, definition, example}]}.
TaxonomySpec load_taxonomy(const std::filesystem::path& path);

std::string judge_prompt(const TaxonomySpec& spec, const CRSample& sample);
std::string judge_reprompt(const TaxonomySpec& spec, const std::string& previous);

/// Canonical label for a judge reply, or nullopt when it is off-spec. Accepts
/// surrounding whitespace, quotes, markdown emphasis, trailing punctuation and
/// a "label:" prefix; the label itself must match exactly (case-insensitive).
std::optional<std::string> match_label(const TaxonomySpec& spec, const std::string& reply);

struct TaxonomyLabel {
    std::string sample_id;
    std::string taxonomy_name;
    std::string label;
    std::string judge_agent;
    std::vector<std::string> raw_judgment;  // one entry per attempt
    bool reprompted = false;
};

void to_json(json& j, const TaxonomyLabel& l);
void from_json(const json& j, TaxonomyLabel& l);

/// Text-only: the judge sees question and both options, never the image.
/// Off-spec output gets one reprompt, then the label is "unclassified".
TaxonomyLabel classify(Gateway& gw, const std::string& judge, const CRSample& sample, const TaxonomySpec& spec,
                       ExchangeSink* sink = nullptr);

/// Classifies every sample; output is in dataset order regardless of `workers`.
std::vector<TaxonomyLabel> classify_all(Gateway& gw, const std::string& judge, const Dataset& dataset,
                                        const TaxonomySpec& spec, int workers = 4, ExchangeSink* sink = nullptr);

struct LabelStats {
    std::string label;
    std::size_t n_samples = 0;
    std::size_t n_mistakes = 0;
    std::optional<double> mistake_rate;  // percent; null when n_samples == 0
};

struct MistakeDistribution {
    std::string agent_name;
    std::string taxonomy_name;
    std::vector<LabelStats> per_label;  // spec order, then "unclassified" if present
    std::size_t excluded_no_result = 0;  // labeled samples the agent has no determinate result for
};

void to_json(json& j, const MistakeDistribution& d);
void from_json(const json& j, MistakeDistribution& d);

MistakeDistribution mistake_rates(const TaxonomySpec& spec, const std::vector<TaxonomyLabel>& labels,
                                  const std::vector<EvalResult>& results, const std::string& agent);

struct ReportFiles {
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
    std::vector<std::filesystem::path> charts;
};

/// Writes distributions.json, distributions.csv and one bar chart PNG per
/// distribution named mistakes_<taxonomy>_<agent>.png.
ReportFiles emit_report(const std::vector<MistakeDistribution>& distributions, const std::filesystem::path& out_dir);

std::string chart_filename(const MistakeDistribution& d);

/// Renders a bar chart of mistake rates as an RGB PNG.
void render_chart_png(const MistakeDistribution& d, const std::filesystem::path& path);

}  // namespace forge
