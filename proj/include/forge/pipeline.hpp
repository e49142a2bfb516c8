#pragma once

// Seven-stage hard CR question generation, one image at a time:
//
//   1 strong agent describes the image
//   2 every downstream agent describes the image
//   3 strong agent writes iteration-1 questions from all descriptions
//   4 downstream agents answer each (question, negative) as A/B; keep samples
//     at least one agent gets wrong
//   5 downstream agents answer surviving questions open-ended
//   6 strong agent writes harder iteration-2 questions given iteration 1 and
//     the open answers
//   7 same evaluation + filter as stage 4; kept samples are the benchmark

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/evaluation.hpp"
#include "forge/gateway.hpp"
#include "forge/store.hpp"
#include "forge/types.hpp"

namespace forge {

struct PipelineConfig {
    std::string run_id = "run";
    std::vector<AgentProfile> agents;
    std::vector<Partition> partitions;  // empty: every partition in the image manifest
    std::filesystem::path images;       // image manifest (JSONL)
    int n_questions = 10;
    int n_negatives = 3;
    int min_questions = 1;
    std::int64_t order_seed = 0;
    std::uint64_t review_seed = 0;
    RetryPolicy retry;
    bool iteration_2_enabled = true;
    OrderMode order_mode = OrderMode::balanced;
    int workers = 4;
    std::size_t max_text_chars = 200000;
    std::optional<int> image_max_dimension;  // recorded for remote agents; not applied locally
    std::filesystem::path base_dir;          // relative paths in the config resolve here

    void validate() const;
};

void to_json(json& j, const PipelineConfig& c);
/// `base_dir` resolves relative paths (images, mock scripts).
PipelineConfig parse_config(const json& j, const std::filesystem::path& base_dir);
PipelineConfig load_config(const std::filesystem::path& path);

GatewayOptions gateway_options(const PipelineConfig& cfg);

/// Reads {image_id, partition, source_uri} lines; relative URIs resolve against the manifest's directory.
std::vector<ImageRecord> load_image_manifest(const std::filesystem::path& path);
/// Loads bytes (or a URL reference) and fills bytes_hash.
ImagePayload load_image(ImageRecord& record);

// ---------------------------------------------------------------------------
// structured output parsing
//
//   1.
//   Q: <question>
//   A+: <correct answer>
//   A-1: <negative>
//   A-2: <negative>
//
// A block starts at a line "<n>." or "<n>)" (text after the marker is parsed
// as a field line). Unlabeled lines directly after a field continue it; text
// after a blank line ends the block. Blocks that break an invariant go to the
// quarantine lane with a reason.

struct QuarantineRecord {
    std::string image_id;
    std::string stage;
    int block = 0;
    int line_start = 0;
    int line_end = 0;
    std::string reason;
    std::string raw;
};

void to_json(json& j, const QuarantineRecord& q);
void from_json(const json& j, QuarantineRecord& q);

struct ParseResult {
    std::vector<CRQuestion> questions;
    std::vector<QuarantineRecord> quarantine;
};

std::string make_question_id(const std::string& image_id, int iteration, int block);

ParseResult parse_cr_questions(const std::string& raw, const std::string& image_id, int iteration,
                               const std::string& stage);

/// Re-parses `raw` and returns the sample that `prov` points at.
std::optional<CRSample> resolve_provenance(const std::string& raw, const Provenance& prov, Partition partition);

// ---------------------------------------------------------------------------
// prompts

std::string describe_prompt();
std::string question_prompt(const Description& strong, const std::vector<Description>& downstream, int n_questions,
                            int n_negatives);
std::string open_answer_prompt(const std::string& question);
std::string harder_question_prompt(const Description& strong, const std::vector<CRQuestion>& iteration1,
                                   const std::vector<OpenAnswer>& answers, int n_questions, int n_negatives);

// ---------------------------------------------------------------------------
// filtering

enum class SampleFate { kept, discarded, indeterminate };
std::string to_string(SampleFate f);

struct AgentFilterStats {
    std::size_t pre_n = 0, pre_correct = 0;
    std::size_t post_n = 0, post_correct = 0;

    std::optional<double> pre_accuracy() const;
    std::optional<double> post_accuracy() const;
    AgentFilterStats& operator+=(const AgentFilterStats& o);
};

struct FilterOutcome {
    std::vector<EvalResult> results;
    std::map<std::string, SampleFate> fate;  // by sample_id
    std::vector<std::string> kept, discarded, indeterminate;
    std::map<std::string, AgentFilterStats> per_agent;
};

void to_json(json& j, const FilterOutcome& f);
void from_json(const json& j, FilterOutcome& f);

/// The filter rule over recorded verdicts: a sample is kept iff at least one
/// determinate verdict is incorrect, discarded iff it has determinate verdicts
/// and all are correct, indeterminate if it has none. Per-agent accuracies are
/// over determinate verdicts, before (all determinate samples) and after (kept).
FilterOutcome apply_filter(const std::vector<std::string>& sample_ids, const std::vector<EvalResult>& results);

// ---------------------------------------------------------------------------
// stages

struct ImageContext {
    ImageRecord record;
    std::optional<ImagePayload> payload;
    ExchangeSink* sink = nullptr;
};

struct AgentFailure {
    std::string agent;
    std::string item_id;
    std::string error;
};

void to_json(json& j, const AgentFailure& f);
void from_json(const json& j, AgentFailure& f);

struct DescriptionsResult {
    std::vector<Description> descriptions;
    std::vector<AgentFailure> failures;
};

struct QuestionsResult {
    std::string raw_output;
    std::vector<CRQuestion> questions;
    std::vector<CRSample> samples;
    std::vector<QuarantineRecord> quarantine;
};

struct OpenAnswersResult {
    std::vector<OpenAnswer> answers;
    std::vector<AgentFailure> failures;
    std::vector<std::string> excluded_questions;
};

void to_json(json& j, const DescriptionsResult& r);
void from_json(const json& j, DescriptionsResult& r);
void to_json(json& j, const QuestionsResult& r);
void from_json(const json& j, QuestionsResult& r);
void to_json(json& j, const OpenAnswersResult& r);
void from_json(const json& j, OpenAnswersResult& r);

class Pipeline {
public:
    Pipeline(Gateway& gateway, PipelineConfig config);

    const PipelineConfig& config() const { return config_; }
    const std::string& strong_agent() const { return strong_; }
    const std::vector<std::string>& downstream_agents() const { return downstream_; }

    Description stage1_describe(const ImageContext& img);
    DescriptionsResult stage2_describe_all(const ImageContext& img);
    QuestionsResult stage3_generate(const ImageContext& img, const Description& stage1,
                                    const std::vector<Description>& stage2);
    FilterOutcome stage4_evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples);
    OpenAnswersResult stage5_open_answers(const ImageContext& img, const std::vector<CRQuestion>& questions,
                                          const FilterOutcome& stage4);
    QuestionsResult stage6_generate(const ImageContext& img, const Description& stage1,
                                    const std::vector<CRQuestion>& iteration1, const std::vector<OpenAnswer>& answers);
    FilterOutcome stage7_evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples);

private:
    FilterOutcome evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples,
                                  const std::string& stage);
    QuestionsResult generate_questions(const ImageContext& img, const std::string& prompt, int iteration,
                                       const std::string& stage);
    ExchangeContext context(const ImageContext& img, const std::string& stage, const std::string& item = {}) const;

    Gateway& gw_;
    PipelineConfig config_;
    std::string strong_;
    std::vector<std::string> downstream_;
};

// ---------------------------------------------------------------------------
// orchestration

struct RunOptions {
    std::optional<int> workers;             // overrides config
    std::optional<int> halt_after_stage;    // stop every image after this checkpoint (simulated kill)
    std::function<void(const std::string&)> log;
};

struct ImageOutcome {
    std::string image_id;
    std::string partition;
    int last_stage = 0;
    bool failed = false;
    std::string failed_stage;
    std::string error;
    std::size_t kept = 0;
};

struct RunSummary {
    std::string run_id;
    std::vector<ImageOutcome> images;
    bool halted = false;
    std::optional<BenchmarkExport> exported;
    std::map<std::string, AgentFilterStats> stage4, stage7;
    std::vector<std::string> warnings;
};

void to_json(json& j, const RunSummary& s);

/// Per-stage plan printed by --dry-run; makes no network calls.
std::vector<std::string> stage_plan(const PipelineConfig& cfg, const std::vector<ImageRecord>& images);

/// Runs (or resumes) every image through all stages with a checkpoint after each,
/// then writes stage artifacts and the benchmark export. Per-image failures are
/// recorded and never abort the run.
RunSummary run_pipeline(const PipelineConfig& cfg, const std::vector<ImageRecord>& images,
                        const std::filesystem::path& run_dir, const RunOptions& options = {},
                        Gateway* gateway = nullptr);

/// Final dataset of a finished run: stage-7 kept samples (stage-4 when iteration 2 is off).
Dataset collect_final_dataset(const RunStore& store, const std::vector<ImageRecord>& images, bool iteration_2_enabled);

}  // namespace forge
