#pragma once

// Run directory layout:
//
//   <run>/manifest.json                  immutable: run id, config snapshot, seeds
//   <run>/events.jsonl                   append-only checkpoint / failure events
//   <run>/images.jsonl                   ingested image records (with bytes_hash)
//   <run>/checkpoints/<image>/stageN.json
//   <run>/checkpoints/<image>/failed.json
//   <run>/exchanges/<image>.jsonl        agent exchanges for one image
//   <run>/exchanges/_run.jsonl           run-level exchanges (capability probes)
//   <run>/stages/stageN/<partition>.jsonl
//   <run>/export/benchmark.jsonl, <run>/export/stats.json
//   <run>/reports/filter_stats.json, <run>/reports/run_summary.json
//   <run>/eval/<mode>/results.jsonl, <run>/eval/<mode>/report.json
//   <run>/analysis/<taxonomy>/labels.jsonl, ...
//   <run>/verdicts.jsonl, <run>/sessions.jsonl

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forge/evaluation.hpp"
#include "forge/types.hpp"
#include "forge/util.hpp"

namespace forge {

constexpr int kStageCount = 7;
std::string stage_name(int stage);  // 1 -> "stage1"
int stage_index(const std::string& name);  // "stage3" -> 3, anything else -> 0

struct RunManifest {
    std::string format = "forge.run/1";
    std::string run_id;
    std::string created_at;
    json config;
    json seeds;
};

void to_json(json& j, const RunManifest& m);
void from_json(const json& j, RunManifest& m);

struct ImageResumeState {
    int last_stage = 0;  // highest stage with a valid contiguous checkpoint chain
    bool failed = false;
};

struct ResumeState {
    std::optional<RunManifest> manifest;
    std::map<std::string, ImageResumeState> images;
    std::vector<std::string> warnings;
};

/// Exclusive advisory lock on a run directory (one writer per run).
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    int fd_ = -1;
};

class RunStore {
public:
    explicit RunStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path manifest_path() const { return root_ / "manifest.json"; }
    std::filesystem::path events_path() const { return root_ / "events.jsonl"; }
    std::filesystem::path images_path() const { return root_ / "images.jsonl"; }
    std::filesystem::path checkpoint_path(const std::string& image_id, int stage) const;
    std::filesystem::path failure_path(const std::string& image_id) const;
    std::filesystem::path exchanges_path(const std::string& image_id) const;
    std::filesystem::path run_exchanges_path() const { return root_ / "exchanges" / "_run.jsonl"; }
    std::filesystem::path stage_artifact_path(int stage, const std::string& partition) const;
    std::filesystem::path export_dir() const { return root_ / "export"; }
    std::filesystem::path reports_dir() const { return root_ / "reports"; }
    std::filesystem::path eval_dir(EvalMode mode) const { return root_ / "eval" / to_string(mode); }
    std::filesystem::path analysis_dir(const std::string& taxonomy) const { return root_ / "analysis" / taxonomy; }
    std::filesystem::path verdicts_path() const { return root_ / "verdicts.jsonl"; }
    std::filesystem::path sessions_path() const { return root_ / "sessions.jsonl"; }

    /// Creates the manifest, or checks that an existing one has the same config snapshot.
    RunManifest init_run(const RunManifest& manifest);
    std::optional<RunManifest> load_manifest() const;

    /// Atomic rename-into-place; payload is wrapped with a checksum.
    void checkpoint(const std::string& image_id, int stage, const json& payload);
    /// nullopt when missing or corrupt.
    std::optional<json> load_checkpoint(const std::string& image_id, int stage) const;
    void record_failure(const std::string& image_id, int stage, const std::string& error);
    void clear_failure(const std::string& image_id);

    /// Reconstructs per-image progress. A corrupt checkpoint falls back to the
    /// previous stage with a warning.
    ResumeState resume(const std::vector<std::string>& image_ids) const;

    void save_images(const std::vector<ImageRecord>& images);
    std::vector<ImageRecord> load_images() const;

    void append_event(const json& event);

private:
    std::filesystem::path root_;
    mutable std::mutex events_mu_;
};

// ---------------------------------------------------------------------------
// benchmark export

using Dataset = std::vector<CRSample>;

struct BenchmarkExport {
    std::filesystem::path records_path;
    std::filesystem::path stats_path;
    std::map<std::string, std::size_t> per_partition;
    std::size_t total = 0;
};

/// Export record: {sample_id, image_id, partition, iteration, question, positive, negative, provenance}.
json benchmark_record(const CRSample& s);
CRSample parse_benchmark_record(const json& j);

/// Writes benchmark.jsonl sorted by sample_id plus stats.json with per-partition counts.
BenchmarkExport export_benchmark(const Dataset& samples, const std::filesystem::path& out_dir);

struct ImportError {
    std::size_t line = 0;
    std::string message;
};

struct ImportResult {
    Dataset dataset;
    std::vector<ImportError> errors;
};

/// Loads valid lines; schema violations are reported per line.
ImportResult import_benchmark(const std::filesystem::path& records_path);

/// Re-derives the stats sidecar from the records and compares it with the stored one.
bool verify_export_counts(const std::filesystem::path& out_dir);

std::map<std::string, std::string> partition_index(const Dataset& d);

// ---------------------------------------------------------------------------
// verdicts and the verified subset

enum class Verdict { valid, invalid, flagged };
std::string to_string(Verdict v);
Verdict parse_verdict(const std::string& s);

struct ReviewVerdict {
    std::string sample_id;
    std::string reviewer_id;
    Verdict verdict = Verdict::valid;
    std::string note;
    std::string timestamp;  // ISO-8601 UTC
};

void to_json(json& j, const ReviewVerdict& v);
void from_json(const json& j, ReviewVerdict& v);

/// Append-only verdict history. Latest verdict per (sample, reviewer) wins,
/// ordered by timestamp then by append order.
class VerdictLog {
public:
    explicit VerdictLog(std::filesystem::path path) : path_(std::move(path)) {}

    void record(const ReviewVerdict& v);
    std::vector<ReviewVerdict> history() const;
    std::map<std::pair<std::string, std::string>, ReviewVerdict> latest_by_reviewer() const;
    /// Latest verdict per sample across reviewers.
    std::map<std::string, ReviewVerdict> latest_by_sample() const;

    static std::map<std::string, ReviewVerdict> fold_latest(const std::vector<ReviewVerdict>& history);

private:
    std::filesystem::path path_;
    mutable std::mutex mu_;
};

/// Seeded Fisher-Yates over the sorted ids using mt19937_64 with rejection sampling,
/// so the order is identical on every platform.
std::vector<std::string> serving_order(std::vector<std::string> sample_ids, std::uint64_t seed);

struct SubsetAgentStats {
    std::optional<double> subset_accuracy;
    std::optional<double> full_accuracy;
    std::optional<double> delta;
};

struct SubsetResult {
    std::vector<std::string> order;   // full serving order
    std::vector<std::string> subset;  // samples with a valid verdict, in serving order
    std::size_t served = 0;           // samples consumed when the walk stopped
    bool complete = false;
    std::size_t target = 0;
    std::size_t n_valid = 0, n_invalid = 0, n_flagged = 0;
    std::map<std::string, SubsetAgentStats> per_agent;
};

void to_json(json& j, const SubsetResult& r);

/// Walks the seeded order consuming verdicts until `target_n` valid ones accumulate
/// (or a sample without a verdict is reached). Per-agent accuracy on the subset and
/// on the full dataset uses the unweighted partition mean.
SubsetResult verified_subset(const Dataset& dataset, const std::map<std::string, ReviewVerdict>& latest,
                             std::size_t target_n, std::uint64_t seed, const std::vector<EvalResult>& results = {});

std::vector<EvalResult> load_eval_results(const std::filesystem::path& path);
void save_eval_results(const std::filesystem::path& path, std::vector<EvalResult> results);

}  // namespace forge
