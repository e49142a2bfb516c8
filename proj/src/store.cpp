#include "forge/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <random>
#include <set>

#include "forge/error.hpp"

namespace forge {

std::string stage_name(int stage) { return "stage" + std::to_string(stage); }

int stage_index(const std::string& name) {
    if (name.size() == 6 && name.rfind("stage", 0) == 0 && name[5] >= '1' && name[5] <= '7') return name[5] - '0';
    return 0;
}

void to_json(json& j, const RunManifest& m) {
    j = json{{"format", m.format},
             {"run_id", m.run_id},
             {"created_at", m.created_at},
             {"config", m.config},
             {"seeds", m.seeds}};
}

void from_json(const json& j, RunManifest& m) {
    m.format = j.value("format", "forge.run/1");
    m.run_id = j.at("run_id").get<std::string>();
    m.created_at = j.value("created_at", "");
    m.config = j.value("config", json::object());
    m.seeds = j.value("seeds", json::object());
}

// ---------------------------------------------------------------------------

RunLock::RunLock(const std::filesystem::path& run_dir) {
    std::filesystem::create_directories(run_dir);
    auto path = run_dir / ".lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw StorageError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw StorageError("run directory " + run_dir.string() + " is locked by another writer");
    }
}

RunLock::~RunLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

// ---------------------------------------------------------------------------

RunStore::RunStore(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path RunStore::checkpoint_path(const std::string& image_id, int stage) const {
    return root_ / "checkpoints" / image_id / (stage_name(stage) + ".json");
}

std::filesystem::path RunStore::failure_path(const std::string& image_id) const {
    return root_ / "checkpoints" / image_id / "failed.json";
}

std::filesystem::path RunStore::exchanges_path(const std::string& image_id) const {
    return root_ / "exchanges" / (image_id + ".jsonl");
}

std::filesystem::path RunStore::stage_artifact_path(int stage, const std::string& partition) const {
    return root_ / "stages" / stage_name(stage) / (partition + ".jsonl");
}

RunManifest RunStore::init_run(const RunManifest& manifest) {
    if (auto existing = load_manifest()) {
        if (existing->config != manifest.config)
            throw ConfigError("run " + root_.string() + " was started with a different configuration");
        return *existing;
    }
    RunManifest m = manifest;
    if (m.created_at.empty()) m.created_at = now_iso8601();
    write_file_atomic(manifest_path(), json(m).dump(2) + "\n");
    return m;
}

std::optional<RunManifest> RunStore::load_manifest() const {
    if (!std::filesystem::exists(manifest_path())) return std::nullopt;
    try {
        return json::parse(read_file(manifest_path())).get<RunManifest>();
    } catch (const json::exception& e) {
        throw StorageError("corrupt manifest " + manifest_path().string() + ": " + e.what());
    }
}

void RunStore::checkpoint(const std::string& image_id, int stage, const json& payload) {
    json wrapped{{"format", "forge.checkpoint/1"},
                 {"image_id", image_id},
                 {"stage", stage},
                 {"checksum", sha256_hex(payload.dump())},
                 {"payload", payload}};
    write_file_atomic(checkpoint_path(image_id, stage), wrapped.dump() + "\n");
    append_event(json{{"event", "checkpoint"}, {"image_id", image_id}, {"stage", stage_name(stage)}, {"at", now_iso8601()}});
}

std::optional<json> RunStore::load_checkpoint(const std::string& image_id, int stage) const {
    auto path = checkpoint_path(image_id, stage);
    if (!std::filesystem::exists(path)) return std::nullopt;
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("payload")) return std::nullopt;
    if (j.value("image_id", "") != image_id || j.value("stage", 0) != stage) return std::nullopt;
    if (j.value("checksum", "") != sha256_hex(j["payload"].dump())) return std::nullopt;
    return j["payload"];
}

void RunStore::record_failure(const std::string& image_id, int stage, const std::string& error) {
    json f{{"image_id", image_id}, {"stage", stage_name(stage)}, {"error", error}};
    write_file_atomic(failure_path(image_id), f.dump() + "\n");
    append_event(json{{"event", "failure"}, {"image_id", image_id}, {"stage", stage_name(stage)}, {"error", error},
                      {"at", now_iso8601()}});
}

void RunStore::clear_failure(const std::string& image_id) {
    std::error_code ec;
    std::filesystem::remove(failure_path(image_id), ec);
}

ResumeState RunStore::resume(const std::vector<std::string>& image_ids) const {
    ResumeState st;
    st.manifest = load_manifest();
    for (const auto& id : image_ids) {
        ImageResumeState s;
        for (int k = 1; k <= kStageCount; ++k) {
            if (!std::filesystem::exists(checkpoint_path(id, k))) break;
            if (!load_checkpoint(id, k)) {
                st.warnings.push_back("corrupt checkpoint " + checkpoint_path(id, k).string() +
                                      "; falling back to " + (k > 1 ? stage_name(k - 1) : std::string("start")));
                break;
            }
            s.last_stage = k;
        }
        s.failed = std::filesystem::exists(failure_path(id));
        st.images[id] = s;
    }
    return st;
}

void RunStore::save_images(const std::vector<ImageRecord>& images) {
    std::vector<json> rows;
    for (const auto& r : images) rows.push_back(r);
    write_file_atomic(images_path(), to_jsonl(rows));
}

std::vector<ImageRecord> RunStore::load_images() const {
    std::vector<ImageRecord> out;
    for (const auto& j : read_jsonl(images_path())) out.push_back(j.get<ImageRecord>());
    return out;
}

void RunStore::append_event(const json& event) {
    std::lock_guard lock(events_mu_);
    append_line(events_path(), event.dump());
}

// ---------------------------------------------------------------------------

json benchmark_record(const CRSample& s) {
    return json{{"sample_id", s.sample_id},
                {"image_id", s.image_id},
                {"partition", to_string(s.partition)},
                {"iteration", s.iteration},
                {"question", s.question_text},
                {"positive", s.positive},
                {"negative", s.negative},
                {"provenance", s.provenance}};
}

CRSample parse_benchmark_record(const json& j) {
    if (!j.is_object()) throw PreconditionError("record is not an object");
    static const std::vector<std::string> required{"sample_id", "image_id", "partition", "iteration",
                                                   "question",  "positive", "negative",  "provenance"};
    for (const auto& f : required)
        if (!j.contains(f)) throw PreconditionError("missing field '" + f + "'");
    for (const auto& f : {"sample_id", "image_id", "partition", "question", "positive", "negative"})
        if (!j[f].is_string()) throw PreconditionError(std::string("field '") + f + "' must be a string");
    if (!j["iteration"].is_number_integer()) throw PreconditionError("field 'iteration' must be an integer");

    CRSample s;
    try {
        s.sample_id = j["sample_id"].get<std::string>();
        s.image_id = j["image_id"].get<std::string>();
        s.partition = parse_partition(j["partition"].get<std::string>());
        s.iteration = j["iteration"].get<int>();
        s.question_text = j["question"].get<std::string>();
        s.positive = j["positive"].get<std::string>();
        s.negative = j["negative"].get<std::string>();
        s.provenance = j["provenance"].get<Provenance>();
    } catch (const json::exception& e) {
        throw PreconditionError(e.what());
    }
    if (s.sample_id.empty()) throw PreconditionError("empty sample_id");
    if (s.iteration != 1 && s.iteration != 2) throw PreconditionError("iteration must be 1 or 2");
    if (normalize_text(s.positive) == normalize_text(s.negative))
        throw PreconditionError("positive equals negative");
    s.question_id = s.image_id + "/it" + std::to_string(s.iteration) + "/q" + std::to_string(s.provenance.block);
    return s;
}

BenchmarkExport export_benchmark(const Dataset& samples, const std::filesystem::path& out_dir) {
    Dataset sorted = samples;
    std::sort(sorted.begin(), sorted.end(), [](const CRSample& a, const CRSample& b) { return a.sample_id < b.sample_id; });
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i].sample_id == sorted[i - 1].sample_id)
            throw PreconditionError("duplicate sample_id '" + sorted[i].sample_id + "' in export");

    BenchmarkExport ex;
    ex.records_path = out_dir / "benchmark.jsonl";
    ex.stats_path = out_dir / "stats.json";
    std::string body;
    for (const auto& s : sorted) {
        body += benchmark_record(s).dump();
        body.push_back('\n');
        ++ex.per_partition[to_string(s.partition)];
    }
    ex.total = sorted.size();
    write_file_atomic(ex.records_path, body);
    json stats{{"total", ex.total}, {"per_partition", ex.per_partition}};
    write_file_atomic(ex.stats_path, stats.dump(2) + "\n");
    return ex;
}

ImportResult import_benchmark(const std::filesystem::path& records_path) {
    ImportResult out;
    if (!std::filesystem::exists(records_path)) throw StorageError("no benchmark file at " + records_path.string());
    std::set<std::string> seen;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(read_file(records_path))) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            out.errors.push_back({line_no, "not valid JSON"});
            continue;
        }
        try {
            CRSample s = parse_benchmark_record(j);
            if (!seen.insert(s.sample_id).second) {
                out.errors.push_back({line_no, "duplicate sample_id '" + s.sample_id + "'"});
                continue;
            }
            out.dataset.push_back(std::move(s));
        } catch (const Error& e) {
            out.errors.push_back({line_no, e.what()});
        }
    }
    return out;
}

bool verify_export_counts(const std::filesystem::path& out_dir) {
    auto imported = import_benchmark(out_dir / "benchmark.jsonl");
    if (!imported.errors.empty()) return false;
    std::map<std::string, std::size_t> counts;
    for (const auto& s : imported.dataset) ++counts[to_string(s.partition)];
    json stats = json::parse(read_file(out_dir / "stats.json"));
    return stats.at("total").get<std::size_t>() == imported.dataset.size() &&
           stats.at("per_partition").get<std::map<std::string, std::size_t>>() == counts;
}

std::map<std::string, std::string> partition_index(const Dataset& d) {
    std::map<std::string, std::string> m;
    for (const auto& s : d) m[s.sample_id] = to_string(s.partition);
    return m;
}

// ---------------------------------------------------------------------------

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::valid: return "valid";
        case Verdict::invalid: return "invalid";
        case Verdict::flagged: return "flagged";
    }
    return "flagged";
}

Verdict parse_verdict(const std::string& s) {
    if (s == "valid") return Verdict::valid;
    if (s == "invalid") return Verdict::invalid;
    if (s == "flagged") return Verdict::flagged;
    throw PreconditionError("unknown verdict '" + s + "'");
}

void to_json(json& j, const ReviewVerdict& v) {
    j = json{{"sample_id", v.sample_id},
             {"reviewer_id", v.reviewer_id},
             {"verdict", to_string(v.verdict)},
             {"timestamp", v.timestamp}};
    if (!v.note.empty()) j["note"] = v.note;
}

void from_json(const json& j, ReviewVerdict& v) {
    v.sample_id = j.at("sample_id").get<std::string>();
    v.reviewer_id = j.at("reviewer_id").get<std::string>();
    v.verdict = parse_verdict(j.at("verdict").get<std::string>());
    v.note = j.value("note", "");
    v.timestamp = j.value("timestamp", "");
}

void VerdictLog::record(const ReviewVerdict& v) {
    if (v.sample_id.empty() || v.reviewer_id.empty()) throw PreconditionError("verdict needs sample_id and reviewer_id");
    ReviewVerdict stamped = v;
    if (stamped.timestamp.empty()) stamped.timestamp = now_iso8601();
    std::lock_guard lock(mu_);
    append_line(path_, json(stamped).dump());
}

std::vector<ReviewVerdict> VerdictLog::history() const {
    std::lock_guard lock(mu_);
    std::vector<ReviewVerdict> out;
    for (const auto& j : read_jsonl(path_)) out.push_back(j.get<ReviewVerdict>());
    return out;
}

std::map<std::pair<std::string, std::string>, ReviewVerdict> VerdictLog::latest_by_reviewer() const {
    std::map<std::pair<std::string, std::string>, ReviewVerdict> out;
    for (const auto& v : history()) {
        auto key = std::make_pair(v.sample_id, v.reviewer_id);
        auto it = out.find(key);
        if (it == out.end() || it->second.timestamp <= v.timestamp) out[key] = v;
    }
    return out;
}

std::map<std::string, ReviewVerdict> VerdictLog::fold_latest(const std::vector<ReviewVerdict>& history) {
    std::map<std::string, ReviewVerdict> out;
    for (const auto& v : history) {
        auto it = out.find(v.sample_id);
        if (it == out.end() || it->second.timestamp <= v.timestamp) out[v.sample_id] = v;
    }
    return out;
}

std::map<std::string, ReviewVerdict> VerdictLog::latest_by_sample() const { return fold_latest(history()); }

std::vector<std::string> serving_order(std::vector<std::string> ids, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed);
    for (std::size_t i = ids.size(); i > 1; --i) {
        const std::uint64_t bound = i;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t r;
        do {
            r = rng();
        } while (r >= limit);
        std::swap(ids[i - 1], ids[static_cast<std::size_t>(r % bound)]);
    }
    return ids;
}

void to_json(json& j, const SubsetResult& r) {
    json agents = json::object();
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    for (const auto& [name, s] : r.per_agent)
        agents[name] = json{{"subset_accuracy", opt(s.subset_accuracy)},
                            {"full_accuracy", opt(s.full_accuracy)},
                            {"delta", opt(s.delta)}};
    j = json{{"served", r.served},       {"complete", r.complete},   {"target", r.target},
             {"n_valid", r.n_valid},     {"n_invalid", r.n_invalid}, {"n_flagged", r.n_flagged},
             {"subset", r.subset},       {"per_agent", agents}};
}

SubsetResult verified_subset(const Dataset& dataset, const std::map<std::string, ReviewVerdict>& latest,
                             std::size_t target_n, std::uint64_t seed, const std::vector<EvalResult>& results) {
    if (target_n > dataset.size())
        throw PreconditionError("target_n " + std::to_string(target_n) + " exceeds the " +
                                std::to_string(dataset.size()) + " available samples");
    SubsetResult r;
    r.target = target_n;
    std::vector<std::string> ids;
    ids.reserve(dataset.size());
    for (const auto& s : dataset) ids.push_back(s.sample_id);
    r.order = serving_order(ids, seed);

    for (const auto& id : r.order) {
        if (r.n_valid >= target_n) break;
        auto it = latest.find(id);
        if (it == latest.end()) break;
        ++r.served;
        switch (it->second.verdict) {
            case Verdict::valid:
                ++r.n_valid;
                r.subset.push_back(id);
                break;
            case Verdict::invalid: ++r.n_invalid; break;
            case Verdict::flagged: ++r.n_flagged; break;
        }
    }
    r.complete = r.n_valid >= target_n;

    const auto parts = partition_index(dataset);
    std::set<std::string> in_subset(r.subset.begin(), r.subset.end());
    std::map<std::string, std::vector<EvalResult>> by_agent;
    std::map<std::string, EvalMode> mode_of;
    for (const auto& e : results) {
        auto [it, inserted] = mode_of.emplace(e.agent_name, e.mode);
        if (!inserted && it->second != e.mode)
            throw PreconditionError("verified_subset needs results from a single mode per agent");
        if (parts.count(e.sample_id)) by_agent[e.agent_name].push_back(e);
    }
    for (const auto& [agent, rs] : by_agent) {
        SubsetAgentStats st;
        st.full_accuracy = aggregate(rs, parts).overall;
        std::vector<EvalResult> sub;
        for (const auto& e : rs)
            if (in_subset.count(e.sample_id)) sub.push_back(e);
        if (!sub.empty()) st.subset_accuracy = aggregate(sub, parts).overall;
        if (st.subset_accuracy && st.full_accuracy) st.delta = *st.subset_accuracy - *st.full_accuracy;
        r.per_agent[agent] = st;
    }
    return r;
}

std::vector<EvalResult> load_eval_results(const std::filesystem::path& path) {
    std::vector<EvalResult> out;
    for (const auto& j : read_jsonl(path)) out.push_back(j.get<EvalResult>());
    return out;
}

void save_eval_results(const std::filesystem::path& path, std::vector<EvalResult> results) {
    std::sort(results.begin(), results.end(), [](const EvalResult& a, const EvalResult& b) {
        return std::tie(a.sample_id, a.agent_name) < std::tie(b.sample_id, b.agent_name);
    });
    std::vector<json> rows;
    for (const auto& r : results) rows.push_back(r);
    write_file_atomic(path, to_jsonl(rows));
}

}  // namespace forge
