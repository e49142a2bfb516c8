#pragma once

// Shared helpers for the unit tests and the acceptance binary.

#include <atomic>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "forge/gateway.hpp"
#include "forge/pipeline.hpp"
#include "forge/types.hpp"
#include "forge/util.hpp"

namespace forge::testing {

inline std::filesystem::path fixtures_dir() { return FORGE_FIXTURES; }

class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("forge-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::filesystem::path write_json(const std::filesystem::path& path, const json& j) {
    std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, j.dump(2));
    return path;
}

inline AgentProfile mock_profile(const std::string& name, AgentRole role, const std::filesystem::path& script) {
    AgentProfile p;
    p.name = name;
    p.kind = AgentKind::mock;
    p.role = role;
    p.script = script.string();
    p.model_id = name;
    return p;
}

/// Backend answering through a callback; counts calls.
class FnBackend : public AgentBackend {
public:
    using Fn = std::function<json(const json&, const ExchangeContext&)>;
    explicit FnBackend(Fn fn, std::atomic<int>* calls = nullptr) : fn_(std::move(fn)), calls_(calls) {}
    json send(const json& request, const ExchangeContext& ctx) override {
        if (calls_) ++*calls_;
        return fn_(request, ctx);
    }

private:
    Fn fn_;
    std::atomic<int>* calls_;
};

inline json text_reply(const std::string& text) {
    return json{{"text", text}, {"token_logprobs", nullptr}, {"usage", {{"prompt_tokens", 0}, {"completion_tokens", 0}}}};
}

inline GatewayOptions fast_options(ExchangeSink* sink = nullptr) {
    GatewayOptions o;
    o.retry.base_delay_ms = 0;
    o.retry.max_delay_ms = 0;
    o.default_sink = sink;
    o.sleeper = [](std::chrono::milliseconds) {};
    return o;
}

inline CRSample make_sample(const std::string& id, Partition p = Partition::replace_att,
                            const std::string& positive = "red", const std::string& negative = "blue") {
    CRSample s;
    s.sample_id = id;
    s.question_id = id + "-q";
    s.image_id = "img-" + id;
    s.partition = p;
    s.question_text = "What color is thing " + id + "?";
    s.positive = positive;
    s.negative = negative;
    return s;
}

/// The five-image mock run shipped in tests/fixtures/e2e.
inline PipelineConfig e2e_config() { return load_config(fixtures_dir() / "e2e" / "config.json"); }

/// Copies the first `n` image records of the e2e manifest into `dir`, with absolute URIs.
inline std::filesystem::path e2e_subset_manifest(const std::filesystem::path& dir, std::size_t n) {
    auto images = load_image_manifest(fixtures_dir() / "e2e" / "images.jsonl");
    std::string body;
    for (std::size_t i = 0; i < n && i < images.size(); ++i) body += json(images[i]).dump() + "\n";
    auto path = dir / "images.jsonl";
    std::filesystem::create_directories(dir);
    write_file_atomic(path, body);
    return path;
}

/// Relative path -> bytes for every regular file under `root` whose top-level
/// directory is in `dirs`.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& root,
                                                   const std::vector<std::string>& dirs) {
    std::map<std::string, std::string> out;
    for (const auto& d : dirs) {
        if (!std::filesystem::exists(root / d)) continue;
        if (std::filesystem::is_regular_file(root / d)) {
            out[d] = read_file(root / d);
            continue;
        }
        for (const auto& e : std::filesystem::recursive_directory_iterator(root / d))
            if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = read_file(e.path());
    }
    return out;
}

/// Run outputs that carry no wall-clock timestamps.
inline const std::vector<std::string>& deterministic_outputs() {
    static const std::vector<std::string> dirs{"export", "stages", "checkpoints", "exchanges", "reports", "images.jsonl"};
    return dirs;
}

}  // namespace forge::testing
