#include <set>

#include "forge/error.hpp"
#include "forge/pipeline.hpp"

namespace forge {

void PipelineConfig::validate() const {
    validate_profiles(agents);
    int strong = 0, downstream = 0;
    for (const auto& a : agents) {
        if (a.role == AgentRole::strong) ++strong;
        if (a.role == AgentRole::downstream) ++downstream;
    }
    if (strong != 1) throw ConfigError("exactly one strong agent is required, found " + std::to_string(strong));
    if (downstream == 0) throw ConfigError("no downstream agents configured");
    if (n_questions < 1) throw ConfigError("n_questions must be >= 1");
    if (n_negatives < 1) throw ConfigError("n_negatives must be >= 1");
    if (min_questions < 1 || min_questions > n_questions)
        throw ConfigError("min_questions must be in [1, n_questions]");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (retry.budget < 0) throw ConfigError("retry budget must be >= 0");
}

void to_json(json& j, const PipelineConfig& c) {
    json parts = json::array();
    for (auto p : c.partitions) parts.push_back(to_string(p));
    j = json{{"run_id", c.run_id},
             {"agents", c.agents},
             {"partitions", parts},
             {"images", c.images.string()},
             {"n_questions", c.n_questions},
             {"n_negatives", c.n_negatives},
             {"min_questions", c.min_questions},
             {"seeds", {{"order", c.order_seed}, {"review", c.review_seed}}},
             {"retry", c.retry},
             {"iteration_2_enabled", c.iteration_2_enabled},
             {"filter", {{"order_mode", to_string(c.order_mode)}}},
             {"workers", c.workers},
             {"max_text_chars", c.max_text_chars}};
    j["image_max_dimension"] = c.image_max_dimension ? json(*c.image_max_dimension) : json(nullptr);
}

PipelineConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
    static const std::set<std::string> known{"run_id",        "agents",      "partitions", "images",
                                             "n_questions",   "n_negatives", "min_questions", "seeds",
                                             "retry",         "iteration_2_enabled", "filter", "workers",
                                             "max_text_chars", "image_max_dimension"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

    PipelineConfig c;
    c.base_dir = base_dir;
    try {
        c.run_id = j.value("run_id", c.run_id);
        c.agents = j.value("agents", std::vector<AgentProfile>{});
        for (const auto& p : j.value("partitions", std::vector<std::string>{})) c.partitions.push_back(parse_partition(p));
        c.images = j.value("images", std::string());
        c.n_questions = j.value("n_questions", c.n_questions);
        c.n_negatives = j.value("n_negatives", c.n_negatives);
        c.min_questions = j.value("min_questions", c.min_questions);
        if (j.contains("seeds")) {
            c.order_seed = j["seeds"].value("order", c.order_seed);
            c.review_seed = j["seeds"].value("review", c.review_seed);
        }
        if (j.contains("retry")) c.retry = j["retry"].get<RetryPolicy>();
        c.iteration_2_enabled = j.value("iteration_2_enabled", c.iteration_2_enabled);
        if (j.contains("filter")) c.order_mode = parse_order_mode(j["filter"].value("order_mode", "balanced"));
        c.workers = j.value("workers", c.workers);
        c.max_text_chars = j.value("max_text_chars", c.max_text_chars);
        if (j.contains("image_max_dimension") && !j["image_max_dimension"].is_null())
            c.image_max_dimension = j["image_max_dimension"].get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const PreconditionError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    } catch (const StorageError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(j, std::filesystem::absolute(path).parent_path());
}

GatewayOptions gateway_options(const PipelineConfig& cfg) {
    GatewayOptions o;
    o.retry = cfg.retry;
    o.max_text_chars = cfg.max_text_chars;
    o.script_root = cfg.base_dir;
    return o;
}

std::vector<ImageRecord> load_image_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("image manifest not found: " + path.string());
    std::vector<ImageRecord> out;
    std::set<std::string> ids;
    const auto dir = std::filesystem::absolute(path).parent_path();
    std::size_t line = 0;
    for (const auto& raw : split_lines(read_file(path))) {
        ++line;
        if (trim(raw).empty()) continue;
        ImageRecord r;
        try {
            r = json::parse(raw).get<ImageRecord>();
        } catch (const std::exception& e) {
            throw ConfigError(path.string() + ":" + std::to_string(line) + ": " + e.what());
        }
        if (r.image_id.empty()) throw ConfigError(path.string() + ":" + std::to_string(line) + ": empty image_id");
        if (!ids.insert(r.image_id).second) throw ConfigError("duplicate image_id '" + r.image_id + "'");
        std::string uri = r.source_uri;
        if (uri.rfind("file://", 0) == 0) uri = uri.substr(7);
        if (uri.rfind("http://", 0) != 0 && uri.rfind("https://", 0) != 0) {
            std::filesystem::path p = uri;
            if (p.is_relative()) p = dir / p;
            uri = p.lexically_normal().string();
        }
        r.source_uri = uri;
        out.push_back(std::move(r));
    }
    return out;
}

ImagePayload load_image(ImageRecord& record) {
    ImagePayload p;
    p.image_id = record.image_id;
    if (record.source_uri.rfind("http://", 0) == 0 || record.source_uri.rfind("https://", 0) == 0) {
        p.url = record.source_uri;
        record.bytes_hash = sha256_hex("url:" + record.source_uri);
        return p;
    }
    p = ImagePayload::from_file(record.image_id, record.source_uri);
    record.bytes_hash = sha256_hex(p.bytes);
    return p;
}

}  // namespace forge
