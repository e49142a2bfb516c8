#include "forge/gateway.hpp"

#include <cmath>
#include <regex>
#include <semaphore>
#include <thread>

#include "forge/error.hpp"

namespace forge {

std::string to_string(AgentKind k) { return k == AgentKind::remote ? "remote" : "mock"; }

std::string to_string(AgentRole r) {
    switch (r) {
        case AgentRole::strong: return "strong";
        case AgentRole::downstream: return "downstream";
        case AgentRole::judge: return "judge";
    }
    return "downstream";
}

AgentKind parse_agent_kind(const std::string& s) {
    if (s == "remote") return AgentKind::remote;
    if (s == "mock") return AgentKind::mock;
    throw ConfigError("unknown agent kind '" + s + "'");
}

AgentRole parse_agent_role(const std::string& s) {
    if (s == "strong") return AgentRole::strong;
    if (s == "downstream") return AgentRole::downstream;
    if (s == "judge") return AgentRole::judge;
    throw ConfigError("unknown agent role '" + s + "'");
}

void GenParams::validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
    if (!(repetition_penalty > 0.0)) throw ConfigError("repetition_penalty must be > 0");
    if (!std::isfinite(length_penalty)) throw ConfigError("length_penalty must be finite");
    if (num_beams < 1) throw ConfigError("num_beams must be >= 1");
}

void AgentProfile::validate() const {
    if (name.empty()) throw ConfigError("agent name is empty");
    if (kind == AgentKind::remote) {
        if (endpoint.empty()) throw ConfigError("remote agent '" + name + "' has no endpoint");
        if (credential_ref.empty()) throw ConfigError("remote agent '" + name + "' has no credential_ref");
        // Names only: a pasted key would end up in the manifest.
        static const std::regex env_name(R"(^[A-Za-z_][A-Za-z0-9_]*$)");
        if (!std::regex_match(credential_ref, env_name))
            throw ConfigError("remote agent '" + name + "' credential_ref must be an environment variable name");
    } else if (script.empty()) {
        throw ConfigError("mock agent '" + name + "' has no script");
    }
    if (max_concurrency < 1) throw ConfigError("agent '" + name + "' max_concurrency must be >= 1");
    gen_params.validate();
    if (mcq_params) mcq_params->validate();
}

void validate_profiles(const std::vector<AgentProfile>& agents) {
    std::map<std::string, int> seen;
    for (const auto& a : agents) {
        a.validate();
        if (seen[a.name]++) throw ConfigError("duplicate agent name '" + a.name + "'");
    }
}

void to_json(json& j, const GenParams& p) {
    j = json{{"temperature", p.temperature},
             {"max_new_tokens", p.max_new_tokens},
             {"top_p", p.top_p},
             {"repetition_penalty", p.repetition_penalty},
             {"length_penalty", p.length_penalty},
             {"num_beams", p.num_beams}};
}

void from_json(const json& j, GenParams& p) {
    GenParams d;
    p.temperature = j.value("temperature", d.temperature);
    p.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
    p.top_p = j.value("top_p", d.top_p);
    p.repetition_penalty = j.value("repetition_penalty", d.repetition_penalty);
    p.length_penalty = j.value("length_penalty", d.length_penalty);
    p.num_beams = j.value("num_beams", d.num_beams);
}

void to_json(json& j, const CapabilitySet& c) {
    j = json{{"supports_images", c.supports_images},
             {"supports_logprobs", c.supports_logprobs},
             {"max_context", c.max_context}};
}

void from_json(const json& j, CapabilitySet& c) {
    CapabilitySet d;
    c.supports_images = j.value("supports_images", d.supports_images);
    c.supports_logprobs = j.value("supports_logprobs", d.supports_logprobs);
    c.max_context = j.value("max_context", d.max_context);
}

void to_json(json& j, const AgentProfile& a) {
    j = json{{"name", a.name},
             {"kind", to_string(a.kind)},
             {"model_id", a.model_id},
             {"role", to_string(a.role)},
             {"gen_params", a.gen_params},
             {"max_concurrency", a.max_concurrency}};
    if (a.kind == AgentKind::remote) {
        j["endpoint"] = a.endpoint;
        j["credential_ref"] = a.credential_ref;
    } else {
        j["script"] = a.script;
    }
    if (a.mcq_params) j["mcq_params"] = *a.mcq_params;
    if (!a.unsupported_params.empty()) j["unsupported_params"] = a.unsupported_params;
    if (a.capability_overrides) j["capabilities"] = *a.capability_overrides;
}

void from_json(const json& j, AgentProfile& a) {
    a.name = j.at("name").get<std::string>();
    a.kind = parse_agent_kind(j.value("kind", std::string("mock")));
    a.endpoint = j.value("endpoint", std::string());
    a.credential_ref = j.value("credential_ref", std::string());
    a.script = j.value("script", std::string());
    a.model_id = j.value("model_id", a.name);
    a.role = parse_agent_role(j.value("role", std::string("downstream")));
    if (j.contains("gen_params")) a.gen_params = j.at("gen_params").get<GenParams>();
    if (j.contains("mcq_params")) a.mcq_params = j.at("mcq_params").get<GenParams>();
    a.unsupported_params = j.value("unsupported_params", std::vector<std::string>{});
    if (j.contains("capabilities")) a.capability_overrides = j.at("capabilities").get<CapabilitySet>();
    a.max_concurrency = j.value("max_concurrency", 4);
}

std::string media_type_for(const std::filesystem::path& path) {
    auto ext = to_lower(path.extension().string());
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".png") return "image/png";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "application/octet-stream";
}

ImagePayload ImagePayload::from_file(const std::string& image_id, const std::filesystem::path& path) {
    ImagePayload p;
    p.image_id = image_id;
    p.media_type = media_type_for(path);
    p.bytes = read_file(path);
    return p;
}

json build_wire_request(const AgentProfile& profile, const ChatRequest& req) {
    json messages = json::array();
    bool image_attached = false;
    for (const auto& m : req.messages) {
        json content = json::array();
        if (req.image && !image_attached && m.role == "user") {
            if (req.image->is_url()) {
                content.push_back({{"type", "image_url"}, {"url", req.image->url}});
            } else {
                content.push_back({{"type", "image"},
                                   {"media_type", req.image->media_type},
                                   {"data_b64", base64_encode(req.image->bytes)}});
            }
            image_attached = true;
        }
        content.push_back({{"type", "text"}, {"text", m.text}});
        messages.push_back({{"role", m.role}, {"content", std::move(content)}});
    }

    auto supported = [&](const std::string& field) {
        for (const auto& u : profile.unsupported_params)
            if (u == field) return false;
        return true;
    };

    const auto& g = req.gen_params;
    json out{{"model", profile.model_id}, {"messages", std::move(messages)}, {"logprobs", req.logprobs}};
    if (supported("temperature")) out["temperature"] = g.temperature;
    if (supported("max_new_tokens")) out["max_tokens"] = g.max_new_tokens;
    if (supported("top_p")) out["top_p"] = g.top_p;
    json extra = json::object();
    if (supported("repetition_penalty")) extra["repetition_penalty"] = g.repetition_penalty;
    if (supported("length_penalty")) extra["length_penalty"] = g.length_penalty;
    if (supported("num_beams")) extra["num_beams"] = g.num_beams;
    out["extra_params"] = std::move(extra);
    return out;
}

WireResponse parse_wire_response(const json& body) {
    if (!body.is_object()) throw ProtocolError("response body is not a JSON object");
    if (!body.contains("text") || !body["text"].is_string()) throw ProtocolError("response missing text");
    WireResponse r;
    r.text = body["text"].get<std::string>();
    if (body.contains("token_logprobs") && !body["token_logprobs"].is_null()) {
        if (!body["token_logprobs"].is_array()) throw ProtocolError("token_logprobs is not an array");
        std::vector<double> lps;
        for (const auto& v : body["token_logprobs"]) {
            if (!v.is_number()) throw ProtocolError("token_logprobs holds a non-number");
            lps.push_back(v.get<double>());
        }
        r.token_logprobs = std::move(lps);
    }
    if (body.contains("usage") && body["usage"].is_object()) {
        r.prompt_tokens = body["usage"].value("prompt_tokens", 0);
        r.completion_tokens = body["usage"].value("completion_tokens", 0);
    }
    return r;
}

json redact_wire_request(const json& request) {
    json out = request;
    if (!out.contains("messages")) return out;
    for (auto& m : out["messages"]) {
        if (!m.contains("content")) continue;
        for (auto& part : m["content"]) {
            if (part.value("type", "") == "image" && part.contains("data_b64")) {
                std::string bytes = base64_decode(part["data_b64"].get<std::string>());
                part.erase("data_b64");
                part["sha256"] = sha256_hex(bytes);
                part["size"] = bytes.size();
            }
        }
    }
    return out;
}

std::string request_text(const json& request) {
    std::string out;
    if (!request.contains("messages")) return out;
    for (const auto& m : request["messages"]) {
        if (!m.contains("content")) continue;
        for (const auto& part : m["content"]) {
            if (part.value("type", "") != "text") continue;
            if (!out.empty()) out.push_back('\n');
            out += part.value("text", "");
        }
    }
    return out;
}

std::string request_hash(const json& request) {
    json keyed = redact_wire_request(request);
    json slim{{"model", keyed.value("model", "")}, {"messages", keyed.value("messages", json::array())}};
    return hex64(fnv1a64(slim.dump()));
}

// ---------------------------------------------------------------------------

void to_json(json& j, const ExchangeRecord& r) {
    j = json{{"agent", r.agent},     {"call", r.call},         {"stage", r.stage},
             {"image_id", r.image_id}, {"item_id", r.item_id}, {"request_hash", r.request_hash},
             {"request", r.request}, {"gen_params", r.gen_params}, {"response", r.response},
             {"attempts", r.attempts}, {"retries", r.attempts > 0 ? r.attempts - 1 : 0},
             {"outcome", r.outcome}, {"error", r.error}};
}

void from_json(const json& j, ExchangeRecord& r) {
    r.agent = j.value("agent", "");
    r.call = j.value("call", "");
    r.stage = j.value("stage", "");
    r.image_id = j.value("image_id", "");
    r.item_id = j.value("item_id", "");
    r.request_hash = j.value("request_hash", "");
    r.request = j.value("request", json());
    r.gen_params = j.value("gen_params", json());
    r.response = j.value("response", json());
    r.attempts = j.value("attempts", 0);
    r.outcome = j.value("outcome", "");
    r.error = j.value("error", "");
}

void MemoryExchangeSink::append(const ExchangeRecord& record) {
    std::lock_guard lock(mu_);
    records_.push_back(record);
}

std::vector<ExchangeRecord> MemoryExchangeSink::records() const {
    std::lock_guard lock(mu_);
    return records_;
}

void JsonlExchangeSink::append(const ExchangeRecord& record) {
    std::lock_guard lock(mu_);
    append_line(path_, json(record).dump());
}

// ---------------------------------------------------------------------------

std::chrono::milliseconds RetryPolicy::delay_for(int retry_index) const {
    double d = base_delay_ms * std::pow(multiplier, retry_index);
    if (d > max_delay_ms) d = max_delay_ms;
    return std::chrono::milliseconds(static_cast<long long>(d));
}

void to_json(json& j, const RetryPolicy& p) {
    j = json{{"budget", p.budget},
             {"base_delay_ms", p.base_delay_ms},
             {"max_delay_ms", p.max_delay_ms},
             {"multiplier", p.multiplier}};
}

void from_json(const json& j, RetryPolicy& p) {
    RetryPolicy d;
    p.budget = j.value("budget", d.budget);
    p.base_delay_ms = j.value("base_delay_ms", d.base_delay_ms);
    p.max_delay_ms = j.value("max_delay_ms", d.max_delay_ms);
    p.multiplier = j.value("multiplier", d.multiplier);
    if (p.budget < 0) throw ConfigError("retry budget must be >= 0");
}

// ---------------------------------------------------------------------------

struct Gateway::AgentSlot {
    const AgentProfile* profile = nullptr;
    std::unique_ptr<AgentBackend> backend;
    std::unique_ptr<std::counting_semaphore<1024>> permits;
    std::mutex cap_mu;
    std::optional<CapabilitySet> capabilities;
};

namespace {

class PermitGuard {
public:
    explicit PermitGuard(std::counting_semaphore<1024>& s) : s_(s) { s_.acquire(); }
    ~PermitGuard() { s_.release(); }
    PermitGuard(const PermitGuard&) = delete;
    PermitGuard& operator=(const PermitGuard&) = delete;

private:
    std::counting_semaphore<1024>& s_;
};

constexpr const char* kProbePrompt =
    "Report your capabilities as a JSON object with keys supports_images, supports_logprobs "
    "and max_context. Reply with the JSON object only.";

}  // namespace

Gateway::Gateway(std::vector<AgentProfile> profiles, GatewayOptions options)
    : profiles_(std::move(profiles)), options_(std::move(options)) {
    validate_profiles(profiles_);
    if (!options_.sleeper) options_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    for (const auto& p : profiles_) {
        auto s = std::make_unique<AgentSlot>();
        s->profile = &p;
        s->permits = std::make_unique<std::counting_semaphore<1024>>(std::min(p.max_concurrency, 1024));
        if (p.kind == AgentKind::mock) {
            std::filesystem::path script = p.script;
            if (script.is_relative() && !options_.script_root.empty()) script = options_.script_root / script;
            s->backend = std::make_unique<MockBackend>(MockScript::load(script));
        } else {
            s->backend = std::make_unique<HttpBackend>(p, options_.http_timeout_seconds);
        }
        slots_.emplace(p.name, std::move(s));
    }
}

Gateway::~Gateway() = default;

void Gateway::set_backend(const std::string& agent, std::unique_ptr<AgentBackend> backend) {
    slot(agent).backend = std::move(backend);
}

Gateway::AgentSlot& Gateway::slot(const std::string& agent) const {
    auto it = slots_.find(agent);
    if (it == slots_.end()) throw ConfigError("unknown agent '" + agent + "'");
    return *it->second;
}

const AgentProfile& Gateway::profile(const std::string& agent) const { return *slot(agent).profile; }

std::vector<std::string> Gateway::agents_with_role(AgentRole role) const {
    std::vector<std::string> out;
    for (const auto& p : profiles_)
        if (p.role == role) out.push_back(p.name);
    return out;
}

void Gateway::validate_request(const ChatRequest& req) const {
    if (req.messages.empty()) throw PreconditionError("chat request has no messages");
    std::size_t total = 0;
    for (const auto& m : req.messages) {
        if (m.role != "system" && m.role != "user" && m.role != "assistant")
            throw PreconditionError("invalid message role '" + m.role + "'");
        total += m.text.size();
    }
    if (total > options_.max_text_chars)
        throw PreconditionError("request text length " + std::to_string(total) + " exceeds cap " +
                                std::to_string(options_.max_text_chars));
    if (req.image && !req.image->is_url() && req.image->bytes.empty())
        throw PreconditionError("image payload is empty");
    try {
        req.gen_params.validate();
    } catch (const ConfigError& e) {
        throw PreconditionError(e.what());
    }
}

json Gateway::dispatch(AgentSlot& s, const std::string& call, const json& request, const ExchangeContext& ctx,
                       const GenParams& params, const Validator& validate) {
    ExchangeRecord rec;
    rec.agent = s.profile->name;
    rec.call = call;
    rec.stage = ctx.stage;
    rec.image_id = ctx.image_id;
    rec.item_id = ctx.item_id;
    rec.request_hash = request_hash(request);
    rec.request = redact_wire_request(request);
    rec.gen_params = params;

    // Exactly one record per call, whatever the outcome.
    ExchangeSink* sink = ctx.sink ? ctx.sink : options_.default_sink;
    auto finish = [&](const std::string& outcome, const std::string& error) {
        rec.outcome = outcome;
        rec.error = error;
        if (sink) sink->append(rec);
    };

    PermitGuard permit(*s.permits);
    const int max_attempts = 1 + options_.retry.budget;
    json body;
    while (true) {
        ++rec.attempts;
        try {
            body = s.backend->send(request, ctx);
            break;
        } catch (const BackendFailure& f) {
            if (f.retryable() && rec.attempts < max_attempts) {
                options_.sleeper(options_.retry.delay_for(rec.attempts - 1));
                continue;
            }
            finish("error", f.what());
            switch (f.kind()) {
                case BackendFailure::Kind::auth:
                    throw ConfigError("agent '" + s.profile->name + "' authentication failed: " + f.what());
                case BackendFailure::Kind::rejected:
                    throw ProtocolError("agent '" + s.profile->name + "' rejected request: " + f.what());
                default:
                    throw DispatchError("agent '" + s.profile->name + "' unreachable after " +
                                            std::to_string(rec.attempts) + " attempts: " + f.what(),
                                        rec.attempts);
            }
        } catch (const Error& e) {
            finish("error", e.what());
            throw;
        }
    }

    rec.response = body;
    try {
        WireResponse parsed = parse_wire_response(body);
        if (validate) validate(parsed);
        finish("ok", "");
        return body;
    } catch (const Error& e) {
        finish("error", e.what());
        throw;
    }
}

std::string Gateway::generate(const std::string& agent, const ChatRequest& req, const ExchangeContext& ctx) {
    auto& s = slot(agent);
    validate_request(req);
    json wire = build_wire_request(*s.profile, req);
    json body = dispatch(s, "generate", wire, ctx, req.gen_params, {});
    return body["text"].get<std::string>();
}

ScoredCompletion Gateway::score_continuation(const std::string& agent, const std::optional<ImagePayload>& image,
                                             const std::string& prefix, const std::string& continuation,
                                             const ExchangeContext& ctx) {
    if (continuation.empty()) throw PreconditionError("continuation is empty");
    auto& s = slot(agent);
    if (!probe_capabilities(agent, ctx).supports_logprobs)
        throw CapabilityError("agent '" + agent + "' does not expose token logprobs");

    ChatRequest req;
    req.image = image;
    req.messages = {{"user", prefix}, {"assistant", continuation}};
    req.gen_params = s.profile->mcq_gen_params();
    req.logprobs = true;
    validate_request(req);
    json wire = build_wire_request(*s.profile, req);
    wire["max_tokens"] = 0;

    auto check = [&](const WireResponse& r) {
        if (!r.token_logprobs) throw CapabilityError("agent '" + agent + "' returned no token logprobs");
        if (r.token_logprobs->empty()) throw ScoringError("no tokens scored for continuation");
        for (double lp : *r.token_logprobs)
            if (!std::isfinite(lp) || lp > 0.0) throw ProtocolError("token logprob out of range");
        if (r.text != continuation)
            throw ScoringError("scored span '" + r.text + "' does not isolate continuation '" + continuation + "'");
    };
    json body = dispatch(s, "score", wire, ctx, req.gen_params, check);
    WireResponse r = parse_wire_response(body);

    ScoredCompletion out;
    out.continuation_text = r.text;
    out.token_logprobs = *r.token_logprobs;
    out.token_count = static_cast<int>(out.token_logprobs.size());
    return out;
}

CapabilitySet Gateway::probe_capabilities(const std::string& agent, const ExchangeContext& ctx) {
    auto& s = slot(agent);
    if (s.profile->capability_overrides) return *s.profile->capability_overrides;
    std::lock_guard lock(s.cap_mu);
    if (s.capabilities) return *s.capabilities;

    ChatRequest req;
    req.messages = {{"user", kProbePrompt}};
    req.gen_params = s.profile->gen_params;
    req.gen_params.max_new_tokens = 64;
    req.logprobs = true;
    json wire = build_wire_request(*s.profile, req);
    ExchangeContext probe_ctx = ctx;
    probe_ctx.stage = "probe";
    probe_ctx.item_id.clear();
    json body = dispatch(s, "probe", wire, probe_ctx, req.gen_params, {});
    WireResponse r = parse_wire_response(body);

    CapabilitySet caps;
    caps.supports_logprobs = r.token_logprobs.has_value();
    json declared = json::parse(r.text, nullptr, false);
    if (declared.is_object()) {
        caps.supports_images = declared.value("supports_images", caps.supports_images);
        caps.supports_logprobs = declared.value("supports_logprobs", caps.supports_logprobs);
        caps.max_context = declared.value("max_context", caps.max_context);
    }
    s.capabilities = caps;
    return caps;
}

}  // namespace forge
