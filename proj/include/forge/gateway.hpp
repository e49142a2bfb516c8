#pragma once

// Uniform access to vision-language agents over one chat-completions-style
// wire schema. Remote agents speak HTTP; mock agents replay a script file.
//
// Request:  {model, messages:[{role, content:[{type:"text",text} |
//            {type:"image",media_type,data_b64} | {type:"image_url",url}]}],
//            temperature, max_tokens, top_p, extra_params{}, logprobs}
// Response: {text, token_logprobs:[float]|null, usage{prompt_tokens, completion_tokens}}
//
// A scoring request carries the continuation as a trailing assistant message,
// sets logprobs:true and max_tokens:0; the response echoes the scored span in
// `text` and one logprob per continuation token.

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forge/util.hpp"

namespace forge {

enum class AgentKind { remote, mock };
enum class AgentRole { strong, downstream, judge };

std::string to_string(AgentKind k);
std::string to_string(AgentRole r);
AgentKind parse_agent_kind(const std::string& s);
AgentRole parse_agent_role(const std::string& s);

struct GenParams {
    double temperature = 0.0;
    int max_new_tokens = 500;
    double top_p = 1.0;
    double repetition_penalty = 1.0;
    double length_penalty = 1.0;
    int num_beams = 1;

    void validate() const;
    bool operator==(const GenParams&) const = default;
};

struct CapabilitySet {
    bool supports_images = true;
    bool supports_logprobs = false;
    int max_context = 4096;

    bool operator==(const CapabilitySet&) const = default;
};

struct AgentProfile {
    std::string name;
    AgentKind kind = AgentKind::mock;
    std::string endpoint;        // remote only
    std::string credential_ref;  // env var name holding the bearer token, remote only
    std::string script;          // mock only
    std::string model_id;
    GenParams gen_params;
    std::optional<GenParams> mcq_params;  // binary-choice answering; falls back to gen_params
    AgentRole role = AgentRole::downstream;
    std::vector<std::string> unsupported_params;  // dropped from requests, kept in the manifest
    std::optional<CapabilitySet> capability_overrides;
    int max_concurrency = 4;

    void validate() const;
    const GenParams& mcq_gen_params() const { return mcq_params ? *mcq_params : gen_params; }
};

void to_json(json& j, const GenParams& p);
void from_json(const json& j, GenParams& p);
void to_json(json& j, const CapabilitySet& c);
void from_json(const json& j, CapabilitySet& c);
void to_json(json& j, const AgentProfile& a);
void from_json(const json& j, AgentProfile& a);

/// Throws ConfigError on duplicate names or an invalid profile.
void validate_profiles(const std::vector<AgentProfile>& agents);

struct ImagePayload {
    std::string image_id;
    std::string media_type;
    std::string bytes;  // raw bytes; empty when `url` is used
    std::string url;

    static ImagePayload from_file(const std::string& image_id, const std::filesystem::path& path);
    bool is_url() const { return !url.empty(); }
};

std::string media_type_for(const std::filesystem::path& path);

struct ChatMessage {
    std::string role;  // "system" | "user" | "assistant"
    std::string text;
};

struct ChatRequest {
    std::optional<ImagePayload> image;  // attached to the first user message
    std::vector<ChatMessage> messages;
    GenParams gen_params;
    bool logprobs = false;
};

struct ScoredCompletion {
    std::string continuation_text;
    std::vector<double> token_logprobs;
    int token_count = 0;
};

struct WireResponse {
    std::string text;
    std::optional<std::vector<double>> token_logprobs;
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

/// Serializes a request. Fields listed in `profile.unsupported_params` are omitted.
json build_wire_request(const AgentProfile& profile, const ChatRequest& req);
/// Throws ProtocolError if `text` is missing or the shape is wrong.
WireResponse parse_wire_response(const json& body);

/// Copy of a wire request with image bytes replaced by their hash and size.
json redact_wire_request(const json& request);

// ---------------------------------------------------------------------------
// exchange log

struct ExchangeRecord {
    std::string agent;
    std::string call;  // generate | score | probe
    std::string stage;
    std::string image_id;
    std::string item_id;
    std::string request_hash;
    json request;     // redacted
    json gen_params;  // full set, including fields omitted on the wire
    json response;    // null on failure
    int attempts = 0;
    std::string outcome;  // ok | error
    std::string error;
};

void to_json(json& j, const ExchangeRecord& r);
void from_json(const json& j, ExchangeRecord& r);

class ExchangeSink {
public:
    virtual ~ExchangeSink() = default;
    virtual void append(const ExchangeRecord& record) = 0;
};

class MemoryExchangeSink : public ExchangeSink {
public:
    void append(const ExchangeRecord& record) override;
    std::vector<ExchangeRecord> records() const;

private:
    mutable std::mutex mu_;
    std::vector<ExchangeRecord> records_;
};

/// Appends one JSON line per record; writes are serialized.
class JsonlExchangeSink : public ExchangeSink {
public:
    explicit JsonlExchangeSink(std::filesystem::path path) : path_(std::move(path)) {}
    void append(const ExchangeRecord& record) override;
    const std::filesystem::path& path() const { return path_; }

private:
    std::mutex mu_;
    std::filesystem::path path_;
};

/// Where a call originates; mock scripts key on it and the exchange log records it.
struct ExchangeContext {
    std::string stage;
    std::string image_id;
    std::string item_id;
    ExchangeSink* sink = nullptr;  // overrides the gateway default
};

// ---------------------------------------------------------------------------
// backends

class BackendFailure : public std::runtime_error {
public:
    enum class Kind { transport, rate_limited, auth, rejected };
    BackendFailure(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }
    bool retryable() const noexcept { return kind_ == Kind::transport || kind_ == Kind::rate_limited; }

private:
    Kind kind_;
};

class AgentBackend {
public:
    virtual ~AgentBackend() = default;
    /// Returns the response body. Throws BackendFailure on transport/auth trouble.
    virtual json send(const json& request, const ExchangeContext& ctx) = 0;
};

/// POSTs the wire request to the profile endpoint with a bearer token read
/// from the environment variable named by `credential_ref`.
class HttpBackend : public AgentBackend {
public:
    explicit HttpBackend(AgentProfile profile, int timeout_seconds = 120);
    json send(const json& request, const ExchangeContext& ctx) override;

private:
    AgentProfile profile_;
    std::string base_;
    std::string path_;
    int timeout_seconds_;
};

struct MockResponse {
    std::string text;
    bool has_text = true;
    std::optional<std::vector<double>> logprobs;
    std::optional<BackendFailure::Kind> failure;
};

struct MockRule {
    std::optional<std::string> stage;
    std::optional<std::string> image_id;
    std::optional<std::string> request_hash;
    std::optional<std::string> contains;
    std::vector<MockResponse> responses;  // consumed in order, last one repeats
};

/// Parsed mock script. See README for the file format.
struct MockScript {
    CapabilitySet capabilities;
    std::optional<json> probe_reply;
    double default_logprob = -1.0;
    std::map<std::string, double> token_logprobs;
    std::vector<MockRule> rules;
    std::optional<std::string> fallback;

    static MockScript load(const std::filesystem::path& path);
    static MockScript from_json(const json& j, const std::filesystem::path& base_dir = {});
};

/// Deterministic scripted agent. Call counters are keyed by
/// (rule, stage, image id, request hash) so replay order is stable under
/// concurrency and across resumed runs.
class MockBackend : public AgentBackend {
public:
    explicit MockBackend(MockScript script) : script_(std::move(script)) {}
    json send(const json& request, const ExchangeContext& ctx) override;

    /// Whitespace tokenizer used for scoring.
    static std::vector<std::string> tokenize(const std::string& text);

private:
    json score(const json& request, const MockResponse* scripted);
    std::string render(const std::string& tmpl, const json& request, const ExchangeContext& ctx) const;

    MockScript script_;
    std::mutex mu_;
    std::map<std::string, std::size_t> counters_;
};

/// Concatenated text of all message parts, in order. Used for request keys.
std::string request_text(const json& request);
std::string request_hash(const json& request);

// ---------------------------------------------------------------------------

struct RetryPolicy {
    int budget = 3;  // retries after the first attempt
    int base_delay_ms = 250;
    int max_delay_ms = 8000;
    double multiplier = 2.0;

    std::chrono::milliseconds delay_for(int retry_index) const;
};

void to_json(json& j, const RetryPolicy& p);
void from_json(const json& j, RetryPolicy& p);

struct GatewayOptions {
    RetryPolicy retry;
    std::size_t max_text_chars = 200000;
    std::filesystem::path script_root;  // resolves relative mock script paths
    int http_timeout_seconds = 120;
    ExchangeSink* default_sink = nullptr;
    std::function<void(std::chrono::milliseconds)> sleeper;  // defaults to sleep_for
};

class Gateway {
public:
    explicit Gateway(std::vector<AgentProfile> profiles, GatewayOptions options = {});
    ~Gateway();
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    /// Replaces the backend for an agent (tests, custom transports).
    void set_backend(const std::string& agent, std::unique_ptr<AgentBackend> backend);

    const AgentProfile& profile(const std::string& agent) const;
    const std::vector<AgentProfile>& profiles() const { return profiles_; }
    std::vector<std::string> agents_with_role(AgentRole role) const;

    std::string generate(const std::string& agent, const ChatRequest& req, const ExchangeContext& ctx = {});

    /// Per-token log-likelihood of `continuation` given image and `prefix`.
    ScoredCompletion score_continuation(const std::string& agent, const std::optional<ImagePayload>& image,
                                        const std::string& prefix, const std::string& continuation,
                                        const ExchangeContext& ctx = {});

    /// Config overrides win; otherwise asks the agent once and caches the answer.
    CapabilitySet probe_capabilities(const std::string& agent, const ExchangeContext& ctx = {});

private:
    struct AgentSlot;

    AgentSlot& slot(const std::string& agent) const;
    using Validator = std::function<void(const WireResponse&)>;
    json dispatch(AgentSlot& s, const std::string& call, const json& request, const ExchangeContext& ctx,
                  const GenParams& params, const Validator& validate);
    void validate_request(const ChatRequest& req) const;

    std::vector<AgentProfile> profiles_;
    GatewayOptions options_;
    std::map<std::string, std::unique_ptr<AgentSlot>> slots_;
};

}  // namespace forge
