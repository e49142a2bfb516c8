#include <sstream>

#include "forge/error.hpp"
#include "forge/gateway.hpp"

namespace forge {

namespace {

BackendFailure::Kind parse_failure(const std::string& s) {
    if (s == "transport") return BackendFailure::Kind::transport;
    if (s == "rate_limit") return BackendFailure::Kind::rate_limited;
    if (s == "auth") return BackendFailure::Kind::auth;
    if (s == "rejected") return BackendFailure::Kind::rejected;
    throw ConfigError("unknown mock failure kind '" + s + "'");
}

MockResponse parse_response(const json& j, const std::filesystem::path& base_dir) {
    MockResponse r;
    if (j.is_string()) {
        r.text = j.get<std::string>();
        return r;
    }
    if (!j.is_object()) throw ConfigError("mock response must be a string or object");
    if (j.contains("fail")) {
        auto kind = j["fail"].get<std::string>();
        if (kind == "missing_text") {
            r.has_text = false;
        } else {
            r.failure = parse_failure(kind);
        }
        return r;
    }
    if (j.contains("file")) {
        std::filesystem::path p = j["file"].get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        r.text = read_file(p);
    } else {
        r.text = j.value("text", "");
    }
    if (j.contains("logprobs")) r.logprobs = j["logprobs"].get<std::vector<double>>();
    return r;
}

// Option text listed as "A. ..." / "B. ..." lines in a binary-choice prompt.
std::optional<std::string> option_line(const std::string& text, char letter) {
    for (const auto& line : split_lines(text)) {
        auto t = trim(line);
        if (t.size() >= 2 && t[0] == letter && t[1] == '.') return trim(t.substr(2));
    }
    return std::nullopt;
}

}  // namespace

MockScript MockScript::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("mock script " + path.string() + ": " + e.what());
    } catch (const StorageError& e) {
        throw ConfigError(std::string("mock script: ") + e.what());
    }
    return from_json(j, path.parent_path());
}

MockScript MockScript::from_json(const json& j, const std::filesystem::path& base_dir) {
    MockScript s;
    if (j.contains("capabilities")) s.capabilities = j["capabilities"].get<CapabilitySet>();
    if (j.contains("probe")) s.probe_reply = j["probe"];
    if (j.contains("logprobs")) {
        const auto& lp = j["logprobs"];
        s.default_logprob = lp.value("default", s.default_logprob);
        if (lp.contains("table")) s.token_logprobs = lp["table"].get<std::map<std::string, double>>();
    }
    for (const auto& rj : j.value("rules", json::array())) {
        MockRule r;
        if (rj.contains("stage")) r.stage = rj["stage"].get<std::string>();
        if (rj.contains("image_id")) r.image_id = rj["image_id"].get<std::string>();
        if (rj.contains("request_hash")) r.request_hash = rj["request_hash"].get<std::string>();
        if (rj.contains("contains")) r.contains = rj["contains"].get<std::string>();
        if (rj.contains("response")) r.responses.push_back(parse_response(rj["response"], base_dir));
        for (const auto& resp : rj.value("responses", json::array()))
            r.responses.push_back(parse_response(resp, base_dir));
        if (r.responses.empty()) throw ConfigError("mock rule without responses");
        s.rules.push_back(std::move(r));
    }
    if (j.contains("fallback")) s.fallback = j["fallback"].get<std::string>();
    return s;
}

std::vector<std::string> MockBackend::tokenize(const std::string& text) { return split_whitespace(text); }

std::string MockBackend::render(const std::string& tmpl, const json& request, const ExchangeContext& ctx) const {
    const std::string text = request_text(request);
    const char hash_letter = (fnv1a64(text) & 1U) ? 'B' : 'A';
    auto letter_of = [&](const std::string& needle, bool want) -> std::string {
        auto a = option_line(text, 'A');
        auto b = option_line(text, 'B');
        auto n = to_lower(needle);
        bool in_a = a && to_lower(*a).find(n) != std::string::npos;
        bool in_b = b && to_lower(*b).find(n) != std::string::npos;
        if (in_a != in_b) return ((in_a == want) ? "A" : "B");
        return std::string(1, hash_letter);
    };

    std::string out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] != '{') {
            out.push_back(tmpl[i++]);
            continue;
        }
        auto close = tmpl.find('}', i);
        if (close == std::string::npos) {
            out.append(tmpl, i, std::string::npos);
            break;
        }
        std::string key = tmpl.substr(i + 1, close - i - 1);
        std::string value;
        bool known = true;
        if (key == "image_id") value = ctx.image_id;
        else if (key == "stage") value = ctx.stage;
        else if (key == "item_id") value = ctx.item_id;
        else if (key == "hash_letter") value = std::string(1, hash_letter);
        else if (key.rfind("letter_of:", 0) == 0) value = letter_of(key.substr(10), true);
        else if (key.rfind("letter_not_of:", 0) == 0) value = letter_of(key.substr(14), false);
        else known = false;
        if (known) out += value;
        else out.append(tmpl, i, close - i + 1);
        i = close + 1;
    }
    return out;
}

json MockBackend::score(const json& request, const MockResponse* scripted) {
    std::string continuation;
    const auto& msgs = request.at("messages");
    if (!msgs.empty() && msgs.back().value("role", "") == "assistant") {
        for (const auto& part : msgs.back()["content"])
            if (part.value("type", "") == "text") continuation += part.value("text", "");
    }
    if (!script_.capabilities.supports_logprobs)
        return json{{"text", continuation}, {"token_logprobs", nullptr}, {"usage", {{"prompt_tokens", 0}, {"completion_tokens", 0}}}};

    auto tokens = tokenize(continuation);
    std::string scored;
    std::vector<double> lps;
    for (const auto& t : tokens) {
        if (!scored.empty()) scored.push_back(' ');
        scored += t;
        auto it = script_.token_logprobs.find(t);
        if (it == script_.token_logprobs.end()) it = script_.token_logprobs.find(to_lower(t));
        lps.push_back(it != script_.token_logprobs.end() ? it->second : script_.default_logprob);
    }
    if (scripted) {
        if (!scripted->text.empty()) scored = scripted->text;
        if (scripted->logprobs) lps = *scripted->logprobs;
    }
    return json{{"text", scored},
                {"token_logprobs", lps},
                {"usage", {{"prompt_tokens", tokenize(request_text(request)).size()}, {"completion_tokens", lps.size()}}}};
}

json MockBackend::send(const json& request, const ExchangeContext& ctx) {
    const std::string text = request_text(request);
    const std::string hash = request_hash(request);
    const bool scoring = request.value("logprobs", false) && request.value("max_tokens", 1) == 0;

    const MockResponse* chosen = nullptr;
    {
        std::lock_guard lock(mu_);
        for (std::size_t ri = 0; ri < script_.rules.size(); ++ri) {
            const auto& r = script_.rules[ri];
            if (r.stage && *r.stage != ctx.stage) continue;
            if (r.image_id && *r.image_id != ctx.image_id) continue;
            if (r.request_hash && *r.request_hash != hash) continue;
            if (r.contains && text.find(*r.contains) == std::string::npos) continue;
            std::string key = std::to_string(ri) + "|" + ctx.stage + "|" + ctx.image_id + "|" + hash;
            std::size_t n = counters_[key]++;
            chosen = &r.responses[std::min(n, r.responses.size() - 1)];
            break;
        }
    }

    if (chosen && chosen->failure) {
        static const char* names[] = {"transport", "rate_limited", "auth", "rejected"};
        throw BackendFailure(*chosen->failure, std::string("scripted ") + names[static_cast<int>(*chosen->failure)] +
                                                   " failure");
    }
    if (scoring) return score(request, chosen);

    auto usage = [&](const std::string& reply) {
        return json{{"prompt_tokens", tokenize(text).size()}, {"completion_tokens", tokenize(reply).size()}};
    };

    if (ctx.stage == "probe" && !chosen) {
        std::string reply = script_.probe_reply ? script_.probe_reply->dump() : json(script_.capabilities).dump();
        json lp = script_.capabilities.supports_logprobs ? json(std::vector<double>(tokenize(reply).size(), -0.1))
                                                         : json(nullptr);
        return json{{"text", reply}, {"token_logprobs", lp}, {"usage", usage(reply)}};
    }

    if (chosen && !chosen->has_text) return json{{"token_logprobs", nullptr}, {"usage", usage("")}};

    std::string reply;
    if (chosen) {
        reply = render(chosen->text, request, ctx);
    } else if (script_.fallback) {
        reply = render(*script_.fallback, request, ctx);
    } else {
        throw BackendFailure(BackendFailure::Kind::rejected,
                             "mock script has no response for stage '" + ctx.stage + "' image '" + ctx.image_id + "'");
    }
    return json{{"text", reply}, {"token_logprobs", nullptr}, {"usage", usage(reply)}};
}

}  // namespace forge
