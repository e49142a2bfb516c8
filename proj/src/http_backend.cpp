#include <cstdlib>
#include <regex>

#include <httplib.h>

#include "forge/error.hpp"
#include "forge/gateway.hpp"

namespace forge {

HttpBackend::HttpBackend(AgentProfile profile, int timeout_seconds)
    : profile_(std::move(profile)), timeout_seconds_(timeout_seconds) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(profile_.endpoint, m, url_re))
        throw ConfigError("agent '" + profile_.name + "' endpoint is not an http(s) URL: " + profile_.endpoint);
    base_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/";
}

json HttpBackend::send(const json& request, const ExchangeContext&) {
    const char* token = std::getenv(profile_.credential_ref.c_str());
    if (!token || !*token)
        throw BackendFailure(BackendFailure::Kind::auth,
                             "environment variable " + profile_.credential_ref + " is not set");

    httplib::Client cli(base_);
    cli.set_connection_timeout(timeout_seconds_, 0);
    cli.set_read_timeout(timeout_seconds_, 0);
    cli.set_write_timeout(timeout_seconds_, 0);
    cli.set_bearer_token_auth(token);

    auto res = cli.Post(path_, request.dump(), "application/json");
    if (!res) throw BackendFailure(BackendFailure::Kind::transport, httplib::to_string(res.error()));

    const int status = res->status;
    if (status == 401 || status == 403)
        throw BackendFailure(BackendFailure::Kind::auth, "HTTP " + std::to_string(status));
    if (status == 429) throw BackendFailure(BackendFailure::Kind::rate_limited, "HTTP 429");
    if (status >= 500) throw BackendFailure(BackendFailure::Kind::transport, "HTTP " + std::to_string(status));
    if (status != 200) throw BackendFailure(BackendFailure::Kind::rejected, "HTTP " + std::to_string(status));

    json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded()) throw BackendFailure(BackendFailure::Kind::rejected, "response body is not JSON");
    return body;
}

}  // namespace forge
