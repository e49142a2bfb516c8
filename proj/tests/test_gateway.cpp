#include <cstdlib>
#include <numeric>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "forge/error.hpp"
#include "forge/gateway.hpp"
#include "support.hpp"

using namespace forge;
using namespace forge::testing;

namespace {

ChatRequest user(const std::string& text, std::optional<ImagePayload> image = {}) {
    ChatRequest r;
    r.messages = {{"user", text}};
    r.image = std::move(image);
    return r;
}

ImagePayload tiny_image(const std::string& id) {
    ImagePayload p;
    p.image_id = id;
    p.media_type = "image/png";
    p.bytes = std::string("\x89PNG fake bytes for ", 20) + id;
    return p;
}

struct MockFixture {
    TempDir dir{"gw"};
    MemoryExchangeSink sink;
    std::vector<std::chrono::milliseconds> sleeps;

    std::unique_ptr<Gateway> gateway(const json& script, int budget = 3, AgentRole role = AgentRole::downstream) {
        auto path = write_json(dir / "agent.json", script);
        auto opts = fast_options(&sink);
        opts.retry.budget = budget;
        opts.retry.base_delay_ms = 100;
        opts.retry.max_delay_ms = 250;
        opts.sleeper = [this](std::chrono::milliseconds d) { sleeps.push_back(d); };
        return std::make_unique<Gateway>(std::vector<AgentProfile>{mock_profile("m", role, path)}, opts);
    }
};

constexpr const char* kSecretLike = "sk-live-0a1b2c3d";

}  // namespace

TEST(Gateway, MockEchoesImageId) {
    MockFixture f;
    auto gw = f.gateway({{"rules", {{{"stage", "stage1"}, {"response", "DESC:{image_id}"}}}}});
    ExchangeContext ctx{"stage1", "img_042", "", nullptr};
    EXPECT_EQ(gw->generate("m", user("describe", tiny_image("img_042")), ctx), "DESC:img_042");
    auto recs = f.sink.records();
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].outcome, "ok");
    EXPECT_EQ(recs[0].image_id, "img_042");
    EXPECT_EQ(recs[0].attempts, 1);
}

TEST(Gateway, EmptyMessageListIsPreconditionWithoutCall) {
    MockFixture f;
    auto gw = f.gateway({{"fallback", "x"}});
    std::atomic<int> calls{0};
    gw->set_backend("m", std::make_unique<FnBackend>([](const json&, const ExchangeContext&) { return text_reply("x"); },
                                                     &calls));
    ChatRequest empty;
    EXPECT_THROW(gw->generate("m", empty), PreconditionError);
    EXPECT_EQ(calls.load(), 0);
    EXPECT_TRUE(f.sink.records().empty());
}

TEST(Gateway, OversizedTextAndBadParamsArePreconditions) {
    MockFixture f;
    auto gw = f.gateway({{"fallback", "x"}});
    EXPECT_THROW(gw->generate("m", user(std::string(300000, 'a'))), PreconditionError);
    auto req = user("hi");
    req.gen_params.top_p = 1.5;
    EXPECT_THROW(gw->generate("m", req), PreconditionError);
    req = user("hi");
    req.messages[0].role = "tool";
    EXPECT_THROW(gw->generate("m", req), PreconditionError);
}

TEST(Gateway, TwoTransportFailuresThenSuccess) {
    json script{{"rules",
                 {{{"stage", "stage1"},
                   {"responses", {{{"fail", "transport"}}, {{"fail", "transport"}}, "DESC:{image_id}"}}}}}};
    // Oracle: attempts = scripted failures before the first success + 1.
    int failures_before_success = 0;
    for (const auto& r : script["rules"][0]["responses"]) {
        if (r.is_object() && r.contains("fail")) ++failures_before_success;
        else break;
    }
    MockFixture f;
    auto gw = f.gateway(script, 3);
    ExchangeContext ctx{"stage1", "img_7", "", nullptr};
    EXPECT_EQ(gw->generate("m", user("describe", tiny_image("img_7")), ctx), "DESC:img_7");
    auto recs = f.sink.records();
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].attempts, failures_before_success + 1);
    EXPECT_EQ(json(recs[0])["retries"], 2);
    EXPECT_EQ(f.sleeps, (std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(100),
                                                                std::chrono::milliseconds(200)}));
}

TEST(Gateway, RetryBudgetExhausted) {
    MockFixture f;
    auto gw = f.gateway({{"rules", {{{"response", {{"fail", "rate_limit"}}}}}}}, 2);
    try {
        gw->generate("m", user("hi"));
        FAIL() << "expected DispatchError";
    } catch (const DispatchError& e) {
        EXPECT_EQ(e.attempts(), 3);
    }
    auto recs = f.sink.records();
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].outcome, "error");
    EXPECT_EQ(recs[0].attempts, 3);
    EXPECT_EQ(f.sleeps.size(), 2u);
}

TEST(Gateway, AuthFailureIsConfigErrorWithoutRetry) {
    MockFixture f;
    auto gw = f.gateway({{"rules", {{{"response", {{"fail", "auth"}}}}}}});
    EXPECT_THROW(gw->generate("m", user("hi")), ConfigError);
    EXPECT_EQ(f.sink.records().at(0).attempts, 1);
    EXPECT_TRUE(f.sleeps.empty());
}

TEST(Gateway, MissingTextIsProtocolError) {
    MockFixture f;
    auto gw = f.gateway({{"rules", {{{"response", {{"fail", "missing_text"}}}}}}});
    EXPECT_THROW(gw->generate("m", user("hi")), ProtocolError);
    EXPECT_EQ(f.sink.records().at(0).outcome, "error");
}

TEST(Gateway, RecordsRedactImageBytesAndKeepFullParams) {
    MockFixture f;
    auto path = write_json(f.dir / "a.json", {{"fallback", "ok"}});
    auto p = mock_profile("m", AgentRole::downstream, path);
    p.unsupported_params = {"num_beams", "length_penalty"};
    Gateway gw({p}, fast_options(&f.sink));
    auto req = user("look", tiny_image("i1"));
    req.gen_params.num_beams = 5;
    gw.generate("m", req);
    auto rec = f.sink.records().at(0);
    const auto& extra = rec.request["extra_params"];
    EXPECT_FALSE(extra.contains("num_beams"));
    EXPECT_FALSE(extra.contains("length_penalty"));
    EXPECT_EQ(rec.gen_params["num_beams"], 5);
    const auto& img = rec.request["messages"][0]["content"][0];
    EXPECT_EQ(img["type"], "image");
    EXPECT_FALSE(img.contains("data_b64"));
    EXPECT_EQ(img["sha256"], sha256_hex(tiny_image("i1").bytes));
}

TEST(Gateway, ScoreConstantLogprobs) {
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", true}}}, {"logprobs", {{"default", -1.0}}}});
    auto s = gw->score_continuation("m", std::nullopt, "Q: what?", "red car");
    EXPECT_EQ(s.token_count, 2);
    EXPECT_EQ(s.token_logprobs, (std::vector<double>{-1.0, -1.0}));
    EXPECT_EQ(s.continuation_text, "red car");
    EXPECT_THROW(gw->score_continuation("m", std::nullopt, "Q", ""), PreconditionError);
}

TEST(Gateway, ScoreTableMeanMatchesIndependentSum) {
    std::map<std::string, double> table{{"a", -0.5}, {"large", -2.25}, {"dog", -1.125}};
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", true}}}, {"logprobs", {{"table", table}}}});
    auto s = gw->score_continuation("m", std::nullopt, "prefix", "a large dog");
    double sum = 0;
    for (const char* w : {"a", "large", "dog"}) sum += table[w];
    double mean_nll = -std::accumulate(s.token_logprobs.begin(), s.token_logprobs.end(), 0.0) / s.token_count;
    EXPECT_DOUBLE_EQ(mean_nll, -sum / 3.0);
}

TEST(Gateway, ScoreWithoutLogprobsIsCapabilityError) {
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", false}}}});
    EXPECT_THROW(gw->score_continuation("m", std::nullopt, "p", "red"), CapabilityError);
}

TEST(Gateway, ScoreThatCannotIsolateContinuationIsScoringError) {
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", true}}},
                         {"rules", {{{"stage", "eval"}, {"response", {{"text", "Q: p red"}}}}}}});
    ExchangeContext ctx{"eval", "", "", nullptr};
    EXPECT_THROW(gw->score_continuation("m", std::nullopt, "Q: p", "red", ctx), ScoringError);
}

TEST(Gateway, PositiveLogprobIsProtocolError) {
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", true}}},
                         {"rules", {{{"stage", "eval"}, {"response", {{"logprobs", {0.5}}}}}}}});
    ExchangeContext ctx{"eval", "", "", nullptr};
    EXPECT_THROW(gw->score_continuation("m", std::nullopt, "p", "red", ctx), ProtocolError);
}

TEST(Gateway, ProbeDeclaredNoLogprobs) {
    MockFixture f;
    auto gw = f.gateway({{"capabilities", {{"supports_logprobs", false}, {"supports_images", true}}}});
    EXPECT_FALSE(gw->probe_capabilities("m").supports_logprobs);
}

TEST(Gateway, ProbeMatchesScriptAndIsCached) {
    json caps{{"supports_images", false}, {"supports_logprobs", true}, {"max_context", 1234}};
    MockFixture f;
    auto gw = f.gateway({{"capabilities", caps}});
    auto got = gw->probe_capabilities("m");
    EXPECT_EQ(got, caps.get<CapabilitySet>());
    gw->probe_capabilities("m");
    EXPECT_EQ(f.sink.records().size(), 1u);
    EXPECT_EQ(f.sink.records()[0].call, "probe");
}

TEST(Gateway, ProbeOverridesSkipTheCall) {
    TempDir dir;
    auto p = mock_profile("m", AgentRole::downstream, write_json(dir / "s.json", {{"fallback", "x"}}));
    p.capability_overrides = CapabilitySet{false, true, 99};
    std::atomic<int> calls{0};
    Gateway gw({p}, fast_options());
    gw.set_backend("m", std::make_unique<FnBackend>([](const json&, const ExchangeContext&) { return text_reply("{}"); },
                                                    &calls));
    EXPECT_EQ(gw.probe_capabilities("m"), (CapabilitySet{false, true, 99}));
    EXPECT_EQ(calls.load(), 0);
}

TEST(Gateway, UnknownAgentIsConfigError) {
    MockFixture f;
    auto gw = f.gateway({{"fallback", "x"}});
    EXPECT_THROW(gw->generate("nobody", user("hi")), ConfigError);
}

TEST(Gateway, ProfileValidation) {
    AgentProfile p;
    p.name = "r";
    p.kind = AgentKind::remote;
    p.endpoint = "http://localhost:1/v1";
    EXPECT_THROW(p.validate(), ConfigError);  // no credential_ref
    p.credential_ref = kSecretLike;
    EXPECT_THROW(p.validate(), ConfigError);
    p.credential_ref = "SOME_ENV";
    EXPECT_NO_THROW(p.validate());
    auto q = p;
    EXPECT_THROW(validate_profiles({p, q}), ConfigError);
}

TEST(Gateway, RetryDelaysAreCapped) {
    RetryPolicy r;
    r.base_delay_ms = 100;
    r.max_delay_ms = 1000;
    EXPECT_EQ(r.delay_for(0).count(), 100);
    EXPECT_EQ(r.delay_for(3).count(), 800);
    EXPECT_EQ(r.delay_for(4).count(), 1000);
}

// ---------------------------------------------------------------------------
// remote backend against a local server

namespace {

class LocalServer {
public:
    explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat", [handler](const httplib::Request& req, httplib::Response& res) { handler(req, res); });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat"; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

AgentProfile remote_profile(const std::string& endpoint, const std::string& env) {
    AgentProfile p;
    p.name = "remote";
    p.kind = AgentKind::remote;
    p.endpoint = endpoint;
    p.credential_ref = env;
    p.model_id = "m-1";
    return p;
}

constexpr const char* kSecret = "sk-test-3f9a7c1e55d0";

}  // namespace

TEST(HttpBackend, SendsBearerTokenAndNeverPersistsIt) {
    std::string seen_auth;
    json seen_body;
    LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = json::parse(req.body);
        res.set_content(text_reply("remote says hi").dump(), "application/json");
    });
    ::setenv("FORGE_TEST_TOKEN", kSecret, 1);
    TempDir dir;
    JsonlExchangeSink sink(dir / "exchanges.jsonl");
    auto profile = remote_profile(server.endpoint(), "FORGE_TEST_TOKEN");
    Gateway gw({profile}, fast_options(&sink));
    EXPECT_EQ(gw.generate("remote", user("hello", tiny_image("i9"))), "remote says hi");
    EXPECT_EQ(seen_auth, std::string("Bearer ") + kSecret);
    EXPECT_EQ(seen_body["model"], "m-1");
    EXPECT_EQ(seen_body["messages"][0]["content"][0]["data_b64"], base64_encode(tiny_image("i9").bytes));

    std::string log = read_file(sink.path());
    EXPECT_EQ(log.find(kSecret), std::string::npos);
    EXPECT_EQ(json(profile)["credential_ref"], "FORGE_TEST_TOKEN");
    EXPECT_EQ(json(profile).dump().find(kSecret), std::string::npos);
}

TEST(HttpBackend, UnauthorizedIsConfigError) {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 401;
    });
    ::setenv("FORGE_TEST_TOKEN", kSecret, 1);
    Gateway gw({remote_profile(server.endpoint(), "FORGE_TEST_TOKEN")}, fast_options());
    EXPECT_THROW(gw.generate("remote", user("hi")), ConfigError);
    EXPECT_EQ(hits.load(), 1);
}

TEST(HttpBackend, MissingCredentialIsConfigError) {
    LocalServer server([&](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
    ::unsetenv("FORGE_TEST_UNSET");
    Gateway gw({remote_profile(server.endpoint(), "FORGE_TEST_UNSET")}, fast_options());
    EXPECT_THROW(gw.generate("remote", user("hi")), ConfigError);
}

TEST(HttpBackend, RateLimitIsRetried) {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request&, httplib::Response& res) {
        if (hits++ < 2) {
            res.status = 429;
            return;
        }
        res.set_content(text_reply("finally").dump(), "application/json");
    });
    ::setenv("FORGE_TEST_TOKEN", kSecret, 1);
    MemoryExchangeSink sink;
    Gateway gw({remote_profile(server.endpoint(), "FORGE_TEST_TOKEN")}, fast_options(&sink));
    EXPECT_EQ(gw.generate("remote", user("hi")), "finally");
    EXPECT_EQ(hits.load(), 3);
    EXPECT_EQ(sink.records().at(0).attempts, 3);
}

TEST(HttpBackend, ServerErrorsExhaustBudget) {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 503;
    });
    ::setenv("FORGE_TEST_TOKEN", kSecret, 1);
    auto opts = fast_options();
    opts.retry.budget = 1;
    Gateway gw({remote_profile(server.endpoint(), "FORGE_TEST_TOKEN")}, opts);
    EXPECT_THROW(gw.generate("remote", user("hi")), DispatchError);
    EXPECT_EQ(hits.load(), 2);
}

TEST(HttpBackend, UnreachableIsDispatchError) {
    ::setenv("FORGE_TEST_TOKEN", kSecret, 1);
    auto opts = fast_options();
    opts.retry.budget = 0;
    opts.http_timeout_seconds = 2;
    Gateway gw({remote_profile("http://127.0.0.1:1/v1", "FORGE_TEST_TOKEN")}, opts);
    EXPECT_THROW(gw.probe_capabilities("remote"), DispatchError);
}
