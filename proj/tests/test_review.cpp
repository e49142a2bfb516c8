#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "forge/review_service.hpp"
#include "forge/taxonomy.hpp"
#include "support.hpp"

using namespace forge;
using namespace forge::testing;

namespace {

Dataset twenty() {
    Dataset d;
    const Partition parts[] = {Partition::replace_att, Partition::replace_obj, Partition::replace_rel};
    for (int i = 0; i < 20; ++i) {
        auto s = make_sample("r" + std::to_string(i), parts[i % 3], "pos " + std::to_string(i), "neg " + std::to_string(i));
        s.image_id = "img" + std::to_string(i % 4);
        d.push_back(s);
    }
    return d;
}

struct ReviewRig {
    TempDir dir{"review"};
    Dataset data = twenty();

    ReviewRig() {
        RunStore store(dir.path());
        RunManifest m;
        m.run_id = "rev";
        m.config = json{{"agents", {{{"name", "remote"}, {"credential_ref", "SECRET_KEY_ENV"}}}}};
        store.init_run(m);
        std::vector<ImageRecord> imgs;
        for (int i = 0; i < 4; ++i) {
            auto path = dir / ("img" + std::to_string(i) + ".png");
            write_file_atomic(path, "\x89PNG-bytes-" + std::to_string(i));
            imgs.push_back({"img" + std::to_string(i), Partition::replace_att, path.string(), ""});
        }
        imgs[3].source_uri = "https://images.example.org/img3.png";
        store.save_images(imgs);
    }

    ReviewService service(ReviewOptions o = {}) { return ReviewService(dir.path(), data, o); }
};

std::string body(const json& j) { return j.dump(); }

}  // namespace

TEST(Review, SessionServesSeededOrder) {
    ReviewRig rig;
    ReviewOptions o;
    o.order_seed = 11;
    auto svc = rig.service(o);
    auto s = svc.create_session(body({{"reviewer_id", "ana"}}));
    ASSERT_EQ(s.status, 201);
    auto sid = s.body["session_id"].get<std::string>();
    EXPECT_EQ(s.body["order_seed"], 11);

    std::vector<std::string> ids;
    for (const auto& d : rig.data) ids.push_back(d.sample_id);
    auto order = serving_order(ids, 11);
    EXPECT_EQ(svc.order(), order);

    for (int i = 0; i < 3; ++i) {
        auto n = svc.next_sample(sid);
        ASSERT_EQ(n.status, 200);
        EXPECT_EQ(n.body["sample"]["sample_id"], order[static_cast<std::size_t>(i)]);
        auto v = svc.post_verdict(body({{"session_id", sid}, {"sample_id", order[static_cast<std::size_t>(i)]}, {"verdict", "valid"}}));
        ASSERT_EQ(v.status, 200) << v.body.dump();
        EXPECT_EQ(v.body["progress"]["n_valid"], i + 1);
    }
}

TEST(Review, PayloadMarksCorrectUnlessBlind) {
    ReviewRig rig;
    auto svc = rig.service();
    auto sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
    auto p = svc.next_sample(sid).body["sample"];
    auto id = p["sample_id"].get<std::string>();
    const CRSample* src = nullptr;
    for (const auto& d : rig.data)
        if (d.sample_id == id) src = &d;
    ASSERT_NE(src, nullptr);
    int correct = 0;
    for (const auto& opt : p["options"]) {
        if (opt["correct"].get<bool>()) {
            ++correct;
            EXPECT_EQ(opt["text"], src->positive);
        }
    }
    EXPECT_EQ(correct, 1);
    EXPECT_EQ(p["image_url"], "/api/images/" + src->image_id);
    EXPECT_TRUE(p.contains("provenance"));

    ReviewOptions blind;
    blind.blind = true;
    auto bsvc = rig.service(blind);
    auto bsid = bsvc.create_session(body({{"reviewer_id", "ben"}})).body["session_id"].get<std::string>();
    for (const auto& opt : bsvc.next_sample(bsid).body["sample"]["options"]) EXPECT_FALSE(opt.contains("correct"));
}

TEST(Review, SkipDefersSample) {
    ReviewRig rig;
    auto svc = rig.service();
    auto sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
    auto first = svc.next_sample(sid).body["sample"]["sample_id"].get<std::string>();
    auto sk = svc.skip(body({{"session_id", sid}, {"sample_id", first}}));
    ASSERT_EQ(sk.status, 200);
    EXPECT_EQ(sk.body["cursor"], 1);
    EXPECT_NE(svc.next_sample(sid).body["sample"]["sample_id"], first);
    // Everything else reviewed: the skipped one comes back.
    for (const auto& id : svc.order())
        if (id != first) svc.post_verdict(body({{"session_id", sid}, {"sample_id", id}, {"verdict", "invalid"}}));
    EXPECT_EQ(svc.next_sample(sid).body["sample"]["sample_id"], first);
}

TEST(Review, RestartResumesAtServerCursor) {
    ReviewRig rig;
    std::string sid;
    std::string fourth;
    {
        auto svc = rig.service();
        sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
        for (int i = 0; i < 3; ++i) {
            auto id = svc.next_sample(sid).body["sample"]["sample_id"].get<std::string>();
            svc.post_verdict(body({{"session_id", sid}, {"sample_id", id}, {"verdict", "valid"}}));
        }
        fourth = svc.next_sample(sid).body["sample"]["sample_id"].get<std::string>();
    }
    auto svc = rig.service();
    auto n = svc.next_sample(sid);
    ASSERT_EQ(n.status, 200);
    EXPECT_EQ(n.body["sample"]["sample_id"], fourth);
    EXPECT_EQ(n.body["cursor"], 3);
}

TEST(Review, DoneWhenTargetReached) {
    ReviewRig rig;
    ReviewOptions o;
    o.target_n = 4;
    auto svc = rig.service(o);
    auto sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
    int served = 0;
    while (true) {
        auto n = svc.next_sample(sid);
        if (n.body["done"].get<bool>()) {
            EXPECT_TRUE(n.body["progress"]["complete"].get<bool>());
            EXPECT_EQ(n.body["stats"]["subset"].size(), 4u);
            break;
        }
        auto id = n.body["sample"]["sample_id"].get<std::string>();
        const char* v = served % 3 == 1 ? "invalid" : "valid";
        svc.post_verdict(body({{"session_id", sid}, {"sample_id", id}, {"verdict", v}}));
        ASSERT_LT(++served, 20);
    }
    EXPECT_EQ(served, 6);  // v i v v i v
}

TEST(Review, BadRequests) {
    ReviewRig rig;
    auto svc = rig.service();
    EXPECT_EQ(svc.create_session("nope").status, 400);
    EXPECT_EQ(svc.create_session(body({{"reviewer", "x"}})).status, 400);
    EXPECT_EQ(svc.next_sample("s-missing").status, 404);
    auto sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
    auto id = rig.data[0].sample_id;
    EXPECT_EQ(svc.post_verdict(body({{"session_id", sid}, {"sample_id", id}, {"verdict", "maybe"}})).status, 400);
    EXPECT_EQ(svc.post_verdict(body({{"session_id", sid}, {"sample_id", "ghost"}, {"verdict", "valid"}})).status, 404);
    EXPECT_EQ(svc.post_verdict(body({{"session_id", sid}, {"reviewer_id", "bob"}, {"sample_id", id}, {"verdict", "valid"}})).status,
              400);
    EXPECT_EQ(svc.post_verdict(body({{"sample_id", id}, {"verdict", "valid"}})).status, 400);
    EXPECT_EQ(svc.post_verdict(body({{"reviewer_id", "carl"}, {"sample_id", id}, {"verdict", "flagged"}, {"note", "blurry"}})).status,
              200);
    EXPECT_EQ(svc.skip(body({{"session_id", sid}})).status, 400);
}

TEST(Review, StatsUseEvalResults) {
    ReviewRig rig;
    std::vector<EvalResult> results;
    for (const auto& s : rig.data) {
        EvalResult r;
        r.sample_id = s.sample_id;
        r.agent_name = "agent-x";
        r.is_correct = s.sample_id.back() % 2 == 0;
        results.push_back(r);
    }
    RunStore store(rig.dir.path());
    std::filesystem::create_directories(store.eval_dir(EvalMode::generate));
    save_eval_results(store.eval_dir(EvalMode::generate) / "results.jsonl", results);
    ReviewOptions o;
    o.target_n = 5;
    auto svc = rig.service(o);
    auto sid = svc.create_session(body({{"reviewer_id", "ana"}})).body["session_id"].get<std::string>();
    for (int i = 0; i < 5; ++i) {
        auto id = svc.next_sample(sid).body["sample"]["sample_id"].get<std::string>();
        svc.post_verdict(body({{"session_id", sid}, {"sample_id", id}, {"verdict", "valid"}}));
    }
    auto st = svc.stats().body;
    EXPECT_TRUE(st["complete"].get<bool>());
    auto direct = verified_subset(rig.data, VerdictLog(store.verdicts_path()).latest_by_sample(), 5, 0, results);
    EXPECT_EQ(st["per_agent"]["agent-x"]["subset_accuracy"], *direct.per_agent["agent-x"].subset_accuracy);
}

TEST(Review, ImagesBytesOrRedirect) {
    ReviewRig rig;
    auto svc = rig.service();
    auto r = svc.image("img1");
    EXPECT_EQ(r.status, 200);
    EXPECT_EQ(r.raw, "\x89PNG-bytes-1");
    EXPECT_EQ(r.content_type, "image/png");
    auto redirect = svc.image("img3");
    EXPECT_EQ(redirect.status, 302);
    EXPECT_EQ(redirect.location, "https://images.example.org/img3.png");
    EXPECT_EQ(svc.image("img9").status, 404);
}

// ---------------------------------------------------------------------------
// over HTTP

namespace {

class Served {
public:
    explicit Served(ReviewService& svc) {
        svc.bind(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~Served() {
        server_.stop();
        thread_.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST(ReviewHttp, TokenRequiredAndRoundTrip) {
    ReviewRig rig;
    ReviewOptions o;
    o.token = "review-token";
    auto svc = rig.service(o);
    Served served(svc);
    auto cli = served.client();

    auto denied = cli.Post("/api/sessions", body({{"reviewer_id", "ana"}}), "application/json");
    ASSERT_TRUE(denied);
    EXPECT_EQ(denied->status, 401);

    cli.set_bearer_token_auth("review-token");
    auto s = cli.Post("/api/sessions", body({{"reviewer_id", "ana"}}), "application/json");
    ASSERT_TRUE(s);
    EXPECT_EQ(s->status, 201);
    auto sid = json::parse(s->body)["session_id"].get<std::string>();
    auto n = cli.Get(("/api/samples/next?session=" + sid).c_str());
    ASSERT_TRUE(n);
    auto sample = json::parse(n->body)["sample"];
    auto v = cli.Post("/api/verdicts", body({{"session_id", sid}, {"sample_id", sample["sample_id"]}, {"verdict", "valid"}}),
                      "application/json");
    ASSERT_TRUE(v);
    EXPECT_EQ(v->status, 200);
    auto img = cli.Get(sample["image_url"].get<std::string>().c_str());
    ASSERT_TRUE(img);
    EXPECT_EQ(img->status, 200);
    EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
    auto st = cli.Get("/api/stats");
    ASSERT_TRUE(st);
    EXPECT_EQ(json::parse(st->body)["n_valid"], 1);
}

TEST(ReviewHttp, NeverLeaksCredentialsOrJudgePrompts) {
    ReviewRig rig;
    // Judge output sitting in the run directory.
    RunStore store(rig.dir.path());
    std::filesystem::create_directories(store.analysis_dir("error_category"));
    auto prompt = judge_prompt(error_category_taxonomy(), rig.data[0]);
    write_file_atomic(store.analysis_dir("error_category") / "labels.jsonl",
                      json{{"sample_id", rig.data[0].sample_id}, {"raw_judgment", {prompt}}}.dump() + "\n");
    auto svc = rig.service();
    Served served(svc);
    auto cli = served.client();
    std::string everything;
    auto s = cli.Post("/api/sessions", body({{"reviewer_id", "ana"}}), "application/json");
    everything += s->body;
    auto sid = json::parse(s->body)["session_id"].get<std::string>();
    for (int i = 0; i < 20; ++i) {
        auto n = cli.Get(("/api/samples/next?session=" + sid).c_str());
        everything += n->body;
        auto j = json::parse(n->body);
        if (j["done"].get<bool>()) break;
        auto v = cli.Post("/api/verdicts", body({{"session_id", sid}, {"sample_id", j["sample"]["sample_id"]}, {"verdict", "valid"}}),
                          "application/json");
        everything += v->body;
    }
    everything += cli.Get("/api/stats")->body;
    EXPECT_EQ(everything.find("SECRET_KEY_ENV"), std::string::npos);
    EXPECT_EQ(everything.find("credential"), std::string::npos);
    EXPECT_EQ(everything.find("Reply with"), std::string::npos);
    EXPECT_EQ(everything.find("raw_judgment"), std::string::npos);
}
