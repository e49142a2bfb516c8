#include "forge/review_service.hpp"

#include <httplib.h>

#include <set>

#include "forge/error.hpp"
#include "forge/gateway.hpp"

namespace forge {

void to_json(json& j, const ReviewSession& s) {
    j = json{{"session_id", s.session_id},
             {"reviewer_id", s.reviewer_id},
             {"run_id", s.run_id},
             {"order_seed", s.order_seed},
             {"cursor", s.cursor}};
}

namespace {

HttpReply error_reply(int status, const std::string& message) { return HttpReply{status, json{{"error", message}}, {}, {}, {}}; }

std::optional<json> parse_body(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    return j;
}

std::optional<std::string> string_field(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) return std::nullopt;
    return j[key].get<std::string>();
}

Dataset load_run_dataset(const std::filesystem::path& run_dir) {
    RunStore store(run_dir);
    auto path = store.export_dir() / "benchmark.jsonl";
    if (!std::filesystem::exists(path)) throw ConfigError("run has no benchmark export: " + path.string());
    auto imported = import_benchmark(path);
    if (!imported.errors.empty())
        throw StorageError(path.string() + ":" + std::to_string(imported.errors.front().line) + ": " +
                           imported.errors.front().message);
    return imported.dataset;
}

}  // namespace

ReviewService::ReviewService(std::filesystem::path run_dir, ReviewOptions options)
    : ReviewService(run_dir, load_run_dataset(run_dir), std::move(options)) {}

ReviewService::ReviewService(std::filesystem::path run_dir, Dataset dataset, ReviewOptions options)
    : store_(run_dir), options_(std::move(options)), dataset_(std::move(dataset)), verdicts_(store_.verdicts_path()) {
    if (auto m = store_.load_manifest()) run_id_ = m->run_id;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < dataset_.size(); ++i) {
        index_[dataset_[i].sample_id] = i;
        ids.push_back(dataset_[i].sample_id);
    }
    order_ = serving_order(ids, options_.order_seed);
    if (std::filesystem::exists(store_.images_path()))
        for (const auto& r : store_.load_images()) images_[r.image_id] = r;
    load_sessions();
}

std::size_t ReviewService::target() const { return std::min(options_.target_n, dataset_.size()); }

void ReviewService::load_sessions() {
    if (!std::filesystem::exists(store_.sessions_path())) return;
    for (const auto& j : read_jsonl(store_.sessions_path())) {
        const auto event = j.value("event", "");
        const auto id = j.value("session_id", "");
        if (event == "open") {
            SessionState s;
            s.info.session_id = id;
            s.info.reviewer_id = j.value("reviewer_id", "");
            s.info.run_id = j.value("run_id", "");
            s.info.order_seed = j.value("order_seed", std::uint64_t{0});
            sessions_[id] = s;
        } else if (event == "skip" && sessions_.count(id)) {
            sessions_[id].skipped.push_back(j.value("sample_id", ""));
        }
    }
}

bool ReviewService::authorized(const std::string& header) const {
    if (!options_.token) return true;
    return header == "Bearer " + *options_.token;
}

std::optional<std::size_t> ReviewService::cursor_for(
    const SessionState& s, const std::map<std::pair<std::string, std::string>, ReviewVerdict>& mine) const {
    std::set<std::string> skipped(s.skipped.begin(), s.skipped.end());
    auto reviewed = [&](const std::string& id) { return mine.count({id, s.info.reviewer_id}) > 0; };
    for (std::size_t i = 0; i < order_.size(); ++i)
        if (!reviewed(order_[i]) && !skipped.count(order_[i])) return i;
    // Skipped samples come back once everything else has been seen.
    for (std::size_t i = 0; i < order_.size(); ++i)
        if (!reviewed(order_[i])) return i;
    return std::nullopt;
}

json ReviewService::progress() const {
    auto r = verified_subset(dataset_, verdicts_.latest_by_sample(), target(), options_.order_seed);
    return json{{"n_valid", r.n_valid},   {"n_invalid", r.n_invalid}, {"n_flagged", r.n_flagged},
                {"target", r.target},     {"served", r.served},       {"complete", r.complete},
                {"total", dataset_.size()}};
}

json ReviewService::sample_payload(const CRSample& s) const {
    const auto mcq = make_mcq(s, static_cast<std::int64_t>(options_.order_seed));
    json a{{"letter", "A"}, {"text", mcq.option_a}};
    json b{{"letter", "B"}, {"text", mcq.option_b}};
    if (!options_.blind) {
        a["correct"] = mcq.correct_letter == Letter::A;
        b["correct"] = mcq.correct_letter == Letter::B;
    }
    return json{{"sample_id", s.sample_id},
                {"image_id", s.image_id},
                {"image_url", "/api/images/" + s.image_id},
                {"partition", to_string(s.partition)},
                {"iteration", s.iteration},
                {"question", s.question_text},
                {"options", json::array({a, b})},
                {"provenance", s.provenance}};
}

HttpReply ReviewService::create_session(const std::string& body) {
    auto j = parse_body(body);
    if (!j) return error_reply(400, "body must be a JSON object");
    auto reviewer = string_field(*j, "reviewer_id");
    if (!reviewer) return error_reply(400, "reviewer_id is required");

    std::lock_guard lock(mu_);
    SessionState s;
    s.info.reviewer_id = *reviewer;
    s.info.run_id = run_id_;
    s.info.order_seed = options_.order_seed;
    s.info.session_id =
        "s-" + hex64(fnv1a64(*reviewer + "#" + std::to_string(sessions_.size()), options_.order_seed)).substr(0, 12);
    append_line(store_.sessions_path(), json{{"event", "open"},
                                             {"session_id", s.info.session_id},
                                             {"reviewer_id", s.info.reviewer_id},
                                             {"run_id", s.info.run_id},
                                             {"order_seed", s.info.order_seed}}
                                            .dump());
    sessions_[s.info.session_id] = s;
    auto mine = verdicts_.latest_by_reviewer();
    s.info.cursor = cursor_for(s, mine).value_or(order_.size());
    return HttpReply{201, s.info, {}, {}, {}};
}

HttpReply ReviewService::next_sample(const std::string& session_id) {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return error_reply(404, "unknown session '" + session_id + "'");
    auto prog = progress();
    auto cursor = cursor_for(it->second, verdicts_.latest_by_reviewer());
    if (prog["complete"].get<bool>() || !cursor) {
        auto st = verified_subset(dataset_, verdicts_.latest_by_sample(), target(), options_.order_seed);
        return HttpReply{200, json{{"done", true}, {"session_id", session_id}, {"progress", prog}, {"stats", st}}, {}, {}, {}};
    }
    it->second.info.cursor = *cursor;
    const auto& sample = dataset_[index_.at(order_[*cursor])];
    return HttpReply{200,
                     json{{"done", false},
                          {"session_id", session_id},
                          {"cursor", *cursor},
                          {"sample", sample_payload(sample)},
                          {"progress", prog}},
                     {}, {}, {}};
}

HttpReply ReviewService::skip(const std::string& body) {
    auto j = parse_body(body);
    if (!j) return error_reply(400, "body must be a JSON object");
    auto sid = string_field(*j, "session_id");
    auto sample = string_field(*j, "sample_id");
    if (!sid || !sample) return error_reply(400, "session_id and sample_id are required");

    std::lock_guard lock(mu_);
    auto it = sessions_.find(*sid);
    if (it == sessions_.end()) return error_reply(404, "unknown session '" + *sid + "'");
    if (!index_.count(*sample)) return error_reply(404, "unknown sample '" + *sample + "'");
    append_line(store_.sessions_path(),
                json{{"event", "skip"}, {"session_id", *sid}, {"sample_id", *sample}}.dump());
    it->second.skipped.push_back(*sample);
    it->second.info.cursor = cursor_for(it->second, verdicts_.latest_by_reviewer()).value_or(order_.size());
    return HttpReply{200, it->second.info, {}, {}, {}};
}

HttpReply ReviewService::post_verdict(const std::string& body) {
    auto j = parse_body(body);
    if (!j) return error_reply(400, "body must be a JSON object");
    auto sample = string_field(*j, "sample_id");
    auto verdict_name = string_field(*j, "verdict");
    if (!sample || !verdict_name) return error_reply(400, "sample_id and verdict are required");
    if (j->contains("note") && !(*j)["note"].is_string() && !(*j)["note"].is_null())
        return error_reply(400, "note must be a string");

    std::lock_guard lock(mu_);
    std::optional<std::string> reviewer = string_field(*j, "reviewer_id");
    if (auto sid = string_field(*j, "session_id")) {
        auto it = sessions_.find(*sid);
        if (it == sessions_.end()) return error_reply(404, "unknown session '" + *sid + "'");
        if (reviewer && *reviewer != it->second.info.reviewer_id)
            return error_reply(400, "reviewer_id does not match the session");
        reviewer = it->second.info.reviewer_id;
    }
    if (!reviewer) return error_reply(400, "reviewer_id or session_id is required");
    if (!index_.count(*sample)) return error_reply(404, "unknown sample '" + *sample + "'");

    ReviewVerdict v;
    try {
        v.verdict = parse_verdict(*verdict_name);
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
    v.sample_id = *sample;
    v.reviewer_id = *reviewer;
    if (j->contains("note") && (*j)["note"].is_string()) v.note = (*j)["note"].get<std::string>();
    verdicts_.record(v);
    for (auto& [_, s] : sessions_)
        if (s.info.reviewer_id == v.reviewer_id)
            s.info.cursor = cursor_for(s, verdicts_.latest_by_reviewer()).value_or(order_.size());
    return HttpReply{200, json{{"ok", true}, {"sample_id", v.sample_id}, {"verdict", to_string(v.verdict)},
                               {"progress", progress()}},
                     {}, {}, {}};
}

HttpReply ReviewService::stats() {
    std::lock_guard lock(mu_);
    std::vector<EvalResult> results;
    if (options_.stats_mode) {
        auto path = store_.eval_dir(*options_.stats_mode) / "results.jsonl";
        if (std::filesystem::exists(path)) results = load_eval_results(path);
    }
    auto r = verified_subset(dataset_, verdicts_.latest_by_sample(), target(), options_.order_seed, results);
    json body = r;
    body["total"] = dataset_.size();
    body["mode"] = options_.stats_mode ? json(to_string(*options_.stats_mode)) : json(nullptr);
    return HttpReply{200, body, {}, {}, {}};
}

HttpReply ReviewService::image(const std::string& image_id) {
    auto it = images_.find(image_id);
    if (it == images_.end()) return error_reply(404, "unknown image '" + image_id + "'");
    const auto& uri = it->second.source_uri;
    if (uri.rfind("http://", 0) == 0 || uri.rfind("https://", 0) == 0) {
        HttpReply r;
        r.status = 302;
        r.location = uri;
        return r;
    }
    if (!std::filesystem::exists(uri)) return error_reply(404, "image file missing for '" + image_id + "'");
    HttpReply r;
    r.raw = read_file(uri);
    r.content_type = media_type_for(uri);
    return r;
}

void ReviewService::bind(httplib::Server& server) {
    auto send = [](httplib::Response& res, const HttpReply& r) {
        res.status = r.status;
        if (!r.location.empty()) {
            res.set_header("Location", r.location);
            return;
        }
        if (!r.content_type.empty())
            res.set_content(r.raw, r.content_type);
        else
            res.set_content(r.body.dump(), "application/json");
    };
    auto guarded = [this, send](auto handler) {
        return [this, send, handler](const httplib::Request& req, httplib::Response& res) {
            if (!authorized(req.get_header_value("Authorization"))) {
                send(res, error_reply(401, "missing or wrong bearer token"));
                return;
            }
            try {
                send(res, handler(req));
            } catch (const std::exception& e) {
                send(res, error_reply(500, e.what()));
            }
        };
    };

    server.Post("/api/sessions", guarded([this](const httplib::Request& req) { return create_session(req.body); }));
    server.Get("/api/samples/next", guarded([this](const httplib::Request& req) {
                   return next_sample(req.get_param_value("session"));
               }));
    server.Post("/api/samples/skip", guarded([this](const httplib::Request& req) { return skip(req.body); }));
    server.Post("/api/verdicts", guarded([this](const httplib::Request& req) { return post_verdict(req.body); }));
    server.Get("/api/stats", guarded([this](const httplib::Request&) { return stats(); }));
    server.Get(R"(/api/images/([^/]+))",
               guarded([this](const httplib::Request& req) { return image(req.matches[1].str()); }));
    if (options_.static_dir && std::filesystem::is_directory(*options_.static_dir))
        server.set_mount_point("/", options_.static_dir->string());
}

void serve_review(ReviewService& service, const std::string& host, int port) {
    httplib::Server server;
    service.bind(server);
    if (!server.listen(host, port)) throw StorageError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace forge
