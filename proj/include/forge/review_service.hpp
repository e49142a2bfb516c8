#pragma once

// JSON-over-HTTP API for the manual verification workflow.
//
//   POST /api/sessions            {reviewer_id}            -> session
//   GET  /api/samples/next?session=<id>                    -> next sample or {done:true, ...}
//   POST /api/samples/skip        {session_id, sample_id}  -> session
//   POST /api/verdicts            {session_id?, sample_id, reviewer_id, verdict, note?} -> ack + progress
//   GET  /api/stats                                        -> verified-subset progress and per-agent accuracy
//   GET  /api/images/<image_id>                            -> image bytes
//
// All state lives in the run directory (sessions.jsonl, verdicts.jsonl), so a
// restarted service picks up where it stopped.

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forge/store.hpp"

namespace httplib {
class Server;
}

namespace forge {

struct ReviewOptions {
    std::uint64_t order_seed = 0;
    std::size_t target_n = 1000;
    bool blind = false;                        // hide which option is correct
    std::optional<std::string> token;          // shared bearer token for /api
    std::optional<std::filesystem::path> static_dir;
    std::optional<EvalMode> stats_mode = EvalMode::generate;  // eval results used by /api/stats
};

struct ReviewSession {
    std::string session_id;
    std::string reviewer_id;
    std::string run_id;
    std::uint64_t order_seed = 0;
    std::size_t cursor = 0;
};

void to_json(json& j, const ReviewSession& s);

struct HttpReply {
    int status = 200;
    json body;
    std::string raw;           // non-JSON body (images)
    std::string content_type;  // set with `raw`
    std::string location;      // redirects
};

class ReviewService {
public:
    /// Reviews the run's exported benchmark.
    ReviewService(std::filesystem::path run_dir, ReviewOptions options);
    ReviewService(std::filesystem::path run_dir, Dataset dataset, ReviewOptions options);

    HttpReply create_session(const std::string& body);
    HttpReply next_sample(const std::string& session_id);
    HttpReply skip(const std::string& body);
    HttpReply post_verdict(const std::string& body);
    HttpReply stats();
    HttpReply image(const std::string& image_id);

    bool authorized(const std::string& authorization_header) const;

    /// Registers every route (and the static mount) on `server`.
    void bind(httplib::Server& server);

    const std::vector<std::string>& order() const { return order_; }

private:
    struct SessionState {
        ReviewSession info;
        std::vector<std::string> skipped;
    };

    void load_sessions();
    std::optional<std::size_t> cursor_for(const SessionState& s,
                                          const std::map<std::pair<std::string, std::string>, ReviewVerdict>& mine) const;
    json progress() const;
    json sample_payload(const CRSample& s) const;
    std::size_t target() const;

    RunStore store_;
    ReviewOptions options_;
    std::string run_id_;
    Dataset dataset_;
    std::map<std::string, std::size_t> index_;  // sample_id -> dataset position
    std::vector<std::string> order_;
    std::map<std::string, ImageRecord> images_;
    VerdictLog verdicts_;
    std::map<std::string, SessionState> sessions_;
    mutable std::mutex mu_;
};

/// Blocks serving on host:port until the server is stopped.
void serve_review(ReviewService& service, const std::string& host, int port);

}  // namespace forge
