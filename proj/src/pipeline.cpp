#include <set>

#include "forge/error.hpp"
#include "forge/pipeline.hpp"

namespace forge {

std::string to_string(SampleFate f) {
    switch (f) {
        case SampleFate::kept: return "kept";
        case SampleFate::discarded: return "discarded";
        case SampleFate::indeterminate: return "indeterminate";
    }
    return "indeterminate";
}

namespace {

SampleFate parse_fate(const std::string& s) {
    if (s == "kept") return SampleFate::kept;
    if (s == "discarded") return SampleFate::discarded;
    if (s == "indeterminate") return SampleFate::indeterminate;
    throw PreconditionError("unknown sample fate '" + s + "'");
}

std::optional<double> pct(std::size_t correct, std::size_t n) {
    if (n == 0) return std::nullopt;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::optional<double> AgentFilterStats::pre_accuracy() const { return pct(pre_correct, pre_n); }
std::optional<double> AgentFilterStats::post_accuracy() const { return pct(post_correct, post_n); }

AgentFilterStats& AgentFilterStats::operator+=(const AgentFilterStats& o) {
    pre_n += o.pre_n;
    pre_correct += o.pre_correct;
    post_n += o.post_n;
    post_correct += o.post_correct;
    return *this;
}

void to_json(json& j, const FilterOutcome& f) {
    json fate = json::object();
    for (const auto& [id, v] : f.fate) fate[id] = to_string(v);
    json agents = json::object();
    for (const auto& [name, s] : f.per_agent)
        agents[name] = json{{"pre_n", s.pre_n},
                            {"pre_correct", s.pre_correct},
                            {"post_n", s.post_n},
                            {"post_correct", s.post_correct},
                            {"pre_accuracy", opt(s.pre_accuracy())},
                            {"post_accuracy", opt(s.post_accuracy())}};
    j = json{{"results", f.results}, {"fate", fate},       {"kept", f.kept},
             {"discarded", f.discarded}, {"indeterminate", f.indeterminate}, {"per_agent", agents}};
}

void from_json(const json& j, FilterOutcome& f) {
    f.results = j.at("results").get<std::vector<EvalResult>>();
    f.fate.clear();
    for (const auto& [id, v] : j.at("fate").items()) f.fate[id] = parse_fate(v.get<std::string>());
    f.kept = j.at("kept").get<std::vector<std::string>>();
    f.discarded = j.at("discarded").get<std::vector<std::string>>();
    f.indeterminate = j.at("indeterminate").get<std::vector<std::string>>();
    f.per_agent.clear();
    for (const auto& [name, s] : j.at("per_agent").items()) {
        AgentFilterStats st;
        st.pre_n = s.at("pre_n").get<std::size_t>();
        st.pre_correct = s.at("pre_correct").get<std::size_t>();
        st.post_n = s.at("post_n").get<std::size_t>();
        st.post_correct = s.at("post_correct").get<std::size_t>();
        f.per_agent[name] = st;
    }
}

FilterOutcome apply_filter(const std::vector<std::string>& sample_ids, const std::vector<EvalResult>& results) {
    FilterOutcome out;
    out.results = results;
    std::map<std::string, std::vector<const EvalResult*>> by_sample;
    for (const auto& r : results) by_sample[r.sample_id].push_back(&r);

    for (const auto& r : results) out.per_agent.try_emplace(r.agent_name);

    for (const auto& id : sample_ids) {
        if (out.fate.count(id)) continue;
        std::size_t determinate = 0, wrong = 0;
        for (const auto* r : by_sample[id]) {
            if (!r->determinate) continue;
            ++determinate;
            if (!r->is_correct) ++wrong;
        }
        SampleFate fate = determinate == 0 ? SampleFate::indeterminate
                          : wrong > 0      ? SampleFate::kept
                                           : SampleFate::discarded;
        out.fate[id] = fate;
        switch (fate) {
            case SampleFate::kept: out.kept.push_back(id); break;
            case SampleFate::discarded: out.discarded.push_back(id); break;
            case SampleFate::indeterminate: out.indeterminate.push_back(id); break;
        }
        for (const auto* r : by_sample[id]) {
            if (!r->determinate) continue;
            auto& st = out.per_agent[r->agent_name];
            ++st.pre_n;
            if (r->is_correct) ++st.pre_correct;
            if (fate == SampleFate::kept) {
                ++st.post_n;
                if (r->is_correct) ++st.post_correct;
            }
        }
    }
    return out;
}

void to_json(json& j, const AgentFailure& f) { j = json{{"agent", f.agent}, {"item_id", f.item_id}, {"error", f.error}}; }

void from_json(const json& j, AgentFailure& f) {
    f.agent = j.at("agent").get<std::string>();
    f.item_id = j.value("item_id", "");
    f.error = j.at("error").get<std::string>();
}

void to_json(json& j, const DescriptionsResult& r) {
    j = json{{"descriptions", r.descriptions}, {"failures", r.failures}};
}

void from_json(const json& j, DescriptionsResult& r) {
    r.descriptions = j.at("descriptions").get<std::vector<Description>>();
    r.failures = j.at("failures").get<std::vector<AgentFailure>>();
}

void to_json(json& j, const QuestionsResult& r) {
    j = json{{"raw_output", r.raw_output},
             {"questions", r.questions},
             {"samples", r.samples},
             {"quarantine", r.quarantine}};
}

void from_json(const json& j, QuestionsResult& r) {
    r.raw_output = j.at("raw_output").get<std::string>();
    r.questions = j.at("questions").get<std::vector<CRQuestion>>();
    r.samples = j.at("samples").get<std::vector<CRSample>>();
    r.quarantine = j.at("quarantine").get<std::vector<QuarantineRecord>>();
}

void to_json(json& j, const OpenAnswersResult& r) {
    j = json{{"answers", r.answers}, {"failures", r.failures}, {"excluded_questions", r.excluded_questions}};
}

void from_json(const json& j, OpenAnswersResult& r) {
    r.answers = j.at("answers").get<std::vector<OpenAnswer>>();
    r.failures = j.at("failures").get<std::vector<AgentFailure>>();
    r.excluded_questions = j.at("excluded_questions").get<std::vector<std::string>>();
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(Gateway& gateway, PipelineConfig config) : gw_(gateway), config_(std::move(config)) {
    auto strong = gw_.agents_with_role(AgentRole::strong);
    if (strong.size() != 1) throw ConfigError("exactly one strong agent is required");
    strong_ = strong.front();
    downstream_ = gw_.agents_with_role(AgentRole::downstream);
    if (downstream_.empty()) throw ConfigError("no downstream agents configured");
}

ExchangeContext Pipeline::context(const ImageContext& img, const std::string& stage, const std::string& item) const {
    return ExchangeContext{stage, img.record.image_id, item, img.sink};
}

namespace {

ChatRequest user_request(const ImageContext& img, const std::string& text, const GenParams& params) {
    ChatRequest r;
    r.image = img.payload;
    r.messages.push_back({"user", text});
    r.gen_params = params;
    return r;
}

// Runs `fn`, turning gateway/protocol failures into a StageError. Config and
// storage errors stay fatal.
template <typename F>
auto tagged(const std::string& stage, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const StorageError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(stage, e.what());
    }
}

}  // namespace

Description Pipeline::stage1_describe(const ImageContext& img) {
    return tagged("stage1", [&] {
        const auto& prof = gw_.profile(strong_);
        auto text = gw_.generate(strong_, user_request(img, describe_prompt(), prof.gen_params),
                                 context(img, "stage1"));
        if (trim(text).empty()) throw StageError("stage1", "strong agent returned an empty description");
        return Description{img.record.image_id, strong_, text, DescriptionStage::stage1};
    });
}

DescriptionsResult Pipeline::stage2_describe_all(const ImageContext& img) {
    DescriptionsResult out;
    for (const auto& agent : downstream_) {
        try {
            const auto& prof = gw_.profile(agent);
            auto text = gw_.generate(agent, user_request(img, describe_prompt(), prof.gen_params),
                                     context(img, "stage2"));
            if (trim(text).empty()) {
                out.failures.push_back({agent, "", "empty description"});
                continue;
            }
            out.descriptions.push_back({img.record.image_id, agent, text, DescriptionStage::stage2});
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            out.failures.push_back({agent, "", e.what()});
        }
    }
    if (out.descriptions.empty()) throw StageError("stage2", "every downstream agent failed to describe the image");
    return out;
}

QuestionsResult Pipeline::generate_questions(const ImageContext& img, const std::string& prompt, int iteration,
                                             const std::string& stage) {
    return tagged(stage, [&] {
        const auto& prof = gw_.profile(strong_);
        QuestionsResult out;
        out.raw_output = gw_.generate(strong_, user_request(img, prompt, prof.gen_params), context(img, stage));
        auto parsed = parse_cr_questions(out.raw_output, img.record.image_id, iteration, stage);
        out.questions = std::move(parsed.questions);
        out.quarantine = std::move(parsed.quarantine);
        if (static_cast<int>(out.questions.size()) < config_.min_questions)
            throw StageError(stage, "only " + std::to_string(out.questions.size()) +
                                        " parseable questions, need " + std::to_string(config_.min_questions));
        for (const auto& q : out.questions)
            for (auto& s : explode(q, img.record.partition)) out.samples.push_back(std::move(s));
        return out;
    });
}

QuestionsResult Pipeline::stage3_generate(const ImageContext& img, const Description& stage1,
                                          const std::vector<Description>& stage2) {
    if (stage2.empty()) throw StageError("stage3", "no stage-2 descriptions");
    return generate_questions(img, question_prompt(stage1, stage2, config_.n_questions, config_.n_negatives), 1,
                              "stage3");
}

FilterOutcome Pipeline::evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples,
                                        const std::string& stage) {
    return tagged(stage, [&] {
        const auto items = make_mcqs(samples, config_.order_seed, config_.order_mode);
        std::vector<EvalResult> results;
        std::vector<std::string> ids;
        for (const auto& item : items) {
            ids.push_back(item.sample_id);
            for (const auto& agent : downstream_)
                results.push_back(eval_generate(gw_, agent, item, img.payload, context(img, stage, item.sample_id)));
        }
        return apply_filter(ids, results);
    });
}

FilterOutcome Pipeline::stage4_evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples) {
    return evaluate_filter(img, samples, "stage4");
}

OpenAnswersResult Pipeline::stage5_open_answers(const ImageContext& img, const std::vector<CRQuestion>& questions,
                                                const FilterOutcome& stage4) {
    std::set<std::string> surviving;
    std::map<std::string, std::string> question_of;
    for (const auto& q : questions)
        for (const auto& s : explode(q, img.record.partition)) question_of[s.sample_id] = q.question_id;
    for (const auto& id : stage4.kept) {
        auto it = question_of.find(id);
        if (it != question_of.end()) surviving.insert(it->second);
    }

    OpenAnswersResult out;
    for (const auto& q : questions) {
        if (!surviving.count(q.question_id)) {
            out.excluded_questions.push_back(q.question_id);
            continue;
        }
        for (const auto& agent : downstream_) {
            try {
                const auto& prof = gw_.profile(agent);
                auto text = gw_.generate(agent, user_request(img, open_answer_prompt(q.question_text), prof.gen_params),
                                         context(img, "stage5", q.question_id));
                out.answers.push_back({q.question_id, agent, text});
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                out.failures.push_back({agent, q.question_id, e.what()});
            }
        }
    }
    return out;
}

QuestionsResult Pipeline::stage6_generate(const ImageContext& img, const Description& stage1,
                                          const std::vector<CRQuestion>& iteration1,
                                          const std::vector<OpenAnswer>& answers) {
    return generate_questions(
        img, harder_question_prompt(stage1, iteration1, answers, config_.n_questions, config_.n_negatives), 2,
        "stage6");
}

FilterOutcome Pipeline::stage7_evaluate_filter(const ImageContext& img, const std::vector<CRSample>& samples) {
    return evaluate_filter(img, samples, "stage7");
}

}  // namespace forge
