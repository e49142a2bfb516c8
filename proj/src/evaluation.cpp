#include "forge/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <regex>
#include <set>

#include "forge/error.hpp"

namespace forge {

std::string to_string(Letter l) {
    switch (l) {
        case Letter::A: return "A";
        case Letter::B: return "B";
        case Letter::unparseable: return "unparseable";
    }
    return "unparseable";
}

Letter parse_letter_name(const std::string& s) {
    if (s == "A") return Letter::A;
    if (s == "B") return Letter::B;
    if (s == "unparseable") return Letter::unparseable;
    throw PreconditionError("unknown letter '" + s + "'");
}

std::string to_string(EvalMode m) { return m == EvalMode::generate ? "generate" : "perplexity"; }

EvalMode parse_eval_mode(const std::string& s) {
    if (s == "generate") return EvalMode::generate;
    if (s == "perplexity") return EvalMode::perplexity;
    throw ConfigError("unknown evaluation mode '" + s + "'");
}

std::string to_string(OrderMode m) {
    switch (m) {
        case OrderMode::balanced: return "balanced";
        case OrderMode::hashed: return "hashed";
        case OrderMode::fixed: return "fixed";
    }
    return "balanced";
}

OrderMode parse_order_mode(const std::string& s) {
    if (s == "balanced") return OrderMode::balanced;
    if (s == "hashed") return OrderMode::hashed;
    if (s == "fixed") return OrderMode::fixed;
    throw ConfigError("unknown order mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// option ordering

namespace {

std::uint64_t order_hash(const std::string& sample_id) { return fnv1a64(sample_id); }

}  // namespace

MCQItem make_mcq(const CRSample& sample, std::int64_t order_seed, bool positive_at_a) {
    MCQItem m;
    m.sample_id = sample.sample_id;
    m.question_text = sample.question_text;
    m.order_seed = order_seed;
    if (positive_at_a) {
        m.option_a = sample.positive;
        m.option_b = sample.negative;
        m.correct_letter = Letter::A;
    } else {
        m.option_a = sample.negative;
        m.option_b = sample.positive;
        m.correct_letter = Letter::B;
    }
    return m;
}

MCQItem make_mcq(const CRSample& sample, std::int64_t order_seed) {
    auto bit = (order_hash(sample.sample_id) ^ static_cast<std::uint64_t>(order_seed)) & 1U;
    return make_mcq(sample, order_seed, bit == 0);
}

std::map<std::string, bool> plan_order(const std::vector<CRSample>& samples, std::int64_t order_seed,
                                       OrderMode mode) {
    std::map<std::string, bool> plan;
    switch (mode) {
        case OrderMode::fixed:
            for (const auto& s : samples) plan[s.sample_id] = true;
            break;
        case OrderMode::hashed:
            for (const auto& s : samples)
                plan[s.sample_id] = ((order_hash(s.sample_id) ^ static_cast<std::uint64_t>(order_seed)) & 1U) == 0;
            break;
        case OrderMode::balanced: {
            // Alternate by hash rank inside each partition.
            std::map<Partition, std::vector<std::pair<std::uint64_t, std::string>>> keyed;
            for (const auto& s : samples) {
                std::string seeded = std::to_string(order_seed) + ":" + s.sample_id;
                keyed[s.partition].emplace_back(fnv1a64(seeded), s.sample_id);
            }
            for (auto& [part, ranked] : keyed) {
                std::sort(ranked.begin(), ranked.end());
                for (std::size_t rank = 0; rank < ranked.size(); ++rank)
                    plan[ranked[rank].second] = ((rank + static_cast<std::uint64_t>(order_seed)) & 1U) == 0;
            }
            break;
        }
    }
    return plan;
}

std::vector<MCQItem> make_mcqs(const std::vector<CRSample>& samples, std::int64_t order_seed, OrderMode mode) {
    auto plan = plan_order(samples, order_seed, mode);
    std::vector<MCQItem> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(make_mcq(s, order_seed, plan.at(s.sample_id)));
    return out;
}

// ---------------------------------------------------------------------------
// letter parsing

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string strip_wrapping(std::string s) {
    static const std::string wrap = "\"'`*_";
    bool changed = true;
    while (changed && s.size() >= 2) {
        changed = false;
        if (wrap.find(s.front()) != std::string::npos && wrap.find(s.back()) != std::string::npos) {
            s = trim(std::string_view(s).substr(1, s.size() - 2));
            changed = true;
        }
    }
    return s;
}

// After a lowercase letter: optional closing bracket, spaces, then punctuation or end.
bool lowercase_tail_ok(const std::string& s, std::size_t pos) {
    while (pos < s.size() && (s[pos] == ')' || s[pos] == ']')) ++pos;
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    return pos == s.size() || std::string(".,;:!?\n").find(s[pos]) != std::string::npos;
}

bool standalone_a_ok(const std::string& s, std::size_t pos) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos == s.size() || !std::isalpha(static_cast<unsigned char>(s[pos]))) return true;
    std::size_t end = pos;
    while (end < s.size() && std::isalpha(static_cast<unsigned char>(s[end]))) ++end;
    static const std::set<std::string> allowed{"is", "or", "and", "would", "seems", "should", "was"};
    return allowed.count(to_lower(s.substr(pos, end - pos))) > 0;
}

Letter from_char(char c) { return (c == 'A' || c == 'a') ? Letter::A : Letter::B; }

}  // namespace

Letter parse_letter(std::string_view raw) {
    const std::string text = strip_wrapping(trim(raw));
    if (text.empty()) return Letter::unparseable;

    static const std::regex whole(R"(^[\(\[]?\s*([AaBb])\s*[\)\]]?\s*[.:!]?$)");
    std::smatch m;
    if (std::regex_match(text, m, whole)) return from_char(m.str(1)[0]);

    std::set<Letter> found;

    static const std::regex bracketed(R"([\(\[]\s*([AaBb])\s*[\)\]])");
    for (auto it = std::sregex_iterator(text.begin(), text.end(), bracketed); it != std::sregex_iterator(); ++it)
        found.insert(from_char((*it).str(1)[0]));

    static const std::regex line_marker(R"((?:^|\n)[ \t]*([AaBb])[ \t]*[.):](?=\s|$))");
    for (auto it = std::sregex_iterator(text.begin(), text.end(), line_marker); it != std::sregex_iterator(); ++it)
        found.insert(from_char((*it).str(1)[0]));

    static const std::regex phrase(
        R"((?:answer|option|choice|choose|chose|pick|select|go with)\s*(?:is|would be|should be|:|-)?\s*(?:option\s+|letter\s+)?[\(\[]?\s*([AaBb])(?![A-Za-z0-9]))",
        std::regex::icase);
    for (auto it = std::sregex_iterator(text.begin(), text.end(), phrase); it != std::sregex_iterator(); ++it) {
        const auto& mm = *it;
        char c = mm.str(1)[0];
        auto after = static_cast<std::size_t>(mm.position(1) + 1);
        if (std::islower(static_cast<unsigned char>(c)) && !lowercase_tail_ok(text, after)) continue;
        found.insert(from_char(c));
    }

    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (c != 'A' && c != 'B') continue;
        auto boundary = [&](char n) { return is_word_char(n) || n == '\'' || n == '-' || n == '/'; };
        if (i > 0 && boundary(text[i - 1])) continue;
        if (i + 1 < text.size() && boundary(text[i + 1])) continue;
        if (c == 'A' && !standalone_a_ok(text, i + 1)) continue;
        found.insert(from_char(c));
    }

    if (found.size() == 1) return *found.begin();
    return Letter::unparseable;
}

// ---------------------------------------------------------------------------

PerplexityScore PerplexityScore::from_logprobs(std::string text, std::span<const double> logprobs) {
    if (logprobs.empty()) throw PreconditionError("perplexity score needs at least one token");
    PerplexityScore s;
    s.text = std::move(text);
    s.token_count = static_cast<int>(logprobs.size());
    s.sum_nll = -std::accumulate(logprobs.begin(), logprobs.end(), 0.0);
    s.mean_nll = s.sum_nll / s.token_count;
    return s;
}

Letter choose_by_perplexity(const PerplexityScore& a, const PerplexityScore& b, bool& tie) {
    tie = a.mean_nll == b.mean_nll;
    return b.mean_nll < a.mean_nll ? Letter::B : Letter::A;
}

void to_json(json& j, const PerplexityScore& s) {
    j = json{{"text", s.text}, {"token_count", s.token_count}, {"mean_nll", s.mean_nll}, {"sum_nll", s.sum_nll}};
}

void from_json(const json& j, PerplexityScore& s) {
    s.text = j.at("text").get<std::string>();
    s.token_count = j.at("token_count").get<int>();
    s.mean_nll = j.at("mean_nll").get<double>();
    s.sum_nll = j.at("sum_nll").get<double>();
}

void to_json(json& j, const EvalResult& r) {
    j = json{{"sample_id", r.sample_id},
             {"agent_name", r.agent_name},
             {"mode", to_string(r.mode)},
             {"chosen_letter", to_string(r.chosen)},
             {"correct_letter", to_string(r.correct_letter)},
             {"is_correct", r.is_correct},
             {"determinate", r.determinate},
             {"tie", r.tie}};
    if (r.mode == EvalMode::generate) {
        j["evidence"] = json{{"text", r.raw_text}};
    } else if (r.scores) {
        j["evidence"] = json{{"A", r.scores->first}, {"B", r.scores->second}};
    } else {
        j["evidence"] = nullptr;
    }
    if (!r.error.empty()) j["error"] = r.error;
}

void from_json(const json& j, EvalResult& r) {
    r.sample_id = j.at("sample_id").get<std::string>();
    r.agent_name = j.at("agent_name").get<std::string>();
    r.mode = parse_eval_mode(j.at("mode").get<std::string>());
    r.chosen = parse_letter_name(j.at("chosen_letter").get<std::string>());
    r.correct_letter = parse_letter_name(j.at("correct_letter").get<std::string>());
    r.is_correct = j.at("is_correct").get<bool>();
    r.determinate = j.value("determinate", true);
    r.tie = j.value("tie", false);
    r.error = j.value("error", "");
    const auto& ev = j.value("evidence", json());
    if (ev.is_object()) {
        if (ev.contains("text")) r.raw_text = ev["text"].get<std::string>();
        if (ev.contains("A") && ev.contains("B"))
            r.scores = std::make_pair(ev["A"].get<PerplexityScore>(), ev["B"].get<PerplexityScore>());
    }
}

void to_json(json& j, const MCQItem& m) {
    j = json{{"sample_id", m.sample_id},
             {"question", m.question_text},
             {"option_a", m.option_a},
             {"option_b", m.option_b},
             {"correct_letter", to_string(m.correct_letter)},
             {"order_seed", m.order_seed}};
}

std::string mcq_prompt(const MCQItem& item) {
    return item.question_text + "\nA. " + item.option_a + "\nB. " + item.option_b +
           "\nAnswer with the option's letter from the given choices directly.";
}

std::string perplexity_prefix(const MCQItem& item) { return "Question: " + item.question_text + "\nAnswer:"; }

EvalResult eval_generate(Gateway& gw, const std::string& agent, const MCQItem& item,
                         const std::optional<ImagePayload>& image, const ExchangeContext& ctx) {
    EvalResult r;
    r.sample_id = item.sample_id;
    r.agent_name = agent;
    r.mode = EvalMode::generate;
    r.correct_letter = item.correct_letter;

    if (image && !gw.probe_capabilities(agent, ctx).supports_images)
        throw CapabilityError("agent '" + agent + "' does not accept images");

    ChatRequest req;
    req.image = image;
    req.messages = {{"user", mcq_prompt(item)}};
    req.gen_params = gw.profile(agent).mcq_gen_params();
    ExchangeContext c = ctx;
    c.item_id = item.sample_id;
    try {
        r.raw_text = gw.generate(agent, req, c);
    } catch (const DispatchError& e) {
        r.determinate = false;
        r.error = e.what();
        return r;
    } catch (const ProtocolError& e) {
        r.determinate = false;
        r.error = e.what();
        return r;
    }
    r.chosen = parse_letter(r.raw_text);
    r.is_correct = r.chosen == item.correct_letter;
    return r;
}

EvalResult eval_perplexity(Gateway& gw, const std::string& agent, const MCQItem& item,
                           const std::optional<ImagePayload>& image, const ExchangeContext& ctx) {
    EvalResult r;
    r.sample_id = item.sample_id;
    r.agent_name = agent;
    r.mode = EvalMode::perplexity;
    r.correct_letter = item.correct_letter;

    auto caps = gw.probe_capabilities(agent, ctx);
    if (!caps.supports_logprobs) throw CapabilityError("agent '" + agent + "' does not expose token logprobs");
    if (image && !caps.supports_images) throw CapabilityError("agent '" + agent + "' does not accept images");

    const std::string prefix = perplexity_prefix(item);
    try {
        ExchangeContext ca = ctx;
        ca.item_id = item.sample_id + ":A";
        auto sa = gw.score_continuation(agent, image, prefix, item.option_a, ca);
        ExchangeContext cb = ctx;
        cb.item_id = item.sample_id + ":B";
        auto sb = gw.score_continuation(agent, image, prefix, item.option_b, cb);
        r.scores = std::make_pair(PerplexityScore::from_logprobs(item.option_a, sa.token_logprobs),
                                  PerplexityScore::from_logprobs(item.option_b, sb.token_logprobs));
    } catch (const DispatchError& e) {
        r.determinate = false;
        r.error = e.what();
        return r;
    } catch (const ProtocolError& e) {
        r.determinate = false;
        r.error = e.what();
        return r;
    } catch (const ScoringError& e) {
        r.determinate = false;
        r.error = e.what();
        return r;
    }
    r.chosen = choose_by_perplexity(r.scores->first, r.scores->second, r.tie);
    r.is_correct = r.chosen == item.correct_letter;
    return r;
}

// ---------------------------------------------------------------------------

void to_json(json& j, const AccuracyReport& r) {
    json parts = json::object();
    for (const auto& [name, p] : r.per_partition)
        parts[name] = json{{"n", p.n}, {"correct", p.correct}, {"accuracy", p.accuracy}};
    j = json{{"agent_name", r.agent_name},
             {"mode", to_string(r.mode)},
             {"per_partition", parts},
             {"overall", r.overall ? json(*r.overall) : json(nullptr)},
             {"warnings", r.warnings}};
}

AccuracyReport aggregate(const std::vector<EvalResult>& results,
                         const std::map<std::string, std::string>& partition_of,
                         const std::vector<std::string>& expected_partitions) {
    AccuracyReport rep;
    if (!results.empty()) {
        rep.agent_name = results.front().agent_name;
        rep.mode = results.front().mode;
    }
    std::map<std::string, PartitionAccuracy> counts;
    for (const auto& p : expected_partitions) counts[p];
    for (const auto& r : results) {
        if (r.agent_name != rep.agent_name || r.mode != rep.mode)
            throw PreconditionError("aggregate needs results from a single (agent, mode)");
        auto it = partition_of.find(r.sample_id);
        if (it == partition_of.end()) throw PreconditionError("sample '" + r.sample_id + "' has no partition");
        auto& c = counts[it->second];
        if (!r.determinate) continue;
        ++c.n;
        if (r.is_correct) ++c.correct;
    }
    std::vector<double> accs;
    for (auto& [name, c] : counts) {
        if (c.n == 0) {
            rep.warnings.push_back("partition '" + name + "' has no determinate results; omitted");
            continue;
        }
        c.accuracy = 100.0 * static_cast<double>(c.correct) / static_cast<double>(c.n);
        rep.per_partition[name] = c;
        accs.push_back(c.accuracy);
    }
    if (!accs.empty()) rep.overall = mean_accuracy(accs);
    return rep;
}

double mean_accuracy(std::span<const double> accuracies) {
    if (accuracies.empty()) throw PreconditionError("mean of no accuracies");
    return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(accuracies.size());
}

Drop compute_drop(double baseline_acc, double new_acc, std::optional<double> reported) {
    auto in_range = [](double v) { return v >= 0.0 && v <= 100.0; };
    if (!in_range(baseline_acc) || !in_range(new_acc))
        throw PreconditionError("accuracies must be within [0, 100]");
    Drop d;
    d.raw = new_acc - baseline_acc;
    d.value = round1(d.raw);
    d.reported = reported;
    if (reported && std::abs(round1(*reported) - d.value) > 1e-9) {
        d.discrepancy = true;
        d.note = "computed drop " + format1(d.value) + " differs from reported " + format1(*reported) +
                 " by " + format1(std::abs(d.value - *reported)) + " (rounding of the reported inputs)";
    }
    return d;
}

}  // namespace forge
