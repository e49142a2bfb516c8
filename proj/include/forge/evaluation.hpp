#pragma once

// Binary multiple-choice evaluation in two inference modes.
//
// generate:   the agent is asked for a letter; parse_letter() extracts it.
// perplexity: each option is scored as the mean per-token negative
//             log-likelihood of the option text given image + question prefix,
//             and the option with the smaller mean loss is chosen. Plain means
//             are compared; a log around them would pick the same option.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "forge/gateway.hpp"
#include "forge/types.hpp"

namespace forge {

enum class Letter { A, B, unparseable };
enum class EvalMode { generate, perplexity };

/// balanced: within each partition of a sample set, positives alternate A/B by seeded hash rank.
/// hashed:   per-sample parity of a seeded hash.
/// fixed:    positive always at A (compatibility switch).
enum class OrderMode { balanced, hashed, fixed };

std::string to_string(Letter l);
Letter parse_letter_name(const std::string& s);  // "A" | "B" | "unparseable"
std::string to_string(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);
std::string to_string(OrderMode m);
OrderMode parse_order_mode(const std::string& s);

struct MCQItem {
    std::string sample_id;
    std::string question_text;
    std::string option_a;
    std::string option_b;
    Letter correct_letter = Letter::A;
    std::int64_t order_seed = 0;
};

/// Per-sample ordering: positive at A iff the low bit of hash(sample_id) XOR seed is 0.
MCQItem make_mcq(const CRSample& sample, std::int64_t order_seed);
MCQItem make_mcq(const CRSample& sample, std::int64_t order_seed, bool positive_at_a);

/// sample_id -> positive_at_a. Balanced mode sorts each partition by hash(sample_id) and
/// alternates, so per partition the A-count of positives is within one of half.
std::map<std::string, bool> plan_order(const std::vector<CRSample>& samples, std::int64_t order_seed, OrderMode mode);
std::vector<MCQItem> make_mcqs(const std::vector<CRSample>& samples, std::int64_t order_seed, OrderMode mode);

/// Extracts the chosen option letter from free-form text.
///
/// Rules (case-insensitive unless noted), applied after trimming and stripping
/// wrapping quotes / markdown emphasis:
///  1. the whole reply is a letter, optionally bracketed and/or followed by . : !
///  2. a bracketed letter anywhere: (A) [b]
///  3. a letter marker starting a line: "A. ...", "b) ...", "A: ..."
///  4. "answer/option/choice is X", "I choose X" and similar; a lowercase x must be
///     followed by punctuation or end of text (so "the answer is a dog" does not count)
///  5. a standalone uppercase B anywhere, or a standalone uppercase A not followed by
///     a word other than is/or/and/would/seems (so the article in "A dog" does not count)
/// All matches are collected; exactly one distinct letter wins, otherwise unparseable.
Letter parse_letter(std::string_view text);

struct PerplexityScore {
    std::string text;
    int token_count = 0;
    double mean_nll = 0.0;
    double sum_nll = 0.0;

    static PerplexityScore from_logprobs(std::string text, std::span<const double> logprobs);
};

/// argmin of mean_nll; a tie goes to A and sets `tie`.
Letter choose_by_perplexity(const PerplexityScore& a, const PerplexityScore& b, bool& tie);

struct EvalResult {
    std::string sample_id;
    std::string agent_name;
    EvalMode mode = EvalMode::generate;
    Letter chosen = Letter::unparseable;
    Letter correct_letter = Letter::A;
    bool is_correct = false;
    bool determinate = true;  // false when the gateway failed; excluded from denominators
    bool tie = false;
    std::string raw_text;
    std::optional<std::pair<PerplexityScore, PerplexityScore>> scores;
    std::string error;
};

void to_json(json& j, const PerplexityScore& s);
void from_json(const json& j, PerplexityScore& s);
void to_json(json& j, const EvalResult& r);
void from_json(const json& j, EvalResult& r);
void to_json(json& j, const MCQItem& m);

std::string mcq_prompt(const MCQItem& item);
std::string perplexity_prefix(const MCQItem& item);

EvalResult eval_generate(Gateway& gw, const std::string& agent, const MCQItem& item,
                         const std::optional<ImagePayload>& image, const ExchangeContext& ctx = {});
EvalResult eval_perplexity(Gateway& gw, const std::string& agent, const MCQItem& item,
                           const std::optional<ImagePayload>& image, const ExchangeContext& ctx = {});

struct PartitionAccuracy {
    std::size_t n = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;  // percent
};

struct AccuracyReport {
    std::string agent_name;
    EvalMode mode = EvalMode::generate;
    std::map<std::string, PartitionAccuracy> per_partition;
    std::optional<double> overall;  // unweighted mean of partition accuracies
    std::vector<std::string> warnings;
};

void to_json(json& j, const AccuracyReport& r);

/// All results must share one (agent, mode). Indeterminate results are skipped;
/// partitions in `expected_partitions` with no determinate result are omitted with a warning.
AccuracyReport aggregate(const std::vector<EvalResult>& results,
                         const std::map<std::string, std::string>& partition_of,
                         const std::vector<std::string>& expected_partitions = {});

/// Plain arithmetic mean; an empty input throws PreconditionError.
double mean_accuracy(std::span<const double> accuracies);

struct Drop {
    double value = 0.0;  // new - baseline, rounded to one decimal
    double raw = 0.0;
    std::optional<double> reported;
    bool discrepancy = false;
    std::string note;
};

/// Both accuracies in [0, 100]. When `reported` is given and differs from the
/// computed one-decimal drop, the result carries a rounding note.
Drop compute_drop(double baseline_acc, double new_acc, std::optional<double> reported = std::nullopt);

}  // namespace forge
