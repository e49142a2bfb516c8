#include <regex>
#include <set>
#include <sstream>

#include "forge/pipeline.hpp"

namespace forge {

void to_json(json& j, const QuarantineRecord& q) {
    j = json{{"image_id", q.image_id},     {"stage", q.stage},       {"block", q.block},
             {"line_start", q.line_start}, {"line_end", q.line_end}, {"reason", q.reason},
             {"raw", q.raw}};
}

void from_json(const json& j, QuarantineRecord& q) {
    q.image_id = j.at("image_id").get<std::string>();
    q.stage = j.at("stage").get<std::string>();
    q.block = j.at("block").get<int>();
    q.line_start = j.at("line_start").get<int>();
    q.line_end = j.at("line_end").get<int>();
    q.reason = j.at("reason").get<std::string>();
    q.raw = j.at("raw").get<std::string>();
}

std::string make_question_id(const std::string& image_id, int iteration, int block) {
    return image_id + "/it" + std::to_string(iteration) + "/q" + std::to_string(block);
}

namespace {

struct Field {
    enum class Kind { question, positive, negative } kind;
    int negative_index = 0;
    std::string text;
};

struct Block {
    int number = 0;
    int start = 0;
    int end = 0;
    std::vector<Field> fields;
    bool closed = false;  // trailing text seen after a blank line
    std::string error;
};

const std::regex& header_re() {
    static const std::regex re(R"(^\s*(?:#+\s*)?(\d+)\s*[.)]\s*(.*)$)");
    return re;
}

const std::regex& field_re() {
    static const std::regex re(R"(^\s*(Q|A\s*\+|A\s*-\s*(\d+))\s*:\s*(.*)$)", std::regex::icase);
    return re;
}

bool add_field(Block& b, const std::string& text) {
    std::smatch m;
    if (!std::regex_match(text, m, field_re())) return false;
    Field f;
    std::string label = to_lower(m.str(1));
    if (label == "q") {
        f.kind = Field::Kind::question;
    } else if (label.find('+') != std::string::npos) {
        f.kind = Field::Kind::positive;
    } else {
        f.kind = Field::Kind::negative;
        f.negative_index = std::stoi(m.str(2));
    }
    f.text = trim(m.str(3));
    b.fields.push_back(std::move(f));
    return true;
}

std::string validate(const Block& b, std::string& q, std::string& pos, std::vector<std::string>& negs) {
    if (!b.error.empty()) return b.error;
    int nq = 0, np = 0;
    std::vector<int> neg_idx;
    for (const auto& f : b.fields) {
        switch (f.kind) {
            case Field::Kind::question: ++nq; q = f.text; break;
            case Field::Kind::positive: ++np; pos = f.text; break;
            case Field::Kind::negative:
                neg_idx.push_back(f.negative_index);
                negs.push_back(f.text);
                break;
        }
    }
    if (nq == 0) return "missing Q: line";
    if (nq > 1) return "more than one Q: line";
    if (np == 0) return "missing A+: line";
    if (np > 1) return "more than one A+: line";
    if (negs.empty()) return "no A-k: negatives";
    for (std::size_t i = 0; i < neg_idx.size(); ++i)
        if (neg_idx[i] != static_cast<int>(i + 1)) return "negative labels are not A-1..A-K in order";
    if (q.empty()) return "empty question";
    if (pos.empty()) return "empty positive";
    for (const auto& n : negs)
        if (n.empty()) return "empty negative";
    const auto npos = normalize_text(pos);
    std::set<std::string> seen;
    for (const auto& n : negs) {
        auto nn = normalize_text(n);
        if (nn == npos) return "positive equals a negative";
        if (!seen.insert(nn).second) return "duplicate negatives";
    }
    return {};
}

}  // namespace

ParseResult parse_cr_questions(const std::string& raw, const std::string& image_id, int iteration,
                               const std::string& stage) {
    const auto lines = split_lines(raw);
    std::vector<Block> blocks;
    bool after_blank = false;

    for (std::size_t i = 0; i < lines.size(); ++i) {
        const int line_no = static_cast<int>(i + 1);
        const std::string& line = lines[i];
        std::smatch m;
        if (std::regex_match(line, m, header_re())) {
            Block b;
            b.number = std::stoi(m.str(1));
            b.start = b.end = line_no;
            std::string rest = trim(m.str(2));
            if (!rest.empty() && !add_field(b, rest)) b.fields.push_back({Field::Kind::question, 0, rest});
            blocks.push_back(std::move(b));
            after_blank = false;
            continue;
        }
        if (blocks.empty()) continue;  // preamble
        Block& cur = blocks.back();
        if (trim(line).empty()) {
            after_blank = true;
            continue;
        }
        if (cur.closed) {
            std::smatch fm;
            if (std::regex_match(line, fm, field_re()) && cur.error.empty()) {
                cur.error = "labeled line after trailing text";
                cur.end = line_no;
            }
            continue;
        }
        if (add_field(cur, line)) {
            cur.end = line_no;
            after_blank = false;
            continue;
        }
        if (after_blank || cur.fields.empty()) {
            if (cur.fields.empty() && !after_blank && cur.error.empty()) {
                cur.error = "text before Q: line";
                cur.end = line_no;
            } else {
                cur.closed = true;
            }
            continue;
        }
        cur.fields.back().text += " " + trim(line);
        cur.end = line_no;
    }

    ParseResult out;
    std::set<int> numbers;
    for (const auto& b : blocks) {
        std::ostringstream rawb;
        for (int l = b.start; l <= b.end; ++l) rawb << lines[static_cast<std::size_t>(l - 1)] << (l < b.end ? "\n" : "");
        std::string q, pos;
        std::vector<std::string> negs;
        std::string reason = validate(b, q, pos, negs);
        if (reason.empty() && !numbers.insert(b.number).second) reason = "duplicate block number";
        if (!reason.empty()) {
            out.quarantine.push_back({image_id, stage, b.number, b.start, b.end, reason, rawb.str()});
            continue;
        }
        CRQuestion cq;
        cq.question_id = make_question_id(image_id, iteration, b.number);
        cq.image_id = image_id;
        cq.iteration = iteration;
        cq.question_text = q;
        cq.positive = pos;
        cq.negatives = std::move(negs);
        cq.provenance = Provenance{stage, image_id, b.number, b.start, b.end, 0};
        out.questions.push_back(std::move(cq));
    }
    return out;
}

std::optional<CRSample> resolve_provenance(const std::string& raw, const Provenance& prov, Partition partition) {
    const int iteration = prov.stage == "stage6" ? 2 : 1;
    auto parsed = parse_cr_questions(raw, prov.image_id, iteration, prov.stage);
    for (const auto& q : parsed.questions) {
        if (q.provenance.block != prov.block) continue;
        if (prov.negative_index < 1 || prov.negative_index > static_cast<int>(q.negatives.size())) return std::nullopt;
        return explode(q, partition)[static_cast<std::size_t>(prov.negative_index - 1)];
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// prompts

namespace {

std::string format_block(int n_negatives) {
    std::ostringstream out;
    out << "1.\nQ: <question>\nA+: <correct answer>\n";
    for (int k = 1; k <= n_negatives; ++k) out << "A-" << k << ": <wrong answer>\n";
    return out.str();
}

}  // namespace

std::string describe_prompt() {
    return "Describe this image in as much detail as you can. Cover every object and its attributes "
           "(color, material, size, count), the spatial relations between objects, what any people or "
           "animals are doing, visible text, the lighting and the overall scene.";
}

std::string question_prompt(const Description& strong, const std::vector<Description>& downstream, int n_questions,
                            int n_negatives) {
    std::ostringstream out;
    out << "Below is a detailed description of an image that you wrote yourself, followed by descriptions "
           "of the same image written by other vision-language models.\n\n";
    out << "Your description:\n" << strong.text << "\n\n";
    out << "Other models' descriptions:\n";
    for (std::size_t i = 0; i < downstream.size(); ++i)
        out << "Model " << (i + 1) << ":\n" << downstream[i].text << "\n\n";
    out << "Write " << n_questions
        << " challenging compositional reasoning questions about the image. Focus on details the other "
           "models missed, got wrong or described vaguely: attributes, counts, spatial relations, actions "
           "and fine details. For each question give the correct answer and "
        << n_negatives
        << " wrong answers that stay plausible given both the image and the wording, so that a model which "
           "did not look carefully would pick them.\n\n";
    out << "Use exactly this format for every question, numbering the questions 1 to " << n_questions
        << ", with no other text:\n"
        << format_block(n_negatives);
    return out.str();
}

std::string open_answer_prompt(const std::string& question) {
    return question + "\nAnswer the question about the image in one or two sentences.";
}

std::string harder_question_prompt(const Description& strong, const std::vector<CRQuestion>& iteration1,
                                   const std::vector<OpenAnswer>& answers, int n_questions, int n_negatives) {
    std::ostringstream out;
    out << "Below is a detailed description of an image that you wrote yourself.\n\n"
        << strong.text << "\n\n"
        << "Earlier you wrote the following questions about this image. Under each question are the "
           "open-ended answers other vision-language models gave to it.\n\n";
    // Models are anonymized consistently across questions.
    std::map<std::string, int> model_no;
    for (const auto& a : answers) model_no.emplace(a.agent_name, 0);
    int next = 1;
    for (auto& [_, n] : model_no) n = next++;

    int idx = 1;
    for (const auto& q : iteration1) {
        out << idx++ << ". " << q.question_text << "\n   Correct answer: " << q.positive << "\n";
        for (const auto& a : answers)
            if (a.question_id == q.question_id)
                out << "   Model " << model_no[a.agent_name] << " answered: " << a.text << "\n";
        out << "\n";
    }
    out << "Reflect on which details the other models failed to perceive and write " << n_questions
        << " new, more challenging compositional reasoning questions about the image. For each question give "
           "the correct answer and "
        << n_negatives
        << " plausible wrong answers that target those weaknesses.\n\n"
           "Use exactly this format for every question, numbering the questions 1 to "
        << n_questions << ", with no other text:\n"
        << format_block(n_negatives);
    return out.str();
}

}  // namespace forge
