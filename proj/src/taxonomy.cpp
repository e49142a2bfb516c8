#include <algorithm>
#include <atomic>
#include <cctype>
#include <mutex>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "forge/error.hpp"
#include "forge/taxonomy.hpp"

namespace forge {

std::vector<std::string> TaxonomySpec::label_names() const {
    std::vector<std::string> out;
    for (const auto& l : labels) out.push_back(l.label);
    return out;
}

bool TaxonomySpec::has_label(const std::string& label) const {
    for (const auto& l : labels)
        if (l.label == label) return true;
    return false;
}

void to_json(json& j, const TaxonomySpec& s) {
    json labels = json::array();
    for (const auto& l : s.labels)
        labels.push_back(json{{"label", l.label}, {"definition", l.definition}, {"example", l.example}});
    j = json{{"name", s.name}, {"labels", labels}};
}

void from_json(const json& j, TaxonomySpec& s) {
    s.name = j.at("name").get<std::string>();
    s.labels.clear();
    for (const auto& l : j.at("labels"))
        s.labels.push_back({l.at("label").get<std::string>(), l.value("definition", ""), l.value("example", "")});
}

const TaxonomySpec& question_format_taxonomy() {
    static const TaxonomySpec spec{
        "question_format",
        {
            {"Hallucination",
             "The question asks if something is visible or not, and the answer is that it is not visible/present.",
             "\"Is there a cat in the room?\" \"No, there is no cat.\""},
            {"Misconception", "The question asks about an attribute of an object, but that object is not present.",
             "\"What color is the cat?\" \"There is no cat.\""},
            {"Non-Determinable", "The question asks for something that cannot be distinguished.",
             "\"Is the cat in motion?\" \"I cannot tell.\""},
            {"Selective",
             "Any other question, asking about an image detail perceived by the question author as unseen by other "
             "models.",
             "\"What specific accessory does the person have around their neck and lower face region? A Scarf or "
             "Goggles?\" \"A Scarf\""},
        }};
    return spec;
}

const TaxonomySpec& error_category_taxonomy() {
    static const TaxonomySpec spec{
        "error_category",
        {
            {"Attention", "The question asks about the attention of a person or object.",
             "\"Which direction is the cat looking?\" \"The cat is looking out the window.\""},
            {"Attribute", "The question asks about the presence or visibility of an attribute of an object.",
             "\"Does the cat have white whiskers?\" \"No, the cat has black whiskers.\""},
            {"Behavior", "The question asks about action or behavior.",
             "\"Is the cat moving around?\" \"No, the cat is sleeping.\""},
            {"Clothing", "The question asks about what is being worn.",
             "\"Is the cat wearing a hat?\" \"No, the cat is not wearing a hat.\""},
            {"Color", "The question asks about the color of an object.",
             "\"What color is the cat?\" \"The cat is black.\""},
            {"Count", "The question asks about the number of objects.",
             "\"How many cats are there?\" \"There are two cats.\""},
            {"Emotion", "The question asks an opinion of what is observed.",
             "\"What makes this room cozy?\" \"The fireplace makes the room cozy.\""},
            {"Lighting", "The question asks about the lighting or direction of the light.",
             "\"Is the cat's shadow sharp?\" \"No, the shadow is diffused.\""},
            {"Proximity", "The question asks about the spatial relation between two objects.",
             "\"Is the cat near the window?\" \"Yes, the cat is near the window.\""},
            {"Scene", "The question asks about the location of the scene.",
             "\"Is this indoor or outdoor?\" \"This is indoor.\""},
        }};
    return spec;
}

const TaxonomySpec& builtin_taxonomy(const std::string& name) {
    if (name == "question_format") return question_format_taxonomy();
    if (name == "error_category") return error_category_taxonomy();
    throw ConfigError("unknown taxonomy '" + name + "' (expected question_format or error_category)");
}

TaxonomySpec load_taxonomy(const std::filesystem::path& path) {
    TaxonomySpec s;
    try {
        s = json::parse(read_file(path)).get<TaxonomySpec>();
    } catch (const json::exception& e) {
        throw ConfigError("taxonomy " + path.string() + ": " + e.what());
    }
    if (s.name.empty() || s.labels.empty()) throw ConfigError("taxonomy " + path.string() + " needs a name and labels");
    std::set<std::string> seen;
    for (const auto& l : s.labels) {
        if (l.label.empty() || to_lower(l.label) == kUnclassified)
            throw ConfigError("taxonomy " + path.string() + ": invalid label '" + l.label + "'");
        if (!seen.insert(to_lower(l.label)).second)
            throw ConfigError("taxonomy " + path.string() + ": duplicate label '" + l.label + "'");
    }
    return s;
}

std::string judge_prompt(const TaxonomySpec& spec, const CRSample& sample) {
    std::ostringstream out;
    out << "You will classify a question-answer pair about an image into exactly one category.\n\n"
        << "Categories:\n";
    for (const auto& l : spec.labels)
        out << "- " << l.label << ": " << l.definition << " Example: " << l.example << "\n";
    out << "\nQuestion: " << sample.question_text << "\n"
        << "Correct answer: " << sample.positive << "\n"
        << "Wrong answer: " << sample.negative << "\n\n"
        << "Reply with exactly one category name from this list and nothing else: ";
    auto names = spec.label_names();
    for (std::size_t i = 0; i < names.size(); ++i) out << (i ? ", " : "") << names[i];
    out << ".";
    return out.str();
}

std::string judge_reprompt(const TaxonomySpec& spec, const std::string& previous) {
    std::ostringstream out;
    out << "\"" << previous << "\" is not one of the allowed categories. Reply with exactly one of: ";
    auto names = spec.label_names();
    for (std::size_t i = 0; i < names.size(); ++i) out << (i ? ", " : "") << names[i];
    out << ".";
    return out.str();
}

std::optional<std::string> match_label(const TaxonomySpec& spec, const std::string& reply) {
    std::string s = trim(reply);
    auto strip = [&] {
        bool changed = true;
        while (changed && !s.empty()) {
            changed = false;
            const std::string wrap = "\"'`*_";
            if (wrap.find(s.front()) != std::string::npos) {
                s.erase(0, 1);
                changed = true;
            }
            if (!s.empty() && (wrap + ".!,;:").find(s.back()) != std::string::npos) {
                s.pop_back();
                changed = true;
            }
            s = trim(s);
        }
    };
    strip();
    for (const char* prefix : {"label:", "category:", "answer:"}) {
        if (to_lower(s).rfind(prefix, 0) == 0) {
            s = trim(s.substr(std::string(prefix).size()));
            strip();
            break;
        }
    }
    const auto low = to_lower(s);
    for (const auto& l : spec.labels)
        if (to_lower(l.label) == low) return l.label;
    return std::nullopt;
}

void to_json(json& j, const TaxonomyLabel& l) {
    j = json{{"sample_id", l.sample_id},   {"taxonomy_name", l.taxonomy_name}, {"label", l.label},
             {"judge_agent", l.judge_agent}, {"raw_judgment", l.raw_judgment},  {"reprompted", l.reprompted}};
}

void from_json(const json& j, TaxonomyLabel& l) {
    l.sample_id = j.at("sample_id").get<std::string>();
    l.taxonomy_name = j.at("taxonomy_name").get<std::string>();
    l.label = j.at("label").get<std::string>();
    l.judge_agent = j.at("judge_agent").get<std::string>();
    l.raw_judgment = j.at("raw_judgment").get<std::vector<std::string>>();
    l.reprompted = j.value("reprompted", false);
}

TaxonomyLabel classify(Gateway& gw, const std::string& judge, const CRSample& sample, const TaxonomySpec& spec,
                       ExchangeSink* sink) {
    TaxonomyLabel out;
    out.sample_id = sample.sample_id;
    out.taxonomy_name = spec.name;
    out.judge_agent = judge;
    out.label = kUnclassified;

    ChatRequest req;
    req.gen_params = gw.profile(judge).gen_params;
    req.messages.push_back({"user", judge_prompt(spec, sample)});
    const ExchangeContext ctx{"classify:" + spec.name, sample.image_id, sample.sample_id, sink};

    for (int attempt = 0; attempt < 2; ++attempt) {
        std::string reply;
        try {
            reply = gw.generate(judge, req, ctx);
            out.raw_judgment.push_back(reply);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            out.raw_judgment.push_back(std::string("error: ") + e.what());
        }
        if (auto label = match_label(spec, reply)) {
            out.label = *label;
            return out;
        }
        if (attempt == 0) {
            out.reprompted = true;
            req.messages.push_back({"assistant", reply});
            req.messages.push_back({"user", judge_reprompt(spec, reply)});
        }
    }
    return out;
}

std::vector<TaxonomyLabel> classify_all(Gateway& gw, const std::string& judge, const Dataset& dataset,
                                        const TaxonomySpec& spec, int workers, ExchangeSink* sink) {
    std::vector<TaxonomyLabel> out(dataset.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex mu;
    const int width = std::max(1, std::min<int>(workers, static_cast<int>(dataset.size())));
    {
        std::vector<std::jthread> pool;
        for (int w = 0; w < width; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < dataset.size(); i = next++) {
                    try {
                        out[i] = classify(gw, judge, dataset[i], spec, sink);
                    } catch (...) {
                        std::lock_guard g(mu);
                        if (!fatal) fatal = std::current_exception();
                        next = dataset.size();
                    }
                }
            });
    }
    if (fatal) std::rethrow_exception(fatal);
    return out;
}

void to_json(json& j, const MistakeDistribution& d) {
    json rows = json::array();
    for (const auto& s : d.per_label)
        rows.push_back(json{{"label", s.label},
                            {"n_samples", s.n_samples},
                            {"n_mistakes", s.n_mistakes},
                            {"mistake_rate", s.mistake_rate ? json(*s.mistake_rate) : json(nullptr)}});
    j = json{{"agent_name", d.agent_name},
             {"taxonomy_name", d.taxonomy_name},
             {"per_label", rows},
             {"excluded_no_result", d.excluded_no_result}};
}

void from_json(const json& j, MistakeDistribution& d) {
    d.agent_name = j.at("agent_name").get<std::string>();
    d.taxonomy_name = j.at("taxonomy_name").get<std::string>();
    d.per_label.clear();
    for (const auto& r : j.at("per_label")) {
        LabelStats s;
        s.label = r.at("label").get<std::string>();
        s.n_samples = r.at("n_samples").get<std::size_t>();
        s.n_mistakes = r.at("n_mistakes").get<std::size_t>();
        if (!r.at("mistake_rate").is_null()) s.mistake_rate = r.at("mistake_rate").get<double>();
        d.per_label.push_back(s);
    }
    d.excluded_no_result = j.value("excluded_no_result", std::size_t{0});
}

MistakeDistribution mistake_rates(const TaxonomySpec& spec, const std::vector<TaxonomyLabel>& labels,
                                  const std::vector<EvalResult>& results, const std::string& agent) {
    std::map<std::string, const EvalResult*> by_sample;
    for (const auto& r : results)
        if (r.agent_name == agent && r.determinate) by_sample[r.sample_id] = &r;

    MistakeDistribution d;
    d.agent_name = agent;
    d.taxonomy_name = spec.name;
    std::map<std::string, LabelStats> acc;
    for (const auto& name : spec.label_names()) acc[name].label = name;

    std::set<std::string> seen;
    for (const auto& l : labels) {
        if (l.taxonomy_name != spec.name || !seen.insert(l.sample_id).second) continue;
        auto it = by_sample.find(l.sample_id);
        if (it == by_sample.end()) {
            ++d.excluded_no_result;
            continue;
        }
        auto& s = acc[l.label];
        s.label = l.label;
        ++s.n_samples;
        if (!it->second->is_correct) ++s.n_mistakes;
    }
    auto finish = [](LabelStats s) {
        if (s.n_samples > 0)
            s.mistake_rate = 100.0 * static_cast<double>(s.n_mistakes) / static_cast<double>(s.n_samples);
        return s;
    };
    for (const auto& name : spec.label_names()) d.per_label.push_back(finish(acc[name]));
    for (const auto& [name, s] : acc)
        if (!spec.has_label(name)) d.per_label.push_back(finish(s));
    return d;
}

std::string chart_filename(const MistakeDistribution& d) {
    auto clean = [](const std::string& s) {
        std::string out;
        for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
        return out;
    };
    return "mistakes_" + clean(d.taxonomy_name) + "_" + clean(d.agent_name) + ".png";
}

ReportFiles emit_report(const std::vector<MistakeDistribution>& distributions, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    ReportFiles files;
    files.json_path = out_dir / "distributions.json";
    files.csv_path = out_dir / "distributions.csv";
    write_file_atomic(files.json_path, json(distributions).dump(2) + "\n");

    std::ostringstream csv;
    csv << "agent,taxonomy,label,n_samples,n_mistakes,mistake_rate\n";
    for (const auto& d : distributions)
        for (const auto& s : d.per_label)
            csv << d.agent_name << "," << d.taxonomy_name << "," << s.label << "," << s.n_samples << ","
                << s.n_mistakes << "," << (s.mistake_rate ? format1(*s.mistake_rate) : "") << "\n";
    write_file_atomic(files.csv_path, csv.str());

    for (const auto& d : distributions) {
        auto path = out_dir / chart_filename(d);
        render_chart_png(d, path);
        files.charts.push_back(path);
    }
    return files;
}

}  // namespace forge
