#include "forge/types.hpp"

#include "forge/error.hpp"

namespace forge {

std::string to_string(Partition p) {
    switch (p) {
        case Partition::replace_att: return "replace-att";
        case Partition::replace_obj: return "replace-obj";
        case Partition::replace_rel: return "replace-rel";
        case Partition::custom: return "custom";
    }
    return "custom";
}

Partition parse_partition(const std::string& s) {
    if (s == "replace-att") return Partition::replace_att;
    if (s == "replace-obj") return Partition::replace_obj;
    if (s == "replace-rel") return Partition::replace_rel;
    if (s == "custom") return Partition::custom;
    throw PreconditionError("unknown partition '" + s + "'");
}

const std::vector<Partition>& standard_partitions() {
    static const std::vector<Partition> all{Partition::replace_att, Partition::replace_obj, Partition::replace_rel};
    return all;
}

void to_json(json& j, const ImageRecord& r) {
    j = json{{"image_id", r.image_id},
             {"partition", to_string(r.partition)},
             {"source_uri", r.source_uri},
             {"bytes_hash", r.bytes_hash}};
}

void from_json(const json& j, ImageRecord& r) {
    r.image_id = j.at("image_id").get<std::string>();
    r.partition = parse_partition(j.at("partition").get<std::string>());
    r.source_uri = j.at("source_uri").get<std::string>();
    r.bytes_hash = j.value("bytes_hash", "");
}

void to_json(json& j, const Description& d) {
    j = json{{"image_id", d.image_id},
             {"agent_name", d.agent_name},
             {"text", d.text},
             {"stage", d.stage == DescriptionStage::stage1 ? "stage1" : "stage2"}};
}

void from_json(const json& j, Description& d) {
    d.image_id = j.at("image_id").get<std::string>();
    d.agent_name = j.at("agent_name").get<std::string>();
    d.text = j.at("text").get<std::string>();
    d.stage = j.at("stage").get<std::string>() == "stage1" ? DescriptionStage::stage1 : DescriptionStage::stage2;
}

void to_json(json& j, const Provenance& p) {
    j = json{{"stage", p.stage},           {"image_id", p.image_id}, {"block", p.block},
             {"line_start", p.line_start}, {"line_end", p.line_end}, {"negative_index", p.negative_index}};
}

void from_json(const json& j, Provenance& p) {
    p.stage = j.at("stage").get<std::string>();
    p.image_id = j.at("image_id").get<std::string>();
    p.block = j.at("block").get<int>();
    p.line_start = j.at("line_start").get<int>();
    p.line_end = j.at("line_end").get<int>();
    p.negative_index = j.value("negative_index", 0);
}

void to_json(json& j, const CRQuestion& q) {
    j = json{{"question_id", q.question_id},     {"image_id", q.image_id}, {"iteration", q.iteration},
             {"question_text", q.question_text}, {"positive", q.positive}, {"negatives", q.negatives},
             {"provenance", q.provenance}};
}

void from_json(const json& j, CRQuestion& q) {
    q.question_id = j.at("question_id").get<std::string>();
    q.image_id = j.at("image_id").get<std::string>();
    q.iteration = j.at("iteration").get<int>();
    q.question_text = j.at("question_text").get<std::string>();
    q.positive = j.at("positive").get<std::string>();
    q.negatives = j.at("negatives").get<std::vector<std::string>>();
    q.provenance = j.at("provenance").get<Provenance>();
}

void to_json(json& j, const CRSample& s) {
    j = json{{"sample_id", s.sample_id},
             {"question_id", s.question_id},
             {"image_id", s.image_id},
             {"partition", to_string(s.partition)},
             {"iteration", s.iteration},
             {"question", s.question_text},
             {"positive", s.positive},
             {"negative", s.negative},
             {"provenance", s.provenance}};
}

void from_json(const json& j, CRSample& s) {
    s.sample_id = j.at("sample_id").get<std::string>();
    s.question_id = j.value("question_id", "");
    s.image_id = j.at("image_id").get<std::string>();
    s.partition = parse_partition(j.at("partition").get<std::string>());
    s.iteration = j.at("iteration").get<int>();
    s.question_text = j.at("question").get<std::string>();
    s.positive = j.at("positive").get<std::string>();
    s.negative = j.at("negative").get<std::string>();
    s.provenance = j.at("provenance").get<Provenance>();
}

void to_json(json& j, const OpenAnswer& a) {
    j = json{{"question_id", a.question_id}, {"agent_name", a.agent_name}, {"text", a.text}};
}

void from_json(const json& j, OpenAnswer& a) {
    a.question_id = j.at("question_id").get<std::string>();
    a.agent_name = j.at("agent_name").get<std::string>();
    a.text = j.at("text").get<std::string>();
}

std::string make_sample_id(const std::string& question_id, const std::string& question_text,
                           const std::string& positive, const std::string& negative) {
    std::string key = question_id;
    for (const auto* part : {&question_text, &positive, &negative}) {
        key.push_back('\x1f');
        key += *part;
    }
    return sha256_hex(key).substr(0, 20);
}

std::vector<CRSample> explode(const CRQuestion& q, Partition partition) {
    std::vector<CRSample> out;
    out.reserve(q.negatives.size());
    for (std::size_t k = 0; k < q.negatives.size(); ++k) {
        CRSample s;
        s.question_id = q.question_id;
        s.image_id = q.image_id;
        s.partition = partition;
        s.iteration = q.iteration;
        s.question_text = q.question_text;
        s.positive = q.positive;
        s.negative = q.negatives[k];
        s.provenance = q.provenance;
        s.provenance.negative_index = static_cast<int>(k + 1);
        s.sample_id = make_sample_id(q.question_id, q.question_text, q.positive, s.negative);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace forge
