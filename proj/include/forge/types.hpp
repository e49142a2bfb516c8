#pragma once

#include <string>
#include <vector>

#include "forge/util.hpp"

namespace forge {

enum class Partition { replace_att, replace_obj, replace_rel, custom };

std::string to_string(Partition p);
Partition parse_partition(const std::string& s);
const std::vector<Partition>& standard_partitions();

struct ImageRecord {
    std::string image_id;
    Partition partition = Partition::custom;
    std::string source_uri;
    std::string bytes_hash;  // sha256 of the image bytes, filled at ingest
};

enum class DescriptionStage { stage1, stage2 };

struct Description {
    std::string image_id;
    std::string agent_name;
    std::string text;
    DescriptionStage stage = DescriptionStage::stage1;
};

/// Location of a parsed item inside a stored raw strong-agent output.
struct Provenance {
    std::string stage;  // stage3 | stage6
    std::string image_id;
    int block = 0;       // block number as printed by the agent
    int line_start = 0;  // 1-based, inclusive
    int line_end = 0;
    int negative_index = 0;  // k of the A-k line; 0 for question-level provenance

    bool operator==(const Provenance&) const = default;
};

struct CRQuestion {
    std::string question_id;
    std::string image_id;
    int iteration = 1;
    std::string question_text;
    std::string positive;
    std::vector<std::string> negatives;
    Provenance provenance;
};

struct CRSample {
    std::string sample_id;
    std::string question_id;
    std::string image_id;
    Partition partition = Partition::custom;
    int iteration = 1;
    std::string question_text;
    std::string positive;
    std::string negative;
    Provenance provenance;

    bool operator==(const CRSample&) const = default;
};

struct OpenAnswer {
    std::string question_id;
    std::string agent_name;
    std::string text;
};

void to_json(json& j, const ImageRecord& r);
void from_json(const json& j, ImageRecord& r);
void to_json(json& j, const Description& d);
void from_json(const json& j, Description& d);
void to_json(json& j, const Provenance& p);
void from_json(const json& j, Provenance& p);
void to_json(json& j, const CRQuestion& q);
void from_json(const json& j, CRQuestion& q);
void to_json(json& j, const CRSample& s);
void from_json(const json& j, CRSample& s);
void to_json(json& j, const OpenAnswer& a);
void from_json(const json& j, OpenAnswer& a);

/// Content-derived, stable across runs.
std::string make_sample_id(const std::string& question_id, const std::string& question_text,
                           const std::string& positive, const std::string& negative);

/// One sample per (question, negative) pair.
std::vector<CRSample> explode(const CRQuestion& q, Partition partition);

}  // namespace forge
