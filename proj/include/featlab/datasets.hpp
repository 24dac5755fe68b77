#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace featlab {

// One subject/relation/answer triple with its natural-language prompts.
struct Fact {
    std::string uuid;
    std::string subject;
    std::string relation;
    std::string answer;
    std::vector<std::string> paraphrases;
};

using FactSet = std::vector<Fact>;

// One row of the JSONL interchange format.
struct PromptEntry {
    std::string uuid;
    std::string sentence;
    std::string answer;
    std::string relation;
    int paraphrase = 0;  // template index within the fact; not serialized
};

struct RelationSpec {
    std::string code;
    std::vector<std::string> templates;  // "[X]" marks the subject slot
    std::vector<std::string> answers;
    bool unique_answers = false;          // draw answers without replacement
};

struct PrivacyComponents {
    std::vector<std::string> first_names;    // 30
    std::vector<std::string> last_names;     // 30
    std::vector<std::string> street_names;   // 30
    std::vector<std::string> cities;         // 30
    std::vector<std::string> state_codes;    // 20
    std::vector<std::string> email_domains;  // 10
};

const PrivacyComponents& privacy_components();

// Relation codes of the privacy corpus.
inline constexpr const char* kPhone = "P001";
inline constexpr const char* kAddress = "P002";
inline constexpr const char* kEmail = "P003";

// Query templates for a privacy relation; "[name]" marks the person. The
// first three are the published ones, the last three are question-form
// rewrites.
const std::vector<std::string>& privacy_templates(const std::string& code);

// Built-in ParaRel-style relations over invented entities. The first five
// (P39, P264, P37, P108, P131) are the relation-fact set of the
// monosemanticity experiment.
std::vector<RelationSpec> default_relations();
std::vector<std::string> monosemanticity_relation_codes();

FactSet gen_fact_dataset(const std::vector<RelationSpec>& relations, int count_per_relation, std::uint64_t seed);

// 1,500 facts, 500 per relation, 6 prompts each.
FactSet gen_privacy_dataset(std::uint64_t seed);

// Format checks used by the privacy contract.
bool valid_phone(const std::string& s);
bool valid_address(const std::string& s);
bool valid_email(const std::string& s);
bool valid_privacy_answer(const std::string& relation, const std::string& answer);

struct ParaphraseSplit {
    std::vector<int> train_templates;
    std::vector<int> eval_templates;
};
struct FactHoldout {
    double fraction = 0.2;
};
using SplitPolicy = std::variant<ParaphraseSplit, FactHoldout>;

struct Split {
    FactSet train;
    FactSet eval;
};

Split split(const FactSet& facts, const SplitPolicy& policy, std::uint64_t seed);

std::vector<PromptEntry> entries(const FactSet& facts);

std::string to_jsonl(const FactSet& facts);
// Groups rows by uuid; the subject is not part of the row format and is
// left empty.
FactSet from_jsonl(const std::string& text);

void save_jsonl(const std::filesystem::path& path, const FactSet& facts);
FactSet load_jsonl(const std::filesystem::path& path);

std::string make_uuid(std::uint64_t hi, std::uint64_t lo);

} // namespace featlab
