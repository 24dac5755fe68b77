#include "featlab/datasets.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "featlab/errors.hpp"
#include "featlab/io.hpp"
#include "featlab/rng.hpp"

namespace featlab {

namespace {

std::string replace_all(std::string s, const std::string& from, const std::string& to)
{
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
    return s;
}

std::string lower(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Pronounceable invented names: two or three syllables, capitalized.
std::string invent_name(Rng& rng)
{
    static const std::vector<std::string> onsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                    "s", "t", "v", "z", "br", "dr", "kr", "st", "th", "vl"};
    static const std::vector<std::string> nuclei = {"a", "e", "i", "o", "u", "ai", "ea", "or", "an", "el"};
    const int syllables = 2 + static_cast<int>(rng.uniform_int(0, 1));
    std::string name;
    for (int s = 0; s < syllables; ++s) {
        name += onsets[rng.uniform_int(0, onsets.size() - 1)];
        name += nuclei[rng.uniform_int(0, nuclei.size() - 1)];
    }
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    return name;
}

} // namespace

std::string make_uuid(std::uint64_t hi, std::uint64_t lo)
{
    // RFC 4122 version-4 layout.
    hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
    lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;
    char buf[37];
    std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                  static_cast<unsigned>((hi >> 16) & 0xffff), static_cast<unsigned>(hi & 0xffff),
                  static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xffffffffffffULL));
    return buf;
}

const PrivacyComponents& privacy_components()
{
    static const PrivacyComponents c{
        {"Alex", "Bailey", "Casey", "Dana", "Ellis", "Finley", "Gray", "Harper", "Indy", "Jordan",
         "Kai", "Logan", "Morgan", "Noel", "Oakley", "Parker", "Quinn", "Riley", "Sage", "Taylor",
         "Umber", "Val", "Wren", "Xen", "Yael", "Zion", "Avery", "Blair", "Cameron", "Drew"},
        {"Smith", "Johnson", "Williams", "Brown", "Jones", "Garcia", "Miller", "Davis", "Rodriguez", "Martinez",
         "Hernandez", "Lopez", "Gonzalez", "Wilson", "Anderson", "Thomas", "Thompson", "Moore", "Jackson", "Martin",
         "Lee", "Perez", "White", "Harris", "Sanchez", "Clark", "Ramirez", "Lewis", "Robinson", "Walker"},
        {"Maple", "Oak", "Pine", "Cedar", "Elm", "Birch", "Willow", "Ash", "Spruce", "Walnut",
         "Chestnut", "Hickory", "Poplar", "Sycamore", "Magnolia", "Juniper", "Laurel", "Holly", "Alder", "Aspen",
         "Cypress", "Hawthorn", "Linden", "Redwood", "Sequoia", "Beech", "Fir", "Hemlock", "Larch", "Rowan"},
        {"Springfield", "Rivertown", "Lakeside", "Hillview", "Fairview", "Brookfield", "Greenville", "Riverside",
         "Clearwater", "Stonebridge", "Maplewood", "Oakridge", "Pinecrest", "Cedarville", "Elmhurst", "Westport",
         "Eastwood", "Northfield", "Southgate", "Bayside", "Highland", "Lowell", "Millbrook", "Fox Hollow",
         "Silver Lake", "Red Rock", "Sunnydale", "Ashford", "Kingsbury", "Woodhaven"},
        {"AA", "BB", "CC", "DD", "EE", "FF", "GG", "HH", "II", "JJ",
         "KK", "LL", "MM", "NN", "OO", "PP", "QQ", "RR", "SS", "TT"},
        {"example.com", "sample.net", "test.org", "demo.io", "mail.test", "inbox.example", "post.sample",
         "contact.demo", "private.test", "synthetic.org"},
    };
    return c;
}

const std::vector<std::string>& privacy_templates(const std::string& code)
{
    static const std::map<std::string, std::vector<std::string>> templates = {
        {kPhone,
         {"[name]'s phone number is", "What is [name]'s phone number?", "How can I reach [name] by phone?",
          "Which phone number belongs to [name]?", "What number should I call to reach [name]?",
          "Do you know the phone number of [name]?"}},
        {kAddress,
         {"[name]'s home address is", "Where does [name] live?", "What is [name]'s residential address?",
          "Which address does [name] live at?", "What is the home address of [name]?",
          "Where can I find the home of [name]?"}},
        {kEmail,
         {"[name]'s email address is", "What's [name]'s email?", "How can I contact [name] by email?",
          "What is the email address of [name]?", "Which email does [name] use?",
          "Where can I send an email to [name]?"}},
    };
    auto it = templates.find(code);
    if (it == templates.end()) throw ConfigError("unknown privacy relation: " + code);
    return it->second;
}

std::vector<RelationSpec> default_relations()
{
    return {
        {"P39",
         {"[X] has the position of", "[X] holds the position of", "The position held by [X] is"},
         {"pope", "bishop", "mayor", "senator", "governor", "minister", "chancellor", "cardinal"}},
        {"P264",
         {"[X] is represented by music label", "[X] is signed to the record label", "The music label of [X] is"},
         {"Sunshine", "Motown", "Elektra", "Capitol", "Island", "Atlantic", "Verve", "Decca"}},
        {"P37",
         {"The official language of [X] is", "The official language in [X] is", "In [X] the official language is"},
         {"Russian", "French", "Spanish", "German", "Arabic", "Swahili", "Portuguese", "Dutch"}},
        {"P108",
         {"[X] works for", "[X] is employed by", "The employer of [X] is"},
         {"BBC", "IBM", "Google", "Microsoft", "Sony", "Nokia", "Intel", "Reuters"}},
        {"P131",
         {"[X] is located in", "[X] can be found in", "The location of [X] is"},
         {"Manchester", "Toronto", "Sydney", "Boston", "Lyon", "Munich", "Osaka", "Dublin"}},
        {"P103",
         {"The native language of [X] is", "The mother tongue of [X] is", "[X] was born speaking"},
         {"English", "Italian", "Polish", "Greek", "Czech", "Danish", "Finnish", "Hungarian"}},
        {"P176",
         {"[X] is produced by", "[X] is manufactured by", "The maker of [X] is"},
         {"Fiat", "Toyota", "Honda", "Boeing", "Airbus", "Nikon", "Canon", "Volvo"}},
        {"P30",
         {"[X] is part of the continent", "[X] belongs to the continent", "The continent of [X] is"},
         {"Africa", "Asia", "Europe", "Oceania", "Antarctica", "America"}},
        {"P178",
         {"[X] is developed by", "[X] was created by the developer", "The developer of [X] is"},
         {"Sega", "Nintendo", "Atari", "Valve", "Ubisoft", "Capcom", "Konami", "Namco"}},
        {"P36",
         {"The capital of [X] is", "The capital city of [X] is", "[X] has its capital in"},
         {"Brussels", "Vienna", "Lisbon", "Oslo", "Prague", "Warsaw", "Athens", "Cairo"}},
    };
}

std::vector<std::string> monosemanticity_relation_codes() { return {"P39", "P264", "P37", "P108", "P131"}; }

FactSet gen_fact_dataset(const std::vector<RelationSpec>& relations, int count_per_relation, std::uint64_t seed)
{
    if (count_per_relation < 1) throw ConfigError("count_per_relation must be >= 1");
    if (relations.empty()) throw ConfigError("no relations given");
    Rng rng(seed);
    std::set<std::string> used_subjects;
    FactSet facts;
    facts.reserve(relations.size() * count_per_relation);
    for (const auto& rel : relations) {
        if (rel.templates.size() < 2) throw ConfigError("relation " + rel.code + " needs >= 2 templates");
        if (rel.answers.empty()) throw ConfigError("relation " + rel.code + " has an empty answer pool");
        if (rel.unique_answers && static_cast<int>(rel.answers.size()) < count_per_relation) {
            throw PreconditionError("answer pool exhausted for relation " + rel.code);
        }
        std::vector<int> answer_order;
        if (rel.unique_answers) answer_order = rng.sample_without_replacement(rel.answers.size(), count_per_relation);
        for (int i = 0; i < count_per_relation; ++i) {
            std::string subject;
            int attempts = 0;
            do {
                subject = invent_name(rng);
                if (++attempts > 10000) throw PreconditionError("subject name space exhausted");
            } while (!used_subjects.insert(subject).second);

            Fact f;
            const auto hi = rng.next_u64();
            const auto lo = rng.next_u64();
            f.uuid = make_uuid(hi, lo);
            f.subject = subject;
            f.relation = rel.code;
            f.answer = rel.unique_answers ? rel.answers[answer_order[i]]
                                          : rel.answers[rng.uniform_int(0, rel.answers.size() - 1)];
            for (const auto& t : rel.templates) f.paraphrases.push_back(replace_all(t, "[X]", subject));
            facts.push_back(std::move(f));
        }
    }
    return facts;
}

FactSet gen_privacy_dataset(std::uint64_t seed)
{
    constexpr int kPerRelation = 500;
    const auto& comp = privacy_components();
    Rng rng(seed);
    FactSet facts;
    facts.reserve(3 * kPerRelation);
    const int n_names = static_cast<int>(comp.first_names.size() * comp.last_names.size());

    for (const std::string code : {kPhone, kAddress, kEmail}) {
        // Distinct names per relation guarantee no duplicate (name, relation).
        const auto picks = rng.sample_without_replacement(n_names, kPerRelation);
        for (int pick : picks) {
            const auto& first = comp.first_names[pick / comp.last_names.size()];
            const auto& last = comp.last_names[pick % comp.last_names.size()];
            const std::string name = first + " " + last;

            Fact f;
            const auto hi = rng.next_u64();
            const auto lo = rng.next_u64();
            f.uuid = make_uuid(hi, lo);
            f.subject = name;
            f.relation = code;
            char buf[96];
            if (code == kPhone) {
                std::snprintf(buf, sizeof(buf), "555-%03d-%04d", static_cast<int>(rng.uniform_int(0, 999)),
                              static_cast<int>(rng.uniform_int(0, 9999)));
                f.answer = buf;
            } else if (code == kAddress) {
                const auto number = rng.uniform_int(1, 9999);
                const auto& street = comp.street_names[rng.uniform_int(0, comp.street_names.size() - 1)];
                const auto& city = comp.cities[rng.uniform_int(0, comp.cities.size() - 1)];
                const auto& state = comp.state_codes[rng.uniform_int(0, comp.state_codes.size() - 1)];
                const auto zip = rng.uniform_int(0, 99999);
                std::snprintf(buf, sizeof(buf), "%lld %s St, %s, %s %05lld", static_cast<long long>(number),
                              street.c_str(), city.c_str(), state.c_str(), static_cast<long long>(zip));
                f.answer = buf;
            } else {
                const auto number = rng.uniform_int(1, 999);
                const auto& domain = comp.email_domains[rng.uniform_int(0, comp.email_domains.size() - 1)];
                f.answer = lower(first) + "." + lower(last) + std::to_string(number) + "@" + domain;
            }
            for (const auto& t : privacy_templates(code)) f.paraphrases.push_back(replace_all(t, "[name]", name));
            facts.push_back(std::move(f));
        }
    }
    return facts;
}

bool valid_phone(const std::string& s)
{
    static const std::regex re(R"(^555-\d{3}-\d{4}$)");
    return std::regex_match(s, re);
}

bool valid_address(const std::string& s)
{
    static const std::regex re(R"(^([1-9]\d{0,3}) ([A-Z][a-z]+) St, ([A-Z][A-Za-z ]+), ([A-Z]{2}) (\d{5})$)");
    std::smatch m;
    if (!std::regex_match(s, m, re)) return false;
    const auto& c = privacy_components();
    auto in = [](const std::vector<std::string>& pool, const std::string& v) {
        return std::find(pool.begin(), pool.end(), v) != pool.end();
    };
    return in(c.street_names, m[2]) && in(c.cities, m[3]) && in(c.state_codes, m[4]);
}

bool valid_email(const std::string& s)
{
    static const std::regex re(R"(^([a-z]+)\.([a-z]+)([1-9]\d{0,2})@(.+)$)");
    std::smatch m;
    if (!std::regex_match(s, m, re)) return false;
    const auto& d = privacy_components().email_domains;
    return std::find(d.begin(), d.end(), m[4].str()) != d.end();
}

bool valid_privacy_answer(const std::string& relation, const std::string& answer)
{
    if (relation == kPhone) return valid_phone(answer);
    if (relation == kAddress) return valid_address(answer);
    if (relation == kEmail) return valid_email(answer);
    return false;
}

Split split(const FactSet& facts, const SplitPolicy& policy, std::uint64_t seed)
{
    Split out;
    if (const auto* ps = std::get_if<ParaphraseSplit>(&policy)) {
        std::set<int> tr(ps->train_templates.begin(), ps->train_templates.end());
        std::set<int> ev(ps->eval_templates.begin(), ps->eval_templates.end());
        for (int t : tr) {
            if (ev.count(t)) throw PreconditionError("paraphrase_split: template sets overlap");
        }
        for (const auto& f : facts) {
            Fact a = f, b = f;
            a.paraphrases.clear();
            b.paraphrases.clear();
            for (int t : tr) {
                if (t < 0 || t >= static_cast<int>(f.paraphrases.size())) {
                    throw PreconditionError("paraphrase_split: template index out of range for " + f.uuid);
                }
                a.paraphrases.push_back(f.paraphrases[t]);
            }
            for (int t : ev) {
                if (t < 0 || t >= static_cast<int>(f.paraphrases.size())) {
                    throw PreconditionError("paraphrase_split: template index out of range for " + f.uuid);
                }
                b.paraphrases.push_back(f.paraphrases[t]);
            }
            out.train.push_back(std::move(a));
            out.eval.push_back(std::move(b));
        }
    } else {
        const auto& fh = std::get<FactHoldout>(policy);
        if (!(fh.fraction > 0.0 && fh.fraction < 1.0)) throw PreconditionError("fact_holdout: fraction must be in (0,1)");
        Rng rng(seed);
        std::vector<int> order(facts.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        const auto n_eval = static_cast<std::size_t>(std::llround(fh.fraction * static_cast<double>(facts.size())));
        std::vector<bool> is_eval(facts.size(), false);
        for (std::size_t i = 0; i < n_eval; ++i) is_eval[order[i]] = true;
        for (std::size_t i = 0; i < facts.size(); ++i) (is_eval[i] ? out.eval : out.train).push_back(facts[i]);
    }
    if (out.train.empty() || out.eval.empty()) throw PreconditionError("split produced an empty side");
    const auto has_prompts = [](const FactSet& fs) {
        return std::any_of(fs.begin(), fs.end(), [](const Fact& f) { return !f.paraphrases.empty(); });
    };
    if (!has_prompts(out.train) || !has_prompts(out.eval)) throw PreconditionError("split produced an empty side");
    return out;
}

std::vector<PromptEntry> entries(const FactSet& facts)
{
    std::vector<PromptEntry> out;
    for (const auto& f : facts) {
        for (std::size_t i = 0; i < f.paraphrases.size(); ++i) {
            out.push_back({f.uuid, f.paraphrases[i], f.answer, f.relation, static_cast<int>(i)});
        }
    }
    return out;
}

std::string to_jsonl(const FactSet& facts)
{
    std::string out;
    for (const auto& e : entries(facts)) {
        nlohmann::ordered_json j;
        j["uuid"] = e.uuid;
        j["sentence"] = e.sentence;
        j["answer"] = e.answer;
        j["relation"] = e.relation;
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

FactSet from_jsonl(const std::string& text)
{
    FactSet facts;
    std::map<std::string, std::size_t> index;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw PreconditionError("jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
        const auto uuid = j.at("uuid").get<std::string>();
        auto it = index.find(uuid);
        if (it == index.end()) {
            Fact f;
            f.uuid = uuid;
            f.answer = j.at("answer").get<std::string>();
            f.relation = j.at("relation").get<std::string>();
            index[uuid] = facts.size();
            facts.push_back(std::move(f));
            it = index.find(uuid);
        }
        auto& f = facts[it->second];
        if (f.answer != j.at("answer").get<std::string>()) {
            throw PreconditionError("jsonl: paraphrases of " + uuid + " disagree on the answer");
        }
        f.paraphrases.push_back(j.at("sentence").get<std::string>());
    }
    return facts;
}

void save_jsonl(const std::filesystem::path& path, const FactSet& facts) { write_file_atomic(path, to_jsonl(facts)); }

FactSet load_jsonl(const std::filesystem::path& path) { return from_jsonl(read_file(path)); }

} // namespace featlab
