#include <doctest.h>

#include <map>
#include <set>

#include "featlab/datasets.hpp"
#include "featlab/errors.hpp"
#include "featlab/toylm.hpp"

using namespace featlab;

TEST_SUITE("datasets") {

TEST_CASE("privacy corpus counts and formats")
{
    const auto p = gen_privacy_dataset(7);
    CHECK(p.size() == 1500);
    std::map<std::string, int> per;
    for (const auto& f : p) {
        ++per[f.relation];
        CHECK(f.paraphrases.size() == 6);
        CHECK(valid_privacy_answer(f.relation, f.answer));
    }
    CHECK(per[kPhone] == 500);
    CHECK(per[kAddress] == 500);
    CHECK(per[kEmail] == 500);
    CHECK(entries(p).size() == 9000);
}

TEST_CASE("privacy answer validators")
{
    CHECK(valid_phone("555-234-5678"));
    CHECK_FALSE(valid_phone("556-234-5678"));
    CHECK_FALSE(valid_phone("555-2345-678"));
    std::string email;
    for (const auto& f : gen_privacy_dataset(1)) {
        if (f.relation == kEmail) {
            email = f.answer;
            break;
        }
    }
    CHECK(valid_email(email));
    CHECK_FALSE(valid_email(email + "x"));
    CHECK_FALSE(valid_email("no-at-sign.com"));
    CHECK_FALSE(valid_address(""));
}

TEST_CASE("regeneration is byte-identical per seed")
{
    CHECK(to_jsonl(gen_privacy_dataset(7)) == to_jsonl(gen_privacy_dataset(7)));
    CHECK(to_jsonl(gen_privacy_dataset(7)) != to_jsonl(gen_privacy_dataset(8)));
    const auto rel = default_relations();
    CHECK(to_jsonl(gen_fact_dataset(rel, 20, 7)) == to_jsonl(gen_fact_dataset(rel, 20, 7)));
}

TEST_CASE("fact corpus shape")
{
    std::vector<RelationSpec> five;
    for (const auto& r : default_relations()) {
        for (const auto& code : monosemanticity_relation_codes())
            if (r.code == code) five.push_back(r);
    }
    REQUIRE(five.size() == 5);
    const auto facts = gen_fact_dataset(five, 100, 3);
    CHECK(facts.size() == 500);
    std::set<std::string> uuids;
    for (const auto& f : facts) uuids.insert(f.uuid);
    CHECK(uuids.size() == 500);

    bool official = false;
    for (const auto& f : facts) {
        if (f.relation != "P37") continue;
        official = official || f.paraphrases.front().rfind("The official language of " + f.subject + " is", 0) == 0;
    }
    CHECK(official);
}

TEST_CASE("entries carry uuid, sentence, answer and relation")
{
    const auto facts = gen_fact_dataset(default_relations(), 2, 1);
    const auto line = to_jsonl(facts).substr(0, to_jsonl(facts).find('\n'));
    const auto j = nlohmann::json::parse(line);
    CHECK(j.size() == 4);
    for (const char* k : {"uuid", "sentence", "answer", "relation"}) CHECK(j.contains(k));
}

TEST_CASE("JSONL round trip preserves every prompt in order")
{
    const auto facts = gen_fact_dataset(default_relations(), 5, 11);
    const auto back = from_jsonl(to_jsonl(facts));
    const auto a = entries(facts), b = entries(back);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].uuid == b[i].uuid);
        CHECK(a[i].sentence == b[i].sentence);
        CHECK(a[i].answer == b[i].answer);
        CHECK(a[i].paraphrase == b[i].paraphrase);
    }
    CHECK(to_jsonl(back) == to_jsonl(facts));
}

TEST_CASE("paraphrase split halves the privacy corpus with disjoint prompts")
{
    const auto p = gen_privacy_dataset(7);
    const auto s = split(p, ParaphraseSplit{{0, 1, 2}, {3, 4, 5}}, 0);
    const auto tr = entries(s.train), ev = entries(s.eval);
    CHECK(tr.size() == 4500);
    CHECK(ev.size() == 4500);
    std::set<std::string> train_sentences;
    for (const auto& e : tr) train_sentences.insert(e.sentence);
    for (const auto& e : ev) CHECK(train_sentences.count(e.sentence) == 0);
    CHECK_THROWS_AS(split(p, ParaphraseSplit{{0, 1}, {1, 2}}, 0), PreconditionError);
}

TEST_CASE("fact holdout")
{
    const auto facts = gen_fact_dataset(default_relations(), 50, 2);
    REQUIRE(facts.size() == 500);
    const auto s = split(facts, FactHoldout{0.2}, 9);
    CHECK(s.train.size() == 400);
    CHECK(s.eval.size() == 100);
    CHECK(to_jsonl(split(facts, FactHoldout{0.2}, 9).eval) == to_jsonl(s.eval));
}

TEST_CASE("tokenizer vocabulary and fallback")
{
    const auto t = Tokenizer::build({"the cat", "the dog"});
    CHECK(t.size() == 6);
    CHECK(t.word(Tokenizer::kEos) == "<eos>");
    CHECK(t.encode("the cat") == std::vector<int>{3, 4});
    CHECK(t.encode("the dog") == std::vector<int>{3, 5});
    CHECK(t.encode("the bird") == std::vector<int>{3, Tokenizer::kUnk});
    CHECK(Tokenizer::build({"the cat", "the dog"}).to_json() == t.to_json());
    CHECK(Tokenizer::from_json(t.to_json()).encode("dog cat") == t.encode("dog cat"));
}

}
