#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "featlab/errors.hpp"
#include "featlab/experiments.hpp"

using namespace featlab;
namespace fs = std::filesystem;

TEST_SUITE("experiments") {

TEST_CASE("spearman")
{
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {1, 4, 9, 16}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    // Ties get average ranks: ranks of b are 1.5 1.5 3 4.
    CHECK(spearman({1, 2, 3, 4}, {5, 5, 6, 7}) == doctest::Approx(0.9486832980505138));
}

TEST_CASE("paraphrase filtering")
{
    std::vector<TokenizedPrompt> ps = {{"f1#0", "R", {}, {}}, {"f1#1", "R", {}, {}}, {"f2#0", "R", {}, {}}, {"f2#2", "R", {}, {}}};
    const auto kept = filter_paraphrases(ps, {0});
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].id == "f1#0");
    CHECK(kept[1].id == "f2#0");
    CHECK(filter_paraphrases(ps, {1, 2}).size() == 2);
    CHECK(paraphrase_index(ps[3]) == 2);
    CHECK_THROWS_AS(paraphrase_index(TokenizedPrompt{"bare", "R", {}, {}}), PreconditionError);
}

TEST_CASE("row split is seeded and disjoint")
{
    Matrix all(50, 2);
    for (int i = 0; i < 50; ++i) all(i, 0) = static_cast<float>(i);
    Matrix train, held, train2, held2;
    split_rows(all, 0.1, 3, train, held);
    CHECK(held.rows() == 5);
    CHECK(train.rows() == 45);
    split_rows(all, 0.1, 3, train2, held2);
    CHECK(held == held2);
    std::set<float> seen;
    for (int i = 0; i < train.rows(); ++i) seen.insert(train(i, 0));
    for (int i = 0; i < held.rows(); ++i) seen.insert(held(i, 0));
    CHECK(seen.size() == 50);
    CHECK_THROWS_AS(split_rows(all, 0.0, 3, train, held), ConfigError);
}

TEST_CASE("a corpus reloaded from JSONL tokenizes identically")
{
    CorpusConfig cfg;
    cfg.facts_per_relation = 5;
    cfg.privacy_facts_per_relation = 3;
    const auto c = make_corpus(cfg);
    const auto dir = fs::temp_directory_path() / "featlab_experiments_jsonl";
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_jsonl(dir / "facts.jsonl", c.facts);
    const auto back = load_jsonl(dir / "facts.jsonl");
    const auto a = tokenize(c.tokenizer, c.facts), b = tokenize(c.tokenizer, back);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].relation == b[i].relation);
        CHECK(a[i].prompt == b[i].prompt);
        CHECK(a[i].answer == b[i].answer);
    }
}

TEST_CASE("privacy subset keeps the first facts of each relation")
{
    const auto all = gen_privacy_dataset(7);
    const auto sub = privacy_subset(all, 4);
    std::map<std::string, int> per;
    for (const auto& f : sub) ++per[f.relation];
    CHECK(per.size() == 3);
    for (const auto& [r, n] : per) CHECK(n == 4);
}

}
