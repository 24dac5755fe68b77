#include <doctest.h>

#include <cmath>

#include "featlab/errors.hpp"
#include "featlab/eval.hpp"
#include "featlab/rng.hpp"

using namespace featlab;

TEST_SUITE("eval") {

TEST_CASE("delta prob formula and clamping")
{
    auto d = delta_prob_from(0.8, 0.2);
    CHECK(d.delta_raw == doctest::Approx(0.75));
    CHECK(d.delta_clamped == doctest::Approx(0.75));
    d = delta_prob_from(0.5, 1.0);
    CHECK(d.delta_raw == doctest::Approx(-1.0));
    CHECK(d.delta_clamped == 0.0);
}

TEST_CASE("paired t oracle")
{
    const std::vector<double> a = {1, 2, 3, 4}, b = {0, 1, 1, 3};
    const auto r = paired_t(a, b);
    CHECK(std::fabs(r.t - 5.0) < 1e-9);
    CHECK(std::fabs(r.cohens_d - 2.5) < 1e-9);
    CHECK(r.n == 4);
    CHECK(r.p > 0.0);
    CHECK(r.p < 0.05);
}

TEST_CASE("paired t shift invariance, antisymmetry and degenerate cases")
{
    Rng rng(1);
    std::vector<double> a(30), b(30);
    for (int i = 0; i < 30; ++i) {
        a[i] = rng.normal(1.0, 1.0);
        b[i] = rng.normal();
    }
    auto shift = [](std::vector<double> v, double c) {
        for (auto& x : v) x += c;
        return v;
    };
    const auto r = paired_t(a, b);
    CHECK(std::fabs(paired_t(shift(a, 7.5), shift(b, 7.5)).t - r.t) < 1e-9);
    CHECK(std::fabs(paired_t(b, a).t + r.t) < 1e-9);
    CHECK(std::fabs(paired_t(b, a).cohens_d + r.cohens_d) < 1e-9);
    CHECK(std::fabs(paired_t(b, a).p - r.p) < 1e-12);

    CHECK_THROWS_AS(paired_t(a, a), NumericError);
    const std::vector<double> ints = {0, 3, -2, 5, 1};
    const auto o = paired_t(shift(ints, 1.0), ints);
    CHECK(o.overflow);
    CHECK(o.p == 0.0);
    CHECK_THROWS_AS(paired_t({1.0}, {2.0}), PreconditionError);
}

TEST_CASE("pearson")
{
    CHECK(*pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
    CHECK(*pearson({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
    CHECK_FALSE(pearson({1, 1, 1}, {1, 2, 3}).has_value());
}

TEST_CASE("KDE integrates to one and respects symmetry")
{
    Rng rng(2);
    std::vector<double> v;
    for (int i = 0; i < 500; ++i) v.push_back(rng.normal());
    const auto k = kde(v);
    double area = 0.0;
    for (std::size_t i = 1; i < k.x.size(); ++i) area += 0.5 * (k.density[i] + k.density[i - 1]) * (k.x[i] - k.x[i - 1]);
    CHECK(std::fabs(area - 1.0) < 0.01);

    const std::vector<double> sym = {-2, -1, -0.5, 0.5, 1, 2};
    const auto s = kde(sym, 0.4, 201);
    for (std::size_t i = 0; i < s.density.size(); ++i) CHECK(std::fabs(s.density[i] - s.density[s.density.size() - 1 - i]) < 1e-6);
}

TEST_CASE("KDE of a large uniform sample is near one inside the interval")
{
    Rng rng(3);
    std::vector<double> v;
    for (int i = 0; i < 20000; ++i) v.push_back(rng.uniform());
    const auto k = kde(v, 0.02, 400);
    double worst = 0.0;
    for (std::size_t i = 0; i < k.x.size(); ++i) {
        if (k.x[i] > 0.1 && k.x[i] < 0.9) worst = std::max(worst, std::fabs(k.density[i] - 1.0));
    }
    CHECK(worst < 0.1);
}

TEST_CASE("overlap windows")
{
    using V = std::vector<std::vector<UnitId>>;
    CHECK(overlap_ratio(V{{{0, 3}}}, V{{{0, 6}}}, 2).mean == 1.0);
    CHECK(overlap_ratio(V{{{0, 3}}}, V{{{0, 7}}}, 2).mean == 1.0);
    CHECK(overlap_ratio(V{{{0, 3}}}, V{{{0, 9}}}, 2).mean == 0.0);
    CHECK(overlap_ratio(V{{{0, 3}}}, V{{{1, 6}}}, 2).mean == 0.0);
    const auto r = overlap_ratio(V{{{0, 1}, {1, 0}}, {{0, 5}}}, V{{{0, 4}, {0, 5}, {1, 3}, {0, 9}}, {}}, 4);
    CHECK(r.ratios == std::vector<double>{0.75});
    CHECK(r.skipped == 1);
    const V self = {{{0, 1}, {2, 7}}, {{1, 4}}};
    CHECK(overlap_ratio(self, self, 1).mean == 1.0);
}

TEST_CASE("bootstrap of a constant")
{
    const auto p = bootstrap_mean(std::vector<double>(50, 0.4), BootstrapConfig{});
    CHECK(p.mean == doctest::Approx(0.4));
    CHECK(p.stderr_ == doctest::Approx(0.0));
}

TEST_CASE("mixture fixture gives exactly p/100")
{
    std::vector<TokenizedPrompt> rel(300), other(300);
    for (auto& p : rel) p.relation = "R";
    for (auto& p : other) p.relation = "O";
    MixtureConfig cfg;
    cfg.total = 200;
    const auto res = monosemanticity_experiment(rel, other, [](const TokenizedPrompt& p) { return p.relation == "R" ? 1.0 : 0.0; }, cfg);
    REQUIRE(res.size() == 6);
    for (const auto& m : res) {
        CHECK(m.mean == static_cast<double>(m.proportion) / 100.0);
        CHECK(m.samples.size() == 200);
    }
    CHECK(res.front().mean == 0.0);
    cfg.total = 1000;
    CHECK_THROWS_AS(monosemanticity_experiment(rel, other, [](const TokenizedPrompt&) { return 0.0; }, cfg), PreconditionError);
}

}
