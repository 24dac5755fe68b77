#include <doctest.h>

#include "featlab/editing.hpp"
#include "featlab/errors.hpp"

using namespace featlab;

namespace {

ModelConfig tiny()
{
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_mlp = 12;
    c.vocab_size = 10;
    c.max_seq_len = 8;
    c.seed = 3;
    return c;
}

SelectedUnits features(std::vector<UnitId> ids)
{
    SelectedUnits s;
    s.kind = UnitKind::Feature;
    s.ids = std::move(ids);
    return s;
}

} // namespace

TEST_SUITE("editing") {

TEST_CASE("probe vectors are one-hot")
{
    CHECK(probe_vector(4, 2) == std::vector<float>{0, 0, 1, 0});
    CHECK_THROWS(probe_vector(4, 4));
}

TEST_CASE("feature contribution is the decoder column")
{
    SaeModel s(3, 3, false);
    for (int i = 0; i < 3; ++i) s.w_dec_t(i, i) = 1.0f;
    CHECK(feature_contribution(s, 1) == std::vector<float>{0, 1, 0});

    SaeModel t(3, 2, true);
    t.w_enc(1, 0) = 0.3f;
    t.w_enc(1, 2) = -0.7f;
    CHECK(feature_contribution(t, 1) == std::vector<float>{0.3f, 0.0f, -0.7f});
}

TEST_CASE("reconstruction threshold picks the columns")
{
    SaeModel s(3, 2, false);
    s.layer = 1;
    const float a[] = {0.05f, 0.2f, -0.15f};
    const float b[] = {0.3f, 0.5f, 0.0f};
    for (int j = 0; j < 3; ++j) {
        s.w_dec_t(0, j) = a[j];
        s.w_dec_t(1, j) = b[j];
    }
    auto plan = feature_edit_plan({&s}, features({{1, 0}}), 0.1);
    REQUIRE(plan.size() == 2);
    CHECK(plan.positions[0] == EditPosition{1, 1, {}});
    CHECK(plan.positions[1] == EditPosition{1, 2, {}});

    plan = feature_edit_plan({&s}, features({{1, 0}, {1, 1}}), 0.1);
    REQUIRE(plan.size() == 3);
    CHECK(plan.positions[1].column == 1);
    CHECK(plan.positions[1].provenance == std::vector<int>{0, 1});

    plan = feature_edit_plan({&s}, features({{1, 0}}), 0.6);
    CHECK(plan.size() == 0);
    CHECK(plan.empty_warning);
    CHECK_THROWS_AS(feature_edit_plan({&s}, features({{0, 0}}), 0.1), PreconditionError);
}

TEST_CASE("zeroing one column is surgical and idempotent")
{
    Model m(tiny());
    EditPlan plan;
    plan.kind = EditKind::NeuronColumnZero;
    plan.positions = {{0, 3, {3}}};
    const Model e = apply_edit(m, plan);
    for (int r = 0; r < 8; ++r) CHECK(e.w2(0, r, 3) == 0.0f);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < m.params().size(); ++i) changed += m.params()[i] != e.params()[i];
    CHECK(changed <= 8);
    CHECK(apply_edit(e, plan) == e);
    CHECK(apply_edit(m, EditPlan{}) == m);
}

TEST_CASE("a zeroed column disconnects its neuron from the logits")
{
    Model m(tiny());
    SelectedUnits n;
    n.kind = UnitKind::Neuron;
    n.ids = {{1, 7}};
    const Model e = zero_neuron_columns(m, n);
    const std::vector<int> tokens = {3, 4, 5};
    auto with_value = [&](const Model& mm, float v) {
        ForwardOptions o;
        Intervention iv;
        iv.layer = 1;
        iv.apply = [v](int, std::span<float> a) { a[7] = v; };
        o.interventions.push_back(iv);
        return forward(mm, {tokens}, o).logits;
    };
    CHECK(with_value(e, 0.0f) == with_value(e, 5.0f));
    CHECK_FALSE(with_value(m, 0.0f) == with_value(m, 5.0f));
}

TEST_CASE("neuron plans and JSON round trip")
{
    SelectedUnits n;
    n.kind = UnitKind::Neuron;
    n.ids = {{0, 2}, {1, 5}};
    const auto plan = neuron_edit_plan(n);
    CHECK(plan.size() == 2);
    CHECK(plan.kind == EditKind::NeuronColumnZero);
    const auto back = EditPlan::from_json(plan.to_json());
    CHECK(back.positions == plan.positions);
    CHECK(back.kind == plan.kind);
}

}
