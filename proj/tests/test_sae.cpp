#include <doctest.h>

#include <cmath>

#include "featlab/errors.hpp"
#include "featlab/rng.hpp"
#include "featlab/sae.hpp"

using namespace featlab;

namespace {

SaeModel identity_sae(int d, bool tied, float theta)
{
    SaeModel s(d, d, tied);
    for (int i = 0; i < d; ++i) {
        s.w_enc(i, i) = 1.0f;
        if (!tied) s.w_dec_t(i, i) = 1.0f;
        s.theta[i] = theta;
    }
    return s;
}

// Rows that are sparse non-negative combinations of a few fixed directions.
Matrix sparse_data(int rows, int d, int atoms, std::uint64_t seed)
{
    Rng rng(seed);
    Matrix dirs(atoms, d);
    for (auto& x : dirs.storage()) x = static_cast<float>(rng.normal());
    Matrix out(rows, d);
    for (int r = 0; r < rows; ++r) {
        for (int k = 0; k < 2; ++k) {
            const int a = static_cast<int>(rng.uniform_int(0, atoms - 1));
            const double c = rng.uniform(0.5, 2.0);
            for (int j = 0; j < d; ++j) out(r, j) += static_cast<float>(c * dirs(a, j));
        }
    }
    return out;
}

} // namespace

TEST_SUITE("sae") {

TEST_CASE("JumpReLU keeps values strictly above the threshold")
{
    CHECK(jump_relu(0.5f, 0.5f) == 0.0f);
    CHECK(jump_relu(0.50001f, 0.5f) == 0.50001f);
    CHECK(jump_relu(-1.0f, 0.1f) == 0.0f);
    for (float theta = 0.01f; theta < 2.0f; theta += 0.13f) {
        for (float z = -3.0f; z < 3.0f; z += 0.07f) CHECK(jump_relu(z, theta) == (z > theta ? z : 0.0f));
    }
}

TEST_CASE("encoding examples")
{
    auto s = identity_sae(2, false, 0.5f);
    const auto f = s.encode(std::vector<float>{0.3f, 0.9f});
    CHECK(f == std::vector<float>{0.0f, 0.9f});
    CHECK(s.encode(std::vector<float>{0.0f, 0.0f}) == std::vector<float>{0.0f, 0.0f});
    CHECK(s.encode(std::vector<float>{0.5f, 0.5f}) == std::vector<float>{0.0f, 0.0f});
    CHECK_THROWS_AS(s.encode(std::vector<float>{1.0f}), ShapeError);
}

TEST_CASE("decoding zero codes gives the de-normalized decoder bias")
{
    SaeModel s(3, 6, false);
    s.mean = {1, 2, 3};
    s.stddev = {2, 2, 2};
    s.b_dec = {0.5f, 0, -0.5f};
    CHECK(s.decode(std::vector<float>(6, 0.0f)) == std::vector<float>{2, 2, 2});
    s.b_dec = {0, 0, 0};
    CHECK(s.decode(std::vector<float>(6, 0.0f)) == s.mean);
}

TEST_CASE("tied identity SAE reconstructs exactly")
{
    const auto s = identity_sae(4, true, 1e-6f);
    const std::vector<float> h = {0.25f, 1.5f, 3.0f, 0.75f};
    CHECK(s.decode(s.encode(h)) == h);
}

TEST_CASE("ablation through the codec")
{
    const auto s = identity_sae(2, true, 1e-6f);
    const std::vector<float> h = {1.0f, 2.0f};
    CHECK(s.ablate_and_reconstruct(h, {}) == s.decode(s.encode(h)));
    CHECK(s.ablate_and_reconstruct(h, {0}) == std::vector<float>{0.0f, 2.0f});
    CHECK(s.ablate_and_reconstruct(h, {0, 1}) == s.decode(std::vector<float>{0.0f, 0.0f}));
}

TEST_CASE("feature selection by fraction of max")
{
    auto s = identity_sae(3, true, 1e-6f);
    s.layer = 2;
    auto sel = select_features({&s}, {{1.0f, 0.4f, 0.2f}}, 0.3);
    REQUIRE(sel.ids.size() == 2);
    CHECK(sel.ids[0] == UnitId{2, 0});
    CHECK(sel.ids[1] == UnitId{2, 1});
    sel = select_features({&s}, {{1.0f, 0.9f, 0.95f}}, 0.999);
    REQUIRE(sel.ids.size() == 1);
    CHECK(sel.ids[0].index == 0);
    CHECK(select_features({&s}, {{0.0f, 0.0f, 0.0f}}, 0.3).ids.empty());
}

TEST_CASE("training defaults and dictionary width")
{
    const SaeTrainConfig d;
    CHECK(d.lr == 1e-3);
    CHECK(d.batch_size == 256);
    CHECK(d.epochs == 100);
    CHECK(d.patience == 10);
    CHECK(d.n_multiplier == 4);

    SaeTrainConfig c;
    c.epochs = 2;
    c.batch_size = 32;
    const auto x = sparse_data(64, 256, 8, 1);
    const auto s = train_sae(x, c, CaptureSite::MlpActivation, 0);
    CHECK(s.feature_dim() == 1024);
    CHECK(s.input_dim() == 256);
}

TEST_CASE("training lowers the loss and keeps decoder columns at unit norm")
{
    SaeTrainConfig c;
    c.epochs = 40;
    c.batch_size = 32;
    c.n_multiplier = 2;
    SaeTrainReport rep;
    const auto x = sparse_data(600, 8, 6, 2);
    const auto s = train_sae(x, c, CaptureSite::MlpActivation, 1, &rep);
    s.check_invariants();
    CHECK(rep.train_loss.back() < rep.train_loss.front());
    CHECK(rep.best_epoch >= 0);
    for (int i = 0; i < s.feature_dim(); ++i) {
        double n2 = 0.0;
        for (float v : s.decoder_column(i)) n2 += static_cast<double>(v) * v;
        CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-4));
    }
    const auto q = evaluate_sae(s, x);
    CHECK(q.relative_l2 < 0.5);
    CHECK(q.mean_l0 < s.feature_dim());
}

TEST_CASE("a larger sparsity penalty never yields denser codes")
{
    const auto x = sparse_data(500, 8, 6, 3);
    SaeTrainConfig c;
    c.epochs = 30;
    c.batch_size = 32;
    c.n_multiplier = 2;
    c.lambda = 0.0;
    const auto dense = train_sae(x, c, CaptureSite::MlpActivation, 0);
    c.lambda = 0.01;
    const auto sparse = train_sae(x, c, CaptureSite::MlpActivation, 0);
    CHECK(evaluate_sae(dense, x).mean_l0 >= evaluate_sae(sparse, x).mean_l0);
}

TEST_CASE("training is deterministic and checkpoints round trip")
{
    SaeTrainConfig c;
    c.epochs = 5;
    c.batch_size = 32;
    c.n_multiplier = 2;
    const auto x = sparse_data(200, 6, 4, 4);
    const auto a = train_sae(x, c, CaptureSite::PostMlpResidual, 3);
    const auto b = train_sae(x, c, CaptureSite::PostMlpResidual, 3);
    CHECK(a == b);
    const auto back = SaeModel::from_checkpoint(parse_checkpoint(serialize_checkpoint(a.to_checkpoint())));
    CHECK(back == a);
    CHECK(back.site == CaptureSite::PostMlpResidual);
    CHECK(back.layer == 3);
}

TEST_CASE("invalid configurations are rejected")
{
    SaeTrainConfig c;
    c.lambda = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.init_active_fraction = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(SaeModel(0, 3, false), ShapeError);
}

}
