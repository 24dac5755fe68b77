#include <doctest.h>

#include <cmath>

#include "featlab/errors.hpp"
#include "featlab/experiments.hpp"
#include "featlab/rng.hpp"
#include "featlab/toylm.hpp"

using namespace featlab;

namespace {

ModelConfig tiny(int vocab = 20, int layers = 2)
{
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.vocab_size = vocab;
    c.max_seq_len = 16;
    c.seed = 1;
    return c;
}

std::vector<TokenizedPrompt> toy_prompts(int n, int vocab)
{
    Rng rng(5);
    std::vector<TokenizedPrompt> out;
    for (int i = 0; i < n; ++i) {
        TokenizedPrompt p;
        p.id = "p" + std::to_string(i) + "#0";
        for (int t = 0; t < 4; ++t) p.prompt.push_back(static_cast<int>(rng.uniform_int(3, vocab - 1)));
        p.answer = {static_cast<int>(rng.uniform_int(3, vocab - 1))};
        out.push_back(p);
    }
    return out;
}

} // namespace

TEST_SUITE("toylm") {

TEST_CASE("uniform logits give 1/V per answer token and perplexity V")
{
    Model m(tiny());
    std::fill(m.params().begin(), m.params().end(), 0.0f);
    const std::vector<int> prompt = {3, 4, 5};
    CHECK(answer_prob(m, prompt, std::vector<int>{6}) == doctest::Approx(1.0 / 20).epsilon(1e-6));
    CHECK(answer_prob(m, prompt, std::vector<int>{6, 7}) == doctest::Approx(1.0 / 400).epsilon(1e-6));
    CHECK(perplexity(m, {{3, 4, 5, 6}, {7, 8}}) == doctest::Approx(20.0).epsilon(1e-5));
}

TEST_CASE("perplexity is at least one")
{
    Model m(tiny());
    CHECK(perplexity(m, {{3, 4, 5, 6}, {9, 9, 9}}) >= 1.0);
}

TEST_CASE("capture counts, widths and determinism")
{
    Model m(tiny(20, 4));
    const auto prompts = toy_prompts(10, 20);
    const auto recs = capture_activations(m, prompts, CaptureSite::MlpActivation, {0, 1, 2, 3});
    CHECK(recs.size() == 40);
    for (const auto& r : recs) CHECK(r.vector.size() == 32);
    const auto again = capture_activations(m, prompts, CaptureSite::MlpActivation, {0, 1, 2, 3});
    for (std::size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].vector == again[i].vector);
    const auto full = capture_activations(m, prompts, CaptureSite::PostAttnResidual, {1}, true);
    CHECK(full.size() == 40);
    CHECK(full.front().vector.size() == 16);
}

TEST_CASE("captured activation equals the forward cache")
{
    Model m(tiny());
    const auto prompts = toy_prompts(1, 20);
    const auto recs = capture_activations(m, prompts, CaptureSite::MlpActivation, {1});
    const auto cache = forward(m, {prompts[0].prompt});
    const auto& act = cache.layers[1].act;
    const int last = cache.row(0, static_cast<int>(prompts[0].prompt.size()) - 1);
    for (int c = 0; c < act.cols(); ++c) CHECK(recs[0].vector[c] == act(last, c));
}

TEST_CASE("identity substitution leaves logits unchanged")
{
    Model m(tiny());
    const auto p = toy_prompts(1, 20)[0].prompt;
    const auto base = forward(m, {p}).logits;
    for (auto site : {CaptureSite::PostAttnResidual, CaptureSite::MlpActivation, CaptureSite::PostMlpResidual}) {
        const auto recs = capture_activations(m, toy_prompts(1, 20), site, {1});
        const auto sub = run_with_substitution(m, p, site, 1, -1, recs[0].vector);
        for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::fabs(sub.data()[i] - base.data()[i]) <= 1e-6);
    }
}

TEST_CASE("zeroing the last residual stream leaves the final norm bias")
{
    Model m(tiny());
    Rng rng(3);
    const auto& L = m.layout();
    for (int d = 0; d < 16; ++d) m.at(L.lnf_b)[d] = static_cast<float>(rng.normal());
    const auto p = toy_prompts(1, 20)[0].prompt;
    const auto logits = run_with_substitution(m, p, CaptureSite::PostMlpResidual, 1, -1, std::vector<float>(16, 0.0f));
    const int last = logits.rows() - 1;
    for (int v = 0; v < 20; ++v) {
        double want = 0.0;
        for (int d = 0; d < 16; ++d) want += static_cast<double>(m.at(L.unembed)[v * 16 + d]) * m.at(L.lnf_b)[d];
        CHECK(logits(last, v) == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("an intervention at layer l does not touch earlier layers")
{
    Model m(tiny(20, 3));
    const auto p = toy_prompts(1, 20)[0].prompt;
    const auto base = forward(m, {p});
    ForwardOptions opts;
    Intervention iv;
    iv.site = CaptureSite::MlpActivation;
    iv.layer = 1;
    iv.apply = [](int, std::span<float> a) { std::fill(a.begin(), a.end(), 3.0f); };
    opts.interventions.push_back(iv);
    const auto hooked = forward(m, {p}, opts);
    CHECK(hooked.layers[0].x_out == base.layers[0].x_out);
    CHECK(hooked.layers[1].x_mid == base.layers[1].x_mid);
    CHECK_FALSE(hooked.layers[1].x_out == base.layers[1].x_out);
}

TEST_CASE("backward matches finite differences of a linear readout")
{
    Model m(tiny(12, 2));
    const std::vector<std::vector<int>> batch = {{3, 4, 5, 6}, {7, 8, 9}};
    const auto cache = forward(m, batch);
    Matrix w(cache.logits.rows(), cache.logits.cols());
    Rng rng(4);
    for (auto& x : w.storage()) x = static_cast<float>(rng.normal());
    auto readout = [&](const Model& mm) {
        const auto l = forward(mm, batch).logits;
        double s = 0.0;
        for (std::size_t i = 0; i < l.size(); ++i) s += static_cast<double>(l.data()[i]) * w.data()[i];
        return s;
    };
    std::vector<float> grads(m.params().size(), 0.0f);
    backward(m, cache, w, &grads);
    int checked = 0;
    for (std::size_t i = 0; i < grads.size() && checked < 40; i += 37) {
        if (std::fabs(grads[i]) < 1e-2) continue;
        Model a = m, b = m;
        const float h = 1e-3f;
        a.params()[i] += h;
        b.params()[i] -= h;
        const double fd = (readout(a) - readout(b)) / (2.0 * h);
        CAPTURE(i);
        CHECK(grads[i] == doctest::Approx(fd).epsilon(3e-2).scale(1e-2));
        ++checked;
    }
    CHECK(checked >= 20);
}

TEST_CASE("training: zero epochs, determinism and loss reduction")
{
    const auto corpus = make_corpus(CorpusConfig{7, 2, 7, 2});
    const auto data = tokenize(corpus.tokenizer, corpus.facts);
    auto cfg = tiny(corpus.tokenizer.size());
    TrainConfig tc;
    tc.epochs = 0;
    Model untouched(cfg);
    const Model init = untouched;
    const auto r0 = train_lm(untouched, data, tc);
    CHECK(untouched == init);
    CHECK(r0.epoch_loss.empty());

    tc.epochs = 8;
    Model a(cfg), b(cfg);
    std::vector<std::vector<int>> seqs;
    for (const auto& p : data) {
        auto s = p.prompt;
        s.insert(s.end(), p.answer.begin(), p.answer.end());
        seqs.push_back(s);
    }
    const double ppl_before = perplexity(a, seqs);
    const auto ra = train_lm(a, data, tc);
    train_lm(b, data, tc);
    CHECK(a == b);
    CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
    CHECK(perplexity(a, seqs) < ppl_before);
    tc.lr = -1;
    CHECK_THROWS_AS(train_lm(a, data, tc), ConfigError);
}

TEST_CASE("checkpoint round trip")
{
    Model m(tiny());
    const auto back = Model::from_checkpoint(parse_checkpoint(serialize_checkpoint(m.to_checkpoint())));
    CHECK(back == m);
    Checkpoint other;
    other.kind = "sae";
    CHECK_THROWS_AS(Model::from_checkpoint(other), PreconditionError);
}

}
