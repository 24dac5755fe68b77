#include <algorithm>
#include <cmath>
#include <sstream>

#include "featlab/errors.hpp"
#include "featlab/rng.hpp"
#include "featlab/toylm.hpp"

namespace featlab {

std::vector<TokenizedPrompt> tokenize(const Tokenizer& tok, const FactSet& facts)
{
    std::vector<TokenizedPrompt> out;
    for (const auto& e : entries(facts)) {
        TokenizedPrompt p;
        p.id = e.uuid + "#" + std::to_string(e.paraphrase);
        p.relation = e.relation;
        p.prompt = tok.encode(e.sentence);
        p.answer = tok.encode(e.answer);
        if (p.prompt.empty() || p.answer.empty()) throw PreconditionError("empty prompt or answer in " + p.id);
        out.push_back(std::move(p));
    }
    return out;
}

void TrainConfig::validate() const
{
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

namespace {

// Mean next-token NLL over the batch; fills dlogits with its gradient.
double lm_loss(const ForwardCache& c, Matrix& dlogits, long& count)
{
    dlogits = Matrix(c.logits.rows(), c.logits.cols());
    count = 0;
    for (const auto& s : c.tokens) count += static_cast<long>(s.size()) - 1;
    if (count == 0) return 0.0;
    double loss = 0.0;
    const float inv = 1.0f / static_cast<float>(count);
    for (std::size_t s = 0; s < c.tokens.size(); ++s) {
        const auto& toks = c.tokens[s];
        for (std::size_t p = 0; p + 1 < toks.size(); ++p) {
            const int r = c.seq_offset[s] + static_cast<int>(p);
            auto drow = dlogits.row(r);
            const auto lrow = c.logits.row(r);
            std::copy(lrow.begin(), lrow.end(), drow.begin());
            softmax_inplace(drow);
            const int target = toks[p + 1];
            loss -= std::log(std::max(drow[target], 1e-30f));
            drow[target] -= 1.0f;
            for (float& v : drow) v *= inv;
        }
    }
    return loss / static_cast<double>(count);
}

} // namespace

TrainReport train_lm(Model& model, const std::vector<TokenizedPrompt>& data, const TrainConfig& cfg)
{
    cfg.validate();
    TrainReport report;
    if (cfg.epochs == 0) return report;
    if (data.empty()) throw PreconditionError("train_lm: empty dataset");

    std::vector<std::vector<int>> seqs;
    seqs.reserve(data.size());
    for (const auto& d : data) {
        auto s = d.prompt;
        s.insert(s.end(), d.answer.begin(), d.answer.end());
        for (int t : s) {
            if (t >= model.config().vocab_size) throw PreconditionError("train_lm: tokenizer does not cover dataset");
        }
        seqs.push_back(std::move(s));
    }

    const std::size_t P = model.layout().total;
    std::vector<float> grad(P), m1(P, 0.0f), m2(P, 0.0f);
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double lr = cfg.effective_lr();
    Rng rng(cfg.seed);
    std::vector<int> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    auto params = model.params();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        long epoch_count = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::vector<int>> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(seqs[order[i]]);

            const auto cache = forward(model, batch);
            Matrix dlogits;
            long count = 0;
            const double loss = lm_loss(cache, dlogits, count);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "train_lm: non-finite loss at epoch " << epoch << ", step " << report.steps
                    << " (lr=" << lr << ", batch=" << batch.size() << ")";
                throw NumericError(msg.str());
            }
            epoch_loss += loss * static_cast<double>(count);
            epoch_count += count;

            std::fill(grad.begin(), grad.end(), 0.0f);
            backward(model, cache, dlogits, &grad);

            double norm2 = 0.0;
            for (float g : grad) norm2 += double(g) * g;
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm)) throw NumericError("train_lm: non-finite gradient at step " + std::to_string(report.steps));
            const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

            ++report.steps;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(report.steps));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(report.steps));
            const float step = static_cast<float>(lr * std::sqrt(bc2) / bc1);
            const float decay = static_cast<float>(lr * cfg.weight_decay);
            const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
            const float c = static_cast<float>(clip);
            for (std::size_t i = 0; i < P; ++i) {
                const float g = grad[i] * c;
                m1[i] = b1 * m1[i] + (1.0f - b1) * g;
                m2[i] = b2 * m2[i] + (1.0f - b2) * g * g;
                params[i] -= step * m1[i] / (std::sqrt(m2[i]) + static_cast<float>(eps)) + decay * params[i];
            }
        }
        report.epoch_loss.push_back(epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0);
    }
    report.final_accuracy = answer_accuracy(model, data);
    return report;
}

double answer_prob(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                   const std::vector<Intervention>& interventions)
{
    if (answer.empty()) throw PreconditionError("answer_prob: empty answer");
    if (prompt.empty()) throw PreconditionError("answer_prob: empty prompt");
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), answer.begin(), answer.end() - 1);
    ForwardOptions opts;
    opts.interventions = interventions;
    const auto c = forward(model, {seq}, opts);
    double prob = 1.0;
    std::vector<float> row(c.logits.cols());
    for (std::size_t i = 0; i < answer.size(); ++i) {
        const auto lr = c.logits.row(static_cast<int>(prompt.size() + i) - 1);
        std::copy(lr.begin(), lr.end(), row.begin());
        softmax_inplace(row);
        prob *= row[answer[i]];
    }
    return prob;
}

int predict_next(const Model& model, std::span<const int> prompt, const std::vector<Intervention>& interventions)
{
    ForwardOptions opts;
    opts.all_logits = false;
    opts.interventions = interventions;
    const auto c = forward(model, {std::vector<int>(prompt.begin(), prompt.end())}, opts);
    const auto lr = c.logits.row(0);
    return static_cast<int>(std::max_element(lr.begin(), lr.end()) - lr.begin());
}

double answer_accuracy(const Model& model, const std::vector<TokenizedPrompt>& data)
{
    if (data.empty()) return 0.0;
    std::vector<char> hit(data.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < data.size(); ++i) {
        hit[i] = predict_next(model, data[i].prompt) == data[i].answer.front();
    }
    long n = 0;
    for (char h : hit) n += h;
    return static_cast<double>(n) / static_cast<double>(data.size());
}

double perplexity(const Model& model, const std::vector<std::vector<int>>& corpus)
{
    if (corpus.empty()) throw PreconditionError("perplexity: empty corpus");
    std::vector<double> nll(corpus.size(), 0.0);
    std::vector<long> cnt(corpus.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        if (corpus[s].size() < 2) continue;
        const auto c = forward(model, {corpus[s]});
        std::vector<float> row(c.logits.cols());
        for (std::size_t p = 0; p + 1 < corpus[s].size(); ++p) {
            const auto lr = c.logits.row(static_cast<int>(p));
            std::copy(lr.begin(), lr.end(), row.begin());
            softmax_inplace(row);
            nll[s] -= std::log(static_cast<double>(row[corpus[s][p + 1]]));
            ++cnt[s];
        }
    }
    double total = 0.0;
    long n = 0;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        total += nll[s];
        n += cnt[s];
    }
    if (n == 0) throw PreconditionError("perplexity: corpus has no predictable positions");
    return std::exp(total / static_cast<double>(n));
}

std::vector<ActivationRecord> capture_activations(const Model& model, const std::vector<TokenizedPrompt>& inputs,
                                                  CaptureSite site, const std::vector<int>& layers,
                                                  bool full_sequence)
{
    for (int l : layers) {
        if (l < 0 || l >= model.config().n_layers) throw PreconditionError("capture: invalid layer index " + std::to_string(l));
    }
    std::vector<std::vector<ActivationRecord>> per_input(inputs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        ForwardOptions opts;
        opts.all_logits = false;
        const auto c = forward(model, {inputs[i].prompt}, opts);
        const int T = static_cast<int>(inputs[i].prompt.size());
        for (int l : layers) {
            const auto& mat = c.site_matrix(site, l);
            for (int p = full_sequence ? 0 : T - 1; p < T; ++p) {
                const auto r = mat.row(p);
                per_input[i].push_back({site, l, p, inputs[i].id, std::vector<float>(r.begin(), r.end())});
            }
        }
    }
    std::vector<ActivationRecord> out;
    for (auto& v : per_input) {
        for (auto& r : v) out.push_back(std::move(r));
    }
    return out;
}

Matrix stack_records(const std::vector<ActivationRecord>& records, int layer)
{
    Matrix m;
    for (const auto& r : records) {
        if (r.layer == layer) m.append_row(r.vector);
    }
    return m;
}

Matrix run_with_substitution(const Model& model, std::span<const int> tokens, CaptureSite site, int layer,
                             int position, std::span<const float> new_vector)
{
    require_length(new_vector, static_cast<std::size_t>(model.config().site_width(site)), "run_with_substitution");
    std::vector<float> v(new_vector.begin(), new_vector.end());
    Intervention iv;
    iv.site = site;
    iv.layer = layer;
    iv.position = position;
    iv.apply = [v](int, std::span<float> a) { std::copy(v.begin(), v.end(), a.begin()); };
    ForwardOptions opts;
    opts.interventions.push_back(std::move(iv));
    return forward(model, {std::vector<int>(tokens.begin(), tokens.end())}, opts).logits;
}

} // namespace featlab
