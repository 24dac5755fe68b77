#include "featlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "featlab/errors.hpp"
#include "featlab/rng.hpp"

namespace featlab {

// ---------------------------------------------------------------------------
// Ablation

std::vector<Intervention> ablation_interventions(const AblationTarget& target, const std::vector<UnitId>& units,
                                                 int position)
{
    std::map<int, std::vector<int>> by_layer;
    for (const auto& u : units) by_layer[u.layer].push_back(u.index);
    std::vector<Intervention> out;
    if (target.kind == UnitKind::Neuron) {
        if (target.site != CaptureSite::MlpActivation) throw PreconditionError("neuron ablation acts on the MLP activation site");
        for (const auto& [layer, idx] : by_layer) {
            Intervention iv;
            iv.site = CaptureSite::MlpActivation;
            iv.layer = layer;
            iv.position = position;
            iv.apply = [idx](int, std::span<float> act) {
                for (int j : idx) {
                    if (j < 0 || j >= static_cast<int>(act.size())) throw PreconditionError("neuron index out of range");
                    act[j] = 0.0f;
                }
            };
            out.push_back(std::move(iv));
        }
        return out;
    }
    for (const auto& [layer, idx] : by_layer) {
        if (!target.codecs.count(layer)) throw PreconditionError("no codec for layer " + std::to_string(layer));
    }
    for (const auto& [layer, codec] : target.codecs) {
        const auto it = by_layer.find(layer);
        std::vector<int> idx = it == by_layer.end() ? std::vector<int>{} : it->second;
        Intervention iv;
        iv.site = target.site;
        iv.layer = layer;
        iv.position = position;
        iv.apply = [codec, idx](int, std::span<float> h) {
            const auto hp = codec->ablate_and_reconstruct(h, idx);
            std::copy(hp.begin(), hp.end(), h.begin());
        };
        out.push_back(std::move(iv));
    }
    return out;
}

DeltaProbResult delta_prob_from(double prob_before, double prob_after)
{
    if (!(prob_before > 0.0)) throw NumericError("delta_prob: reference probability must be > 0");
    DeltaProbResult r;
    r.prob_before = prob_before;
    r.prob_after = prob_after;
    r.delta_raw = (prob_before - prob_after) / prob_before;
    r.delta_clamped = std::max(r.delta_raw, 0.0);
    return r;
}

DeltaProbResult delta_prob(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                           const AblationTarget& target, const std::vector<UnitId>& units)
{
    if (prompt.empty()) throw PreconditionError("delta_prob: empty prompt");
    const double before = answer_prob(model, prompt, answer);
    const auto ivs = ablation_interventions(target, units, static_cast<int>(prompt.size()) - 1);
    const double after = answer_prob(model, prompt, answer, ivs);
    return delta_prob_from(before, after);
}

CurvePoint bootstrap_mean(const std::vector<double>& values, const BootstrapConfig& boot)
{
    if (values.empty()) throw PreconditionError("bootstrap over an empty sample");
    if (boot.iterations < 1 || boot.instances < 1) throw ConfigError("bootstrap iterations and instances must be >= 1");
    Rng rng(boot.seed);
    std::vector<double> means;
    for (int it = 0; it < boot.iterations; ++it) {
        double s = 0.0;
        for (int k = 0; k < boot.instances; ++k) {
            s += values[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(values.size()) - 1))];
        }
        means.push_back(s / boot.instances);
    }
    CurvePoint p;
    p.mean = mean_of(means);
    if (means.size() > 1) {
        double ss = 0.0;
        for (double m : means) ss += (m - p.mean) * (m - p.mean);
        p.stderr_ = std::sqrt(ss / static_cast<double>(means.size() - 1)) / std::sqrt(static_cast<double>(means.size()));
    }
    return p;
}

std::vector<CurvePoint> progressive_ablation(const Model& model, const std::vector<RankedPrompt>& prompts,
                                             const AblationTarget& target, int max_k, const BootstrapConfig& boot)
{
    if (prompts.empty()) throw PreconditionError("progressive_ablation: no prompts");
    if (max_k < 0) throw PreconditionError("progressive_ablation: max_k must be >= 0");
    for (const auto& p : prompts) {
        if (static_cast<int>(p.ranked.size()) < max_k)
            throw PreconditionError("progressive_ablation: max_k " + std::to_string(max_k) + " exceeds the " +
                                    std::to_string(p.ranked.size()) + " units available for " + p.prompt->id);
    }
    const std::size_t P = prompts.size();
    std::vector<std::vector<double>> deltas(max_k + 1, std::vector<double>(P));
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < P; ++i) {
        const auto& rp = prompts[i];
        const double before = answer_prob(model, rp.prompt->prompt, rp.prompt->answer);
        for (int k = 0; k <= max_k; ++k) {
            const std::vector<UnitId> units(rp.ranked.begin(), rp.ranked.begin() + k);
            const auto ivs = ablation_interventions(target, units, static_cast<int>(rp.prompt->prompt.size()) - 1);
            const double after = answer_prob(model, rp.prompt->prompt, rp.prompt->answer, ivs);
            deltas[k][i] = delta_prob_from(before, after).delta_clamped;
        }
    }
    std::vector<CurvePoint> curve;
    for (int k = 0; k <= max_k; ++k) {
        auto p = bootstrap_mean(deltas[k], boot);
        p.k = k;
        curve.push_back(p);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Interpretability score

InterpretResult interpret_score(Interpreter& interp, const std::string& unit_id, const std::vector<UnitSample>& samples,
                                std::uint64_t seed)
{
    if (samples.size() < 20) throw PreconditionError("interpret_score needs at least 20 samples");
    double mx = 0.0;
    for (const auto& s : samples) mx = std::max(mx, s.activation);
    InterpretResult r;
    if (!(mx > 0.0)) {
        r.reason = "unit never activates";
        return r;
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return samples[a].activation > samples[b].activation; });
    auto norm = [&](std::size_t i) { return std::clamp(samples[i].activation / mx, 0.0, 1.0); };

    std::vector<InterpRecord> top;
    for (int k = 0; k < 3; ++k) top.push_back({samples[order[k]].text, norm(order[k])});
    std::vector<std::size_t> held = {order[3], order[4], order[5]};
    Rng rng(seed);
    for (int j : rng.sample_without_replacement(static_cast<int>(order.size()) - 6, 3)) held.push_back(order[6 + j]);

    r.explanation = interp.explain(unit_id, top);
    std::vector<std::string> texts;
    for (auto i : held) {
        texts.push_back(samples[i].text);
        r.actual.push_back(norm(i));
    }
    r.predicted = interp.predict(r.explanation, texts);
    if (r.predicted.size() != texts.size()) throw ProtocolError("interpreter returned the wrong number of predictions");
    for (double& p : r.predicted) p = std::clamp(p, 0.0, 1.0);
    const auto c = pearson(r.predicted, r.actual);
    if (!c) {
        r.reason = "constant predicted or actual series";
        return r;
    }
    r.available = true;
    r.score = *c;
    return r;
}

// ---------------------------------------------------------------------------
// Erasure

namespace {

std::vector<char> correct_flags(const Model& model, const std::vector<TokenizedPrompt>& prompts)
{
    std::vector<char> ok(prompts.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < prompts.size(); ++i) ok[i] = predict_next(model, prompts[i].prompt) == prompts[i].answer.front();
    return ok;
}

} // namespace

json ErasureReport::to_json() const
{
    auto rate = [](const Rate& r) { return json{{"value", r.value()}, {"numerator", r.numerator}, {"denominator", r.denominator}}; };
    return {{"rel", rate(rel)}, {"gen", rate(gen)}, {"loc", rate(loc)},
            {"ppl_before", ppl_before}, {"ppl_after", ppl_after}, {"delta_ppl", delta_ppl}};
}

ErasureReport erasure_metrics(const Model& before, const Model& after, const std::vector<TokenizedPrompt>& privacy_train,
                              const std::vector<TokenizedPrompt>& privacy_rephrase,
                              const std::vector<TokenizedPrompt>& unrelated,
                              const std::vector<std::vector<int>>& ppl_corpus)
{
    if (privacy_train.empty() || privacy_rephrase.empty() || unrelated.empty() || ppl_corpus.empty())
        throw PreconditionError("erasure_metrics: empty evaluation set");
    ErasureReport r;
    for (char c : correct_flags(after, privacy_train)) {
        r.rel.numerator += !c;
        ++r.rel.denominator;
    }
    for (char c : correct_flags(after, privacy_rephrase)) {
        r.gen.numerator += !c;
        ++r.gen.denominator;
    }
    const auto was = correct_flags(before, unrelated);
    const auto still = correct_flags(after, unrelated);
    for (std::size_t i = 0; i < unrelated.size(); ++i) {
        if (!was[i]) continue;
        ++r.loc.denominator;
        r.loc.numerator += still[i];
    }
    r.ppl_before = perplexity(before, ppl_corpus);
    r.ppl_after = perplexity(after, ppl_corpus);
    r.delta_ppl = (r.ppl_after - r.ppl_before) / r.ppl_before;
    return r;
}

// ---------------------------------------------------------------------------
// KDE and mixtures

namespace {

double quantile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

} // namespace

KdeCurve kde(const std::vector<double>& values, double bandwidth, int points)
{
    if (values.size() < 2) throw PreconditionError("kde needs at least two values");
    if (points < 2) throw PreconditionError("kde needs at least two grid points");
    const double n = static_cast<double>(values.size());
    double h = bandwidth;
    if (!(h > 0.0)) {
        const double mu = mean_of(values);
        double ss = 0.0;
        for (double v : values) ss += (v - mu) * (v - mu);
        const double sd = std::sqrt(ss / (n - 1.0));
        const double iqr = quantile(values, 0.75) - quantile(values, 0.25);
        double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
        h = 0.9 * spread * std::pow(n, -0.2);
        if (!(h > 0.0)) h = 1e-3;
    }
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it - 3.0 * h, hi = *hi_it + 3.0 * h;
    KdeCurve c;
    c.bandwidth = h;
    const double norm = 1.0 / (n * h * std::sqrt(2.0 * M_PI));
    for (int i = 0; i < points; ++i) {
        const double x = lo + (hi - lo) * static_cast<double>(i) / (points - 1);
        double s = 0.0;
        for (double v : values) {
            const double u = (x - v) / h;
            s += std::exp(-0.5 * u * u);
        }
        c.x.push_back(x);
        c.density.push_back(s * norm);
    }
    return c;
}

void MixtureConfig::validate() const
{
    if (total < 1) throw ConfigError("mixture total must be >= 1");
    if (proportions.empty()) throw ConfigError("mixture needs at least one proportion");
    for (std::size_t i = 0; i < proportions.size(); ++i) {
        if (proportions[i] < 0 || proportions[i] > 100) throw ConfigError("mixture proportions must lie in [0, 100]");
        if (i && proportions[i] <= proportions[i - 1]) throw ConfigError("mixture proportions must be ascending");
    }
}

std::vector<MixtureResult> monosemanticity_experiment(
    const std::vector<TokenizedPrompt>& relation_pool, const std::vector<TokenizedPrompt>& other_pool,
    const std::function<double(const TokenizedPrompt&)>& activation, const MixtureConfig& cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<MixtureResult> out;
    for (int p : cfg.proportions) {
        const int n_rel = static_cast<int>(std::lround(cfg.total * p / 100.0));
        const int n_oth = cfg.total - n_rel;
        if (n_rel > static_cast<int>(relation_pool.size()) || n_oth > static_cast<int>(other_pool.size())) {
            throw PreconditionError("mixture at " + std::to_string(p) + "% needs " + std::to_string(n_rel) + " relation and " +
                                    std::to_string(n_oth) + " other inputs; pools have " +
                                    std::to_string(relation_pool.size()) + " and " + std::to_string(other_pool.size()));
        }
        std::vector<const TokenizedPrompt*> mix;
        for (int i : rng.sample_without_replacement(static_cast<int>(relation_pool.size()), n_rel)) mix.push_back(&relation_pool[i]);
        for (int i : rng.sample_without_replacement(static_cast<int>(other_pool.size()), n_oth)) mix.push_back(&other_pool[i]);
        MixtureResult r;
        r.proportion = p;
        r.relation_count = n_rel;
        r.samples.resize(mix.size());
#pragma omp parallel for schedule(dynamic)
        for (std::size_t i = 0; i < mix.size(); ++i) r.samples[i] = activation(*mix[i]);
        r.mean = mean_of(r.samples);
        const bool constant = std::all_of(r.samples.begin(), r.samples.end(), [&](double v) { return v == r.samples.front(); });
        r.kde = kde(r.samples, constant ? 1e-3 : 0.0);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stability

OverlapReport overlap_ratio(const std::vector<std::vector<UnitId>>& base, const std::vector<std::vector<UnitId>>& probe,
                            int n)
{
    if (n < 1) throw PreconditionError("overlap_ratio: n must be >= 1");
    if (base.size() != probe.size()) throw ShapeError("overlap_ratio: base and probe must cover the same facts");
    OverlapReport r;
    r.n = n;
    for (std::size_t f = 0; f < base.size(); ++f) {
        if (probe[f].empty()) {
            ++r.skipped;
            continue;
        }
        long inside = 0;
        for (const auto& q : probe[f]) {
            for (const auto& b : base[f]) {
                if (b.layer == q.layer && q.index >= b.index * n && q.index <= (b.index + 1) * n - 1) {
                    ++inside;
                    break;
                }
            }
        }
        r.ratios.push_back(static_cast<double>(inside) / static_cast<double>(probe[f].size()));
    }
    r.mean = r.ratios.empty() ? 0.0 : mean_of(r.ratios);
    return r;
}

// ---------------------------------------------------------------------------
// Statistics

double mean_of(const std::vector<double>& v)
{
    if (v.empty()) throw PreconditionError("mean of an empty series");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

StatResult paired_t(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw ShapeError("paired_t: series lengths differ");
    if (a.size() < 2) throw PreconditionError("paired_t needs at least two pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double m = mean_of(d);
    double ss = 0.0;
    for (double x : d) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    StatResult r;
    r.n = static_cast<int>(n);
    if (sd == 0.0) {
        if (m == 0.0) throw NumericError("paired_t: identical series, t is undefined");
        r.overflow = true;
        r.t = std::copysign(std::numeric_limits<double>::infinity(), m);
        r.cohens_d = r.t;
        r.p = 0.0;
        return r;
    }
    r.t = m / (sd / std::sqrt(static_cast<double>(n)));
    r.cohens_d = m / sd;
    boost::math::students_t dist(static_cast<double>(n - 1));
    r.p = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t))), 0.0, 1.0);
    return r;
}

double cohens_d(const std::vector<double>& a, const std::vector<double>& b) { return paired_t(a, b).cohens_d; }

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw ShapeError("pearson: series lengths differ");
    if (a.size() < 2) return std::nullopt;
    const double ma = mean_of(a), mb = mean_of(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

} // namespace featlab
