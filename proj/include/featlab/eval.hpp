#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "featlab/interp.hpp"
#include "featlab/io.hpp"
#include "featlab/toylm.hpp"
#include "featlab/units.hpp"

namespace featlab {

// ---------------------------------------------------------------------------
// Ablation

// What gets ablated: neurons are clamped to zero at the MLP activation;
// features are removed by encode -> zero -> decode through the codec of
// their layer. Every layer that has a codec is reconstructed, even when none
// of its features are ablated, so an empty unit set measures pure
// reconstruction error.
struct AblationTarget {
    UnitKind kind = UnitKind::Feature;
    CaptureSite site = CaptureSite::MlpActivation;
    std::map<int, const Codec*> codecs;  // layer -> codec (features only)
};

// Interventions applied at the final prompt position.
std::vector<Intervention> ablation_interventions(const AblationTarget& target, const std::vector<UnitId>& units,
                                                 int position);

struct DeltaProbResult {
    double prob_before = 0.0;
    double prob_after = 0.0;
    double delta_raw = 0.0;
    double delta_clamped = 0.0;
};

DeltaProbResult delta_prob_from(double prob_before, double prob_after);

DeltaProbResult delta_prob(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                           const AblationTarget& target, const std::vector<UnitId>& units);

struct BootstrapConfig {
    int iterations = 5;
    int instances = 300;
    std::uint64_t seed = 5;
};

struct CurvePoint {
    int k = 0;
    double mean = 0.0;
    double stderr_ = 0.0;
};

// Per prompt, ablate the top-k ranked units for k = 0..max_k; returns the
// bootstrap mean and standard error of the clamped delta at each k.
struct RankedPrompt {
    const TokenizedPrompt* prompt = nullptr;
    std::vector<UnitId> ranked;
};
std::vector<CurvePoint> progressive_ablation(const Model& model, const std::vector<RankedPrompt>& prompts,
                                             const AblationTarget& target, int max_k, const BootstrapConfig& boot);

// Bootstrap mean/stderr of a per-item statistic.
CurvePoint bootstrap_mean(const std::vector<double>& values, const BootstrapConfig& boot);

// ---------------------------------------------------------------------------
// Interpretability score

struct UnitSample {
    std::string text;
    double activation = 0.0;
};

struct InterpretResult {
    bool available = false;
    double score = 0.0;
    std::string reason;  // why the score is unavailable
    Explanation explanation;
    std::vector<double> predicted, actual;
};

// Normalize activations by their max, explain with the 3 highest, then
// predict 6 held-back samples (3 next-highest, 3 random) and correlate.
InterpretResult interpret_score(Interpreter& interp, const std::string& unit_id, const std::vector<UnitSample>& samples,
                                std::uint64_t seed);

// ---------------------------------------------------------------------------
// Erasure

struct Rate {
    long numerator = 0;
    long denominator = 0;
    double value() const { return denominator ? static_cast<double>(numerator) / static_cast<double>(denominator) : 0.0; }
};

struct ErasureReport {
    Rate rel, gen, loc;
    double ppl_before = 0.0, ppl_after = 0.0;
    double delta_ppl = 0.0;  // (after - before) / before
    json to_json() const;
};

ErasureReport erasure_metrics(const Model& before, const Model& after, const std::vector<TokenizedPrompt>& privacy_train,
                              const std::vector<TokenizedPrompt>& privacy_rephrase,
                              const std::vector<TokenizedPrompt>& unrelated,
                              const std::vector<std::vector<int>>& ppl_corpus);

// ---------------------------------------------------------------------------
// Monosemanticity mixtures

struct KdeCurve {
    double bandwidth = 0.0;
    std::vector<double> x, density;
};

// Gaussian KDE on `points` evenly spaced grid values spanning data +- 3
// bandwidths. bandwidth <= 0 selects Silverman's rule.
KdeCurve kde(const std::vector<double>& values, double bandwidth = 0.0, int points = 200);

struct MixtureConfig {
    std::vector<int> proportions = {0, 20, 40, 60, 80, 100};
    int total = 500;
    std::uint64_t seed = 13;
    void validate() const;
};

struct MixtureResult {
    int proportion = 0;
    int relation_count = 0;
    std::vector<double> samples;  // activation per input of the mixed set
    double mean = 0.0;
    KdeCurve kde;
};

// For each proportion p, draw p% of `total` inputs from the relation pool and
// the rest from the other pool (without replacement) and record
// `activation(input)` over the whole mixed set.
std::vector<MixtureResult> monosemanticity_experiment(
    const std::vector<TokenizedPrompt>& relation_pool, const std::vector<TokenizedPrompt>& other_pool,
    const std::function<double(const TokenizedPrompt&)>& activation, const MixtureConfig& cfg);

// ---------------------------------------------------------------------------
// Stability

struct OverlapReport {
    int n = 1;
    std::vector<double> ratios;  // per counted fact
    int skipped = 0;             // facts with an empty probe set
    double mean = 0.0;
};

// Per fact, the fraction of probe positions (l, p) lying in some window
// [b*n, (b+1)*n - 1] of a base position (l, b) on the same layer.
OverlapReport overlap_ratio(const std::vector<std::vector<UnitId>>& base, const std::vector<std::vector<UnitId>>& probe,
                            int n);

// ---------------------------------------------------------------------------
// Statistics

struct StatResult {
    double t = 0.0;
    double p = 1.0;
    double cohens_d = 0.0;
    int n = 0;
    bool overflow = false;  // zero-variance differences with nonzero mean
};

StatResult paired_t(const std::vector<double>& a, const std::vector<double>& b);
double cohens_d(const std::vector<double>& a, const std::vector<double>& b);
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);
double mean_of(const std::vector<double>& v);

} // namespace featlab
