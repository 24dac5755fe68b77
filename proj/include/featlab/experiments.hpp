#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "featlab/attribution.hpp"
#include "featlab/datasets.hpp"
#include "featlab/decomp.hpp"
#include "featlab/editing.hpp"
#include "featlab/eval.hpp"
#include "featlab/sae.hpp"
#include "featlab/toylm.hpp"

// End-to-end experiment flows shared by the command-line tool and the
// acceptance suite.
namespace featlab {

struct CorpusConfig {
    std::uint64_t seed = 7;
    int facts_per_relation = 20;
    std::uint64_t privacy_seed = 7;
    int privacy_facts_per_relation = 20;  // privacy facts used for erasure

    json to_json() const;
    static CorpusConfig from_json(const json& j);
};

struct Corpus {
    FactSet facts;
    FactSet privacy;
    Tokenizer tokenizer;  // covers facts and privacy prompts
};

Corpus make_corpus(const CorpusConfig& cfg);
Tokenizer build_tokenizer(const std::vector<const FactSet*>& sets);
// The first `per_relation` facts of each privacy relation.
FactSet privacy_subset(const FactSet& all, int per_relation);
// Prompts whose id ends in "#k" for k in `paraphrases`.
std::vector<TokenizedPrompt> filter_paraphrases(const std::vector<TokenizedPrompt>& prompts, const std::vector<int>& paraphrases);
int paraphrase_index(const TokenizedPrompt& p);

// Final-position activations: [prompt][layer slot] in the order of `layers`.
std::vector<std::vector<std::vector<float>>> final_activations(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                                               CaptureSite site, const std::vector<int>& layers);

std::vector<SaeModel> train_layer_saes(const Model& model, const std::vector<TokenizedPrompt>& prompts, CaptureSite site,
                                       const std::vector<int>& layers, const SaeTrainConfig& cfg,
                                       std::vector<SaeTrainReport>* reports = nullptr);

// Held-out variant: a seeded `holdout` fraction of each layer's captured rows
// is kept out of training and scored afterwards.
struct HeldOutQuality {
    int layer = 0;
    int train_rows = 0;
    int heldout_rows = 0;
    SaeQuality quality;
};

// Seeded row shuffle; the first round(holdout * rows) rows are held out.
void split_rows(const Matrix& all, double holdout, std::uint64_t seed, Matrix& train, Matrix& held);

std::vector<SaeModel> train_layer_saes_holdout(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                               CaptureSite site, const std::vector<int>& layers,
                                               const SaeTrainConfig& cfg, double holdout, std::uint64_t split_seed,
                                               std::vector<HeldOutQuality>* quality,
                                               std::vector<SaeTrainReport>* reports = nullptr);

std::vector<int> all_layers(const Model& model);

// Prompt tokens joined back into text.
std::string prompt_text(const Tokenizer& tok, const TokenizedPrompt& p);

// ---------------------------------------------------------------------------
// Feature vs random-direction vs neuron ablation on one prompt per fact.

struct ArmResult {
    std::vector<double> delta;  // clamped, per counted prompt
    std::vector<int> counts;    // units ablated per prompt
    double mean = 0.0;
};

struct AblationComparison {
    std::vector<std::string> ids;
    ArmResult sae, rd, neuron;
    StatResult sae_vs_rd, sae_vs_neuron;
    int skipped = 0;  // prompts with no selected feature
    json to_json() const;
};

// SAE features and neurons are chosen by the tau1 rule; the random-direction
// arm ablates, per layer, as many directions as the SAE arm did there,
// taking those with the largest |coefficient|.
AblationComparison compare_ablation(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                    const std::vector<const SaeModel*>& saes, const std::vector<const Decomposer*>& rds,
                                    double tau1);

// Progressive top-k ablation curves for the three arms: features ranked by
// activation, random directions by |coefficient|, neurons by activation.
struct AblationCurves {
    std::vector<CurvePoint> sae, rd, neuron;
    json to_json() const;
};

AblationCurves progressive_curves(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                  const std::vector<const SaeModel*>& saes, const std::vector<const Decomposer*>& rds,
                                  int max_k, const BootstrapConfig& boot);

// Mean clamped delta with every SAE layer reconstructed and nothing ablated.
double reconstruction_delta(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                            const std::vector<const SaeModel*>& saes);

// ---------------------------------------------------------------------------
// Monosemanticity mixtures.

struct MonoConfig {
    double tau1 = 0.3;
    MixtureConfig mix;
    std::vector<std::string> relations = monosemanticity_relation_codes();
    std::vector<int> selection_paraphrases = {0};
    std::vector<int> pool_paraphrases = {1, 2};
};

struct MonoResult {
    SelectedUnits frozen;
    std::vector<MixtureResult> mixtures;
    double rank_correlation = 0.0;  // Spearman of proportion vs mean
    json to_json() const;
};

MonoResult run_monosemanticity(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                               const std::vector<const SaeModel*>& saes, const MonoConfig& cfg);

// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Interpretability of the most frequently selected features and neurons.

struct InterpCompareConfig {
    double tau1 = 0.3;
    int units = 20;  // per arm
    std::uint64_t seed = 17;
};

struct InterpArm {
    std::vector<std::string> unit_ids;
    std::vector<double> scores;   // aligned with unit_ids; 0 when unavailable
    std::vector<bool> available;
    int unavailable = 0;
    double mean = 0.0;
};

struct InterpComparison {
    InterpArm features, neurons;
    json to_json() const;
};

// Samples are the final-position activations over all `prompts`.
InterpComparison compare_interpretability(const Model& model, const Tokenizer& tok,
                                          const std::vector<TokenizedPrompt>& prompts,
                                          const std::vector<const SaeModel*>& saes, Interpreter& interp,
                                          const InterpCompareConfig& cfg);

// ---------------------------------------------------------------------------
// Knowledge erasure on a fine-tuned model.

struct ErasureConfig {
    TrainConfig finetune;
    SaeTrainConfig sae;
    IgConfig ig;
    double tau1 = 0.3;
    double tau2 = 0.1;
    ParaphraseSplit split{{0, 1, 2}, {3, 4, 5}};
};

struct ErasureInputs {
    std::vector<TokenizedPrompt> privacy_train, privacy_rephrase, unrelated;
    std::vector<std::vector<int>> ppl_corpus;
};

ErasureInputs erasure_inputs(const Corpus& corpus, const ParaphraseSplit& split);

// Base model fine-tuned on privacy train prompts mixed with the fact prompts.
Model finetune_for_erasure(const Model& base, const ErasureInputs& in, const std::vector<TokenizedPrompt>& fact_prompts,
                           const TrainConfig& cfg, TrainReport* report = nullptr);

SelectedUnits select_privacy_features(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                      const std::vector<const SaeModel*>& saes, double tau1);
SelectedUnits select_privacy_neurons(const Model& model, const std::vector<TokenizedPrompt>& prompts, const IgConfig& ig);

struct ErasureComparison {
    SelectedUnits features, neurons;
    EditPlan feature_plan, neuron_plan;
    ErasureReport feature, neuron;
    json to_json() const;
};

ErasureComparison compare_erasure(const Model& tuned, const ErasureInputs& in, const std::vector<const SaeModel*>& saes,
                                  const ErasureConfig& cfg);

// ---------------------------------------------------------------------------
// Feature-count stability.

// Per prompt, the tau1-selected features of a stack of SAEs.
std::vector<std::vector<UnitId>> per_prompt_features(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                                     const std::vector<const SaeModel*>& saes, double tau1);

} // namespace featlab
