#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "featlab/io.hpp"
#include "featlab/tensor.hpp"
#include "featlab/toylm.hpp"
#include "featlab/units.hpp"

namespace featlab {

struct IgConfig {
    int steps = 20;
    double tau = 0.3;
    int baseline_token = Tokenizer::kEos;
    // Central differences instead of reverse mode (slow; for cross-checks).
    bool finite_difference = false;
    double fd_step = 1e-3;

    void validate() const;
};

struct AttributionMap {
    std::string prompt_id;
    int steps = 0;
    bool normalized = false;
    std::vector<int> layers;
    Matrix values;  // layers.size() x d_mlp

    json to_json() const;
    static AttributionMap from_json(const json& j);
};

// Same length as the prompt, every token replaced by the baseline token.
std::vector<int> baseline_prompt(std::span<const int> prompt, int baseline_token = Tokenizer::kEos);

// Gradient of F at each of several points. Receives the points in order and
// must return one gradient per point.
using BatchGradient = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<double>>& points)>;

// Riemann path integral along the straight line base -> target:
// (target - base) * (1/N) sum_{k=1..N} grad(base + k/N (target - base)).
std::vector<double> integrated_gradients(std::span<const double> base, std::span<const double> target, int steps,
                                         const BatchGradient& grad);

// Raw attribution of every MLP neuron of `layers` for the probability of the
// first answer token after `prompt`, summed over prompt positions. The map is
// normalized to sum to one unless `normalize` is false.
AttributionMap ig_attribution(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                              const std::vector<int>& layers, const IgConfig& cfg, bool normalize = true);

// Gradient of the first-answer-token probability with respect to the MLP
// activation of (layer, position), evaluated with that activation replaced
// by each of `points`.
std::vector<std::vector<double>> activation_gradients(const Model& model, std::span<const int> prompt, int answer_token,
                                                      int layer, int position,
                                                      const std::vector<std::vector<double>>& points,
                                                      const IgConfig& cfg);

// Neurons with attribution above tau * max over the whole map.
SelectedUnits select_neurons(const AttributionMap& attr, double tau);

} // namespace featlab
