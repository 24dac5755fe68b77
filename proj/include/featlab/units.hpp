#pragma once

#include <compare>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace featlab {

enum class UnitKind { Feature, Neuron };

// A feature or neuron: `index` is a feature index into a layer's dictionary
// or an intermediate-neuron index into that layer's MLP.
struct UnitId {
    int layer = 0;
    int index = 0;
    auto operator<=>(const UnitId&) const = default;
};

struct SelectedUnits {
    UnitKind kind = UnitKind::Feature;
    std::vector<UnitId> ids;  // sorted, unique
    double tau = 0.0;
    double reference_max = 0.0;

    bool contains(UnitId id) const;
    std::vector<int> indices_in_layer(int layer) const;
    void merge(const SelectedUnits& other);  // set union; keeps the larger reference max
};

// Activations of one input: (layer, values) per layer.
using LayerActivations = std::vector<std::pair<int, std::vector<float>>>;

// Every unit whose activation exceeds tau times the joint maximum over all
// supplied layers and indices. `absolute` ranks signed codes by magnitude.
// An all-zero (or all non-positive) input selects nothing.
SelectedUnits select_by_fraction_of_max(const LayerActivations& acts, double tau, UnitKind kind, bool absolute);

// Units of one input ordered by descending activation (magnitude when
// `absolute`), ties broken by (layer, index). Zero activations are dropped.
std::vector<UnitId> rank_units(const LayerActivations& acts, bool absolute);

// Encoder/decoder pair over one activation site. Implemented by the SAE and
// by the linear baselines; the ablation protocol only needs this surface.
class Codec {
public:
    virtual ~Codec() = default;
    virtual int input_dim() const = 0;
    virtual int feature_dim() const = 0;
    virtual std::vector<float> encode(std::span<const float> h) const = 0;
    // Returns a vector in the original activation units.
    virtual std::vector<float> decode(std::span<const float> f) const = 0;
    // True when codes are signed, so selection uses magnitudes.
    virtual bool signed_codes() const = 0;

    // Zero the codes in `ablate`, then decode.
    std::vector<float> ablate_and_reconstruct(std::span<const float> h, const std::vector<int>& ablate) const;
};

std::string to_string(UnitKind kind);

} // namespace featlab
