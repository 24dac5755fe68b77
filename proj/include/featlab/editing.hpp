#pragma once

#include <string>
#include <vector>

#include "featlab/io.hpp"
#include "featlab/sae.hpp"
#include "featlab/toylm.hpp"
#include "featlab/units.hpp"

namespace featlab {

enum class EditKind { NeuronColumnZero, FeatureEdit };
std::string to_string(EditKind kind);

struct EditPosition {
    int layer = 0;
    int column = 0;
    std::vector<int> provenance;  // feature or neuron indices that selected the column
    auto operator<=>(const EditPosition& o) const { return std::tie(layer, column) <=> std::tie(o.layer, o.column); }
    bool operator==(const EditPosition& o) const { return layer == o.layer && column == o.column; }
};

struct EditPlan {
    EditKind kind = EditKind::FeatureEdit;
    double tau2 = 0.0;
    std::vector<EditPosition> positions;  // sorted by (layer, column), unique
    bool empty_warning = false;

    std::size_t size() const { return positions.size(); }
    json to_json() const;
    static EditPlan from_json(const json& j);
};

std::vector<float> probe_vector(int d_f, int i);

// Decoder matrix times the one-hot probe: the feature's direction in
// MLP-activation space, in standardized units.
std::vector<float> feature_contribution(const SaeModel& sae, int i);

// Columns c of W2 at the feature's layer where some selected feature has
// |h_i[c]| > tau2. `saes` must cover every layer present in `features`.
EditPlan feature_edit_plan(const std::vector<const SaeModel*>& saes, const SelectedUnits& features, double tau2);

EditPlan neuron_edit_plan(const SelectedUnits& neurons);

// Copy of the model with each planned W2 column zeroed.
Model apply_edit(const Model& model, const EditPlan& plan);
Model zero_neuron_columns(const Model& model, const SelectedUnits& neurons);

} // namespace featlab
