#include "featlab/editing.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "featlab/errors.hpp"

namespace featlab {

std::string to_string(EditKind kind) { return kind == EditKind::FeatureEdit ? "feature_edit" : "neuron_column_zero"; }

json EditPlan::to_json() const
{
    json pos = json::array();
    for (const auto& p : positions) pos.push_back({{"layer", p.layer}, {"column", p.column}, {"provenance", p.provenance}});
    json j = {{"kind", featlab::to_string(kind)}, {"positions", pos}};
    if (kind == EditKind::FeatureEdit) j["tau2"] = tau2;
    return j;
}

EditPlan EditPlan::from_json(const json& j)
{
    EditPlan p;
    const auto k = j.at("kind").get<std::string>();
    if (k == "feature_edit") p.kind = EditKind::FeatureEdit;
    else if (k == "neuron_column_zero") p.kind = EditKind::NeuronColumnZero;
    else throw ConfigError("unknown edit kind '" + k + "'");
    p.tau2 = j.value("tau2", 0.0);
    for (const auto& e : j.at("positions")) {
        p.positions.push_back({e.at("layer").get<int>(), e.at("column").get<int>(), e.at("provenance").get<std::vector<int>>()});
    }
    std::sort(p.positions.begin(), p.positions.end());
    p.empty_warning = p.positions.empty();
    return p;
}

std::vector<float> probe_vector(int d_f, int i)
{
    if (i < 0 || i >= d_f) throw PreconditionError("probe index out of range");
    std::vector<float> p(d_f, 0.0f);
    p[i] = 1.0f;
    return p;
}

std::vector<float> feature_contribution(const SaeModel& sae, int i)
{
    if (sae.site != CaptureSite::MlpActivation)
        throw PreconditionError("feature_contribution: SAE must be trained on the MLP activation site, got " + to_string(sae.site));
    const auto p = probe_vector(sae.feature_dim(), i);
    // W_dec p with the one-hot probe is column i; computed explicitly so the
    // tied and untied layouts share one path.
    std::vector<float> h(sae.input_dim(), 0.0f);
    for (int k = 0; k < sae.feature_dim(); ++k) {
        if (p[k] == 0.0f) continue;
        const auto col = sae.decoder_column(k);
        for (int c = 0; c < sae.input_dim(); ++c) h[c] += p[k] * col[c];
    }
    return h;
}

EditPlan feature_edit_plan(const std::vector<const SaeModel*>& saes, const SelectedUnits& features, double tau2)
{
    if (!(tau2 > 0.0)) throw PreconditionError("tau2 must be > 0");
    if (features.kind != UnitKind::Feature) throw PreconditionError("feature_edit_plan expects feature units");
    std::map<int, const SaeModel*> by_layer;
    for (const auto* s : saes) by_layer[s->layer] = s;
    std::map<std::pair<int, int>, std::vector<int>> cols;
    for (const auto& u : features.ids) {
        const auto it = by_layer.find(u.layer);
        if (it == by_layer.end()) throw PreconditionError("feature_edit_plan: no SAE for layer " + std::to_string(u.layer));
        const auto h = feature_contribution(*it->second, u.index);
        for (int c = 0; c < static_cast<int>(h.size()); ++c) {
            if (std::fabs(h[c]) > tau2) cols[{u.layer, c}].push_back(u.index);
        }
    }
    EditPlan plan;
    plan.kind = EditKind::FeatureEdit;
    plan.tau2 = tau2;
    for (auto& [key, prov] : cols) {
        std::sort(prov.begin(), prov.end());
        prov.erase(std::unique(prov.begin(), prov.end()), prov.end());
        plan.positions.push_back({key.first, key.second, prov});
    }
    plan.empty_warning = plan.positions.empty();
    return plan;
}

EditPlan neuron_edit_plan(const SelectedUnits& neurons)
{
    if (neurons.kind != UnitKind::Neuron) throw PreconditionError("neuron_edit_plan expects neuron units");
    EditPlan plan;
    plan.kind = EditKind::NeuronColumnZero;
    for (const auto& u : neurons.ids) plan.positions.push_back({u.layer, u.index, {u.index}});
    std::sort(plan.positions.begin(), plan.positions.end());
    plan.empty_warning = plan.positions.empty();
    return plan;
}

Model apply_edit(const Model& model, const EditPlan& plan)
{
    const auto& cfg = model.config();
    for (const auto& p : plan.positions) {
        if (p.layer < 0 || p.layer >= cfg.n_layers || p.column < 0 || p.column >= cfg.d_mlp) {
            throw PreconditionError("edit position (" + std::to_string(p.layer) + ", " + std::to_string(p.column) +
                                    ") out of range");
        }
    }
    Model edited = model;
    for (const auto& p : plan.positions) {
        for (int r = 0; r < cfg.d_model; ++r) edited.w2(p.layer, r, p.column) = 0.0f;
    }
    return edited;
}

Model zero_neuron_columns(const Model& model, const SelectedUnits& neurons) { return apply_edit(model, neuron_edit_plan(neurons)); }

} // namespace featlab
