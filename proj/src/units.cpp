#include "featlab/units.hpp"

#include <algorithm>
#include <cmath>

#include "featlab/errors.hpp"

namespace featlab {

bool SelectedUnits::contains(UnitId id) const { return std::binary_search(ids.begin(), ids.end(), id); }

std::vector<int> SelectedUnits::indices_in_layer(int layer) const
{
    std::vector<int> out;
    for (const auto& u : ids) {
        if (u.layer == layer) out.push_back(u.index);
    }
    return out;
}

void SelectedUnits::merge(const SelectedUnits& other)
{
    std::vector<UnitId> merged;
    std::set_union(ids.begin(), ids.end(), other.ids.begin(), other.ids.end(), std::back_inserter(merged));
    ids = std::move(merged);
    reference_max = std::max(reference_max, other.reference_max);
}

SelectedUnits select_by_fraction_of_max(const LayerActivations& acts, double tau, UnitKind kind, bool absolute)
{
    if (!(tau > 0.0 && tau < 1.0)) throw PreconditionError("selection threshold must lie in (0, 1)");
    SelectedUnits sel;
    sel.kind = kind;
    sel.tau = tau;
    double mx = 0.0;
    for (const auto& [layer, v] : acts) {
        for (float a : v) mx = std::max(mx, absolute ? std::fabs(double(a)) : double(a));
    }
    sel.reference_max = mx;
    if (mx <= 0.0) return sel;
    const double cut = tau * mx;
    for (const auto& [layer, v] : acts) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double a = absolute ? std::fabs(double(v[i])) : double(v[i]);
            if (a > cut) sel.ids.push_back({layer, static_cast<int>(i)});
        }
    }
    std::sort(sel.ids.begin(), sel.ids.end());
    sel.ids.erase(std::unique(sel.ids.begin(), sel.ids.end()), sel.ids.end());
    return sel;
}

std::vector<UnitId> rank_units(const LayerActivations& acts, bool absolute)
{
    std::vector<std::pair<double, UnitId>> scored;
    for (const auto& [layer, v] : acts) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double a = absolute ? std::fabs(double(v[i])) : double(v[i]);
            if (a > 0.0) scored.push_back({a, {layer, static_cast<int>(i)}});
        }
    }
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first > y.first;
        return x.second < y.second;
    });
    std::vector<UnitId> out;
    out.reserve(scored.size());
    for (const auto& s : scored) out.push_back(s.second);
    return out;
}

std::vector<float> Codec::ablate_and_reconstruct(std::span<const float> h, const std::vector<int>& ablate) const
{
    auto f = encode(h);
    for (int i : ablate) {
        if (i < 0 || i >= feature_dim()) throw PreconditionError("ablation index " + std::to_string(i) + " out of range");
        f[i] = 0.0f;
    }
    return decode(f);
}

std::string to_string(UnitKind kind) { return kind == UnitKind::Feature ? "feature" : "neuron"; }

} // namespace featlab
