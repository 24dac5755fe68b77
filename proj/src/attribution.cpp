#include "featlab/attribution.hpp"

#include <cmath>

#include "featlab/errors.hpp"

namespace featlab {

void IgConfig::validate() const
{
    if (steps < 1) throw ConfigError("ig steps must be >= 1");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("ig tau must lie in (0, 1)");
    if (!(fd_step > 0.0)) throw ConfigError("ig fd_step must be > 0");
}

json AttributionMap::to_json() const
{
    json layers_j = json::array();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto row = values.row(static_cast<int>(k));
        layers_j.push_back({{"layer", layers[k]}, {"values", std::vector<float>(row.begin(), row.end())}});
    }
    return {{"prompt_uuid", prompt_id}, {"steps", steps}, {"normalized", normalized}, {"layers", layers_j}};
}

AttributionMap AttributionMap::from_json(const json& j)
{
    AttributionMap a;
    a.prompt_id = j.at("prompt_uuid").get<std::string>();
    a.steps = j.at("steps").get<int>();
    a.normalized = j.value("normalized", false);
    for (const auto& l : j.at("layers")) {
        a.layers.push_back(l.at("layer").get<int>());
        a.values.append_row(l.at("values").get<std::vector<float>>());
    }
    return a;
}

std::vector<int> baseline_prompt(std::span<const int> prompt, int baseline_token)
{
    return std::vector<int>(prompt.size(), baseline_token);
}

std::vector<double> integrated_gradients(std::span<const double> base, std::span<const double> target, int steps,
                                         const BatchGradient& grad)
{
    if (steps < 1) throw PreconditionError("integrated_gradients: steps must be >= 1");
    if (base.size() != target.size()) throw ShapeError("integrated_gradients: base/target length mismatch");
    const std::size_t n = base.size();
    std::vector<std::vector<double>> points(steps, std::vector<double>(n));
    for (int k = 1; k <= steps; ++k) {
        const double a = static_cast<double>(k) / steps;
        for (std::size_t j = 0; j < n; ++j) points[k - 1][j] = base[j] + a * (target[j] - base[j]);
    }
    const auto grads = grad(points);
    if (grads.size() != points.size()) throw ShapeError("integrated_gradients: gradient count mismatch");
    std::vector<double> sum(n, 0.0);
    for (const auto& g : grads) {
        if (g.size() != n) throw ShapeError("integrated_gradients: gradient length mismatch");
        for (std::size_t j = 0; j < n; ++j) sum[j] += g[j];
    }
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = (target[j] - base[j]) * sum[j] / steps;
    return out;
}

namespace {

std::vector<double> token_probs(const Model& model, std::span<const int> prompt, int answer_token, int layer,
                                int position, const std::vector<std::vector<double>>& points, ForwardCache* keep)
{
    const int B = static_cast<int>(points.size());
    std::vector<std::vector<int>> batch(B, std::vector<int>(prompt.begin(), prompt.end()));
    ForwardOptions opts;
    opts.all_logits = false;
    Intervention iv;
    iv.site = CaptureSite::MlpActivation;
    iv.layer = layer;
    iv.position = position;
    iv.apply = [&points](int seq, std::span<float> act) {
        const auto& p = points[seq];
        for (std::size_t j = 0; j < act.size(); ++j) act[j] = static_cast<float>(p[j]);
    };
    opts.interventions.push_back(iv);
    auto cache = forward(model, batch, opts);
    std::vector<double> probs(B);
    std::vector<float> row(cache.logits.cols());
    for (int s = 0; s < B; ++s) {
        const auto lr = cache.logits.row(s);
        std::copy(lr.begin(), lr.end(), row.begin());
        softmax_inplace(row);
        probs[s] = row[answer_token];
    }
    if (keep) *keep = std::move(cache);
    return probs;
}

} // namespace

std::vector<std::vector<double>> activation_gradients(const Model& model, std::span<const int> prompt, int answer_token,
                                                      int layer, int position,
                                                      const std::vector<std::vector<double>>& points,
                                                      const IgConfig& cfg)
{
    const int m = model.config().d_mlp;
    const int T = static_cast<int>(prompt.size());
    if (layer < 0 || layer >= model.config().n_layers) throw PreconditionError("attribution: invalid layer");
    if (position < 0 || position >= T) throw PreconditionError("attribution: invalid position");
    if (answer_token < 0 || answer_token >= model.config().vocab_size) throw PreconditionError("attribution: invalid answer token");
    for (const auto& p : points) {
        if (static_cast<int>(p.size()) != m) throw ShapeError("attribution: point length must equal d_mlp");
    }
    const int B = static_cast<int>(points.size());
    std::vector<std::vector<double>> grads(B, std::vector<double>(m, 0.0));
    if (B == 0) return grads;

    if (cfg.finite_difference) {
        const double h = cfg.fd_step;
        std::vector<std::vector<double>> shifted;
        shifted.reserve(static_cast<std::size_t>(2) * m);
        for (int s = 0; s < B; ++s) {
            shifted.clear();
            for (int j = 0; j < m; ++j) {
                auto up = points[s];
                auto dn = points[s];
                up[j] += h;
                dn[j] -= h;
                shifted.push_back(std::move(up));
                shifted.push_back(std::move(dn));
            }
            const auto p = token_probs(model, prompt, answer_token, layer, position, shifted, nullptr);
            for (int j = 0; j < m; ++j) grads[s][j] = (p[2 * j] - p[2 * j + 1]) / (2.0 * h);
        }
        return grads;
    }

    ForwardCache cache;
    const auto probs = token_probs(model, prompt, answer_token, layer, position, points, &cache);
    // dp_a / dlogits = p_a (e_a - p)
    Matrix dlogits(cache.logits.rows(), cache.logits.cols());
    for (int s = 0; s < B; ++s) {
        auto d = dlogits.row(s);
        const auto lr = cache.logits.row(s);
        std::copy(lr.begin(), lr.end(), d.begin());
        softmax_inplace(d);
        const float pa = static_cast<float>(probs[s]);
        for (float& v : d) v *= -pa;
        d[answer_token] += pa;
    }
    ActivationGrads ag;
    ag.layers = {layer};
    backward(model, cache, dlogits, nullptr, &ag);
    for (int s = 0; s < B; ++s) {
        const auto g = ag.grads[0].row(cache.row(s, position));
        for (int j = 0; j < m; ++j) {
            if (!std::isfinite(g[j])) {
                throw NumericError("attribution: non-finite gradient at layer " + std::to_string(layer) + ", neuron " +
                                   std::to_string(j));
            }
            grads[s][j] = g[j];
        }
    }
    return grads;
}

AttributionMap ig_attribution(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                              const std::vector<int>& layers, const IgConfig& cfg, bool normalize)
{
    cfg.validate();
    if (prompt.empty()) throw PreconditionError("attribution: empty prompt");
    if (answer.empty()) throw PreconditionError("attribution: empty answer");
    const int m = model.config().d_mlp;
    const int T = static_cast<int>(prompt.size());
    const auto base = baseline_prompt(prompt, cfg.baseline_token);

    AttributionMap map;
    map.steps = cfg.steps;
    map.layers = layers;
    map.values = Matrix(static_cast<int>(layers.size()), m);

    const std::vector<std::vector<int>> pair = {std::vector<int>(prompt.begin(), prompt.end()), base};
    const auto cache = forward(model, pair, ForwardOptions{false, {}});

    for (std::size_t li = 0; li < layers.size(); ++li) {
        const int l = layers[li];
        if (l < 0 || l >= model.config().n_layers) throw PreconditionError("attribution: invalid layer " + std::to_string(l));
        const auto& act = cache.layers[l].act;
        auto out = map.values.row(static_cast<int>(li));
        for (int i = 0; i < T; ++i) {
            const auto real = act.row(cache.row(0, i));
            const auto ref = act.row(cache.row(1, i));
            const std::vector<double> target(real.begin(), real.end());
            const std::vector<double> start(ref.begin(), ref.end());
            const auto attr = integrated_gradients(start, target, cfg.steps, [&](const auto& pts) {
                return activation_gradients(model, prompt, answer[0], l, i, pts, cfg);
            });
            for (int j = 0; j < m; ++j) out[j] += static_cast<float>(attr[j]);
        }
    }
    for (float v : map.values.storage()) {
        if (!std::isfinite(v)) throw NumericError("attribution: non-finite score");
    }
    if (normalize) {
        double total = 0.0;
        for (float v : map.values.storage()) total += v;
        if (total == 0.0 || !std::isfinite(total)) throw NumericError("attribution: total attribution is zero, cannot normalize");
        for (float& v : map.values.storage()) v = static_cast<float>(v / total);
        map.normalized = true;
    }
    return map;
}

SelectedUnits select_neurons(const AttributionMap& attr, double tau)
{
    LayerActivations acts;
    for (std::size_t k = 0; k < attr.layers.size(); ++k) {
        const auto row = attr.values.row(static_cast<int>(k));
        acts.push_back({attr.layers[k], std::vector<float>(row.begin(), row.end())});
    }
    return select_by_fraction_of_max(acts, tau, UnitKind::Neuron, false);
}

} // namespace featlab
