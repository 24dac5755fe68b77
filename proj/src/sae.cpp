#include "featlab/sae.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "featlab/errors.hpp"
#include "featlab/io.hpp"
#include "featlab/kernels.hpp"
#include "featlab/optim.hpp"
#include "featlab/rng.hpp"

namespace featlab {

void SaeTrainConfig::validate() const
{
    if (!(lambda >= 0.0)) throw ConfigError("sae lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("sae lr must be > 0");
    if (batch_size < 1) throw ConfigError("sae batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("sae epochs must be >= 0");
    if (patience < 1) throw ConfigError("sae patience must be >= 1");
    if (n_multiplier < 1) throw ConfigError("sae n_multiplier must be >= 1");
    if (!(ste_bandwidth > 0.0)) throw ConfigError("sae ste_bandwidth must be > 0");
    if (!(theta_init > 0.0)) throw ConfigError("sae theta_init must be > 0");
    if (!(init_active_fraction >= 0.0 && init_active_fraction < 1.0))
        throw ConfigError("sae init_active_fraction must lie in [0, 1)");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("sae val_fraction must lie in (0, 1)");
}

json SaeTrainConfig::to_json() const
{
    return {{"lambda", lambda},   {"lr", lr},
            {"batch_size", batch_size}, {"epochs", epochs},
            {"patience", patience}, {"n_multiplier", n_multiplier},
            {"ste_bandwidth", ste_bandwidth}, {"theta_init", theta_init},
            {"init_active_fraction", init_active_fraction},
            {"val_fraction", val_fraction}, {"tied", tied},
            {"seed", seed}};
}

SaeTrainConfig SaeTrainConfig::from_json(const json& j)
{
    SaeTrainConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.n_multiplier = j.value("n_multiplier", c.n_multiplier);
    c.ste_bandwidth = j.value("ste_bandwidth", c.ste_bandwidth);
    c.theta_init = j.value("theta_init", c.theta_init);
    c.init_active_fraction = j.value("init_active_fraction", c.init_active_fraction);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.tied = j.value("tied", c.tied);
    c.seed = j.value("seed", c.seed);
    return c;
}

SaeModel::SaeModel(int d_in, int d_f, bool tied)
    : w_enc(d_f, d_in), b_enc(d_f, 0.0f), b_dec(d_in, 0.0f), theta(d_f, 0.001f), mean(d_in, 0.0f),
      stddev(d_in, 1.0f), d_in_(d_in), d_f_(d_f), tied_(tied)
{
    if (d_in < 1 || d_f < 1) throw ShapeError("SAE dimensions must be positive");
    if (!tied) w_dec_t = Matrix(d_f, d_in);
}

std::span<const float> SaeModel::decoder_column(int i) const { return tied_ ? w_enc.row(i) : w_dec_t.row(i); }
std::span<const float> SaeModel::encoder_row(int i) const { return w_enc.row(i); }

std::vector<float> SaeModel::normalize(std::span<const float> h) const
{
    require_length(h, d_in_, "SAE input");
    std::vector<float> x(d_in_);
    for (int j = 0; j < d_in_; ++j) x[j] = (h[j] - mean[j]) / stddev[j];
    return x;
}

std::vector<float> SaeModel::denormalize(std::span<const float> x) const
{
    require_length(x, d_in_, "SAE reconstruction");
    std::vector<float> h(d_in_);
    for (int j = 0; j < d_in_; ++j) h[j] = x[j] * stddev[j] + mean[j];
    return h;
}

std::vector<float> SaeModel::pre_activation(std::span<const float> h) const
{
    const auto x = normalize(h);
    std::vector<float> z(d_f_);
    kernels::gemm_nt(x, w_enc.storage(), z, 1, d_f_, d_in_);
    for (int i = 0; i < d_f_; ++i) z[i] += b_enc[i];
    return z;
}

std::vector<float> SaeModel::encode(std::span<const float> h) const
{
    auto z = pre_activation(h);
    for (int i = 0; i < d_f_; ++i) z[i] = jump_relu(z[i], theta[i]);
    return z;
}

std::vector<float> SaeModel::decode(std::span<const float> f) const
{
    require_length(f, d_f_, "SAE code");
    std::vector<float> x(b_dec);
    for (int i = 0; i < d_f_; ++i) {
        if (f[i] == 0.0f) continue;
        const auto col = decoder_column(i);
        for (int j = 0; j < d_in_; ++j) x[j] += f[i] * col[j];
    }
    return denormalize(x);
}

void SaeModel::check_invariants() const
{
    if (w_enc.rows() != d_f_ || w_enc.cols() != d_in_) throw ShapeError("SAE encoder shape");
    if (!tied_ && (w_dec_t.rows() != d_f_ || w_dec_t.cols() != d_in_)) throw ShapeError("SAE decoder shape");
    if (static_cast<int>(b_enc.size()) != d_f_ || static_cast<int>(theta.size()) != d_f_) throw ShapeError("SAE bias/theta length");
    if (static_cast<int>(b_dec.size()) != d_in_ || static_cast<int>(mean.size()) != d_in_ ||
        static_cast<int>(stddev.size()) != d_in_)
        throw ShapeError("SAE input-side vector length");
    for (float t : theta) {
        if (!(t > 0.0f)) throw PreconditionError("SAE threshold must be > 0");
    }
    for (float s : stddev) {
        if (!(s > 0.0f)) throw PreconditionError("SAE normalization std must be > 0");
    }
}

Checkpoint SaeModel::to_checkpoint() const
{
    Checkpoint c;
    c.kind = "sae";
    c.meta = {{"d_in", d_in_}, {"d_f", d_f_}, {"tied", tied_}, {"site", to_string(site)}, {"layer", layer}};
    c.add("w_enc", {d_f_, d_in_}, w_enc.storage());
    if (!tied_) c.add("w_dec_t", {d_f_, d_in_}, w_dec_t.storage());
    c.add("b_enc", {d_f_}, b_enc);
    c.add("b_dec", {d_in_}, b_dec);
    c.add("theta", {d_f_}, theta);
    c.add("mean", {d_in_}, mean);
    c.add("std", {d_in_}, stddev);
    return c;
}

SaeModel SaeModel::from_checkpoint(const Checkpoint& c)
{
    if (c.kind != "sae") throw PreconditionError("checkpoint kind '" + c.kind + "' is not an SAE");
    SaeModel m(c.meta.at("d_in").get<int>(), c.meta.at("d_f").get<int>(), c.meta.at("tied").get<bool>());
    m.site = parse_site(c.meta.at("site").get<std::string>());
    m.layer = c.meta.at("layer").get<int>();
    auto take = [&](const char* name, std::vector<float>& dst) {
        const auto& t = c.get(name);
        if (t.data.size() != dst.size()) throw ShapeError(std::string("SAE checkpoint tensor ") + name);
        dst = t.data;
    };
    take("w_enc", m.w_enc.storage());
    if (!m.tied_) take("w_dec_t", m.w_dec_t.storage());
    take("b_enc", m.b_enc);
    take("b_dec", m.b_dec);
    take("theta", m.theta);
    take("mean", m.mean);
    take("std", m.stddev);
    m.check_invariants();
    return m;
}

void SaeModel::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }
SaeModel SaeModel::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

namespace {

constexpr float kMinTheta = 1e-6f;

// Flat parameter block: [w_enc | w_dec_t (untied) | b_enc | b_dec | log-free theta].
struct Params {
    std::size_t w_enc = 0, w_dec = 0, b_enc = 0, b_dec = 0, theta = 0, total = 0;
};

Params layout(int d_in, int d_f, bool tied)
{
    Params p;
    const std::size_t W = static_cast<std::size_t>(d_in) * d_f;
    p.w_enc = 0;
    p.w_dec = W;
    p.b_enc = tied ? W : 2 * W;
    p.b_dec = p.b_enc + d_f;
    p.theta = p.b_dec + d_in;
    p.total = p.theta + d_f;
    return p;
}

// Unit-norm decoder columns (rows of the transposed storage).
void renormalize_decoder(float* dec, int d_f, int d_in)
{
    for (int i = 0; i < d_f; ++i) {
        float* row = dec + static_cast<std::size_t>(i) * d_in;
        double n2 = 0.0;
#pragma omp simd reduction(+ : n2)
        for (int j = 0; j < d_in; ++j) n2 += double(row[j]) * row[j];
        if (n2 <= 0.0) continue;
        const float inv = static_cast<float>(1.0 / std::sqrt(n2));
        for (int j = 0; j < d_in; ++j) row[j] *= inv;
    }
}

struct BatchResult {
    double recon = 0.0;  // summed over rows
    double l0 = 0.0;     // summed exact count
};

// Forward (and optionally backward) over rows [0, B) of x (normalized).
// Gradients are of mean_b(||x - x_hat||^2 + lambda * L0).
BatchResult run_batch(const float* x, int B, int d_in, int d_f, bool tied, const std::vector<float>& params,
                      const Params& L, double lambda, float eps, std::vector<float>* grad)
{
    const float* W = params.data() + L.w_enc;
    const float* D = tied ? W : params.data() + L.w_dec;
    const float* be = params.data() + L.b_enc;
    const float* bd = params.data() + L.b_dec;
    const float* th = params.data() + L.theta;

    std::vector<float> z(static_cast<std::size_t>(B) * d_f), f(z.size());
    kernels::gemm_nt({x, static_cast<std::size_t>(B) * d_in}, {W, static_cast<std::size_t>(d_f) * d_in}, z, B, d_f, d_in);
    BatchResult res;
    for (int b = 0; b < B; ++b) {
        float* zr = z.data() + static_cast<std::size_t>(b) * d_f;
        float* fr = f.data() + static_cast<std::size_t>(b) * d_f;
        for (int i = 0; i < d_f; ++i) {
            zr[i] += be[i];
            fr[i] = jump_relu(zr[i], th[i]);
            res.l0 += fr[i] != 0.0f;
        }
    }
    std::vector<float> xh(static_cast<std::size_t>(B) * d_in);
    for (int b = 0; b < B; ++b) std::copy(bd, bd + d_in, xh.begin() + static_cast<std::size_t>(b) * d_in);
    kernels::gemm_nn(f, {D, static_cast<std::size_t>(d_f) * d_in}, xh, B, d_in, d_f, true);

    std::vector<float> dxh(xh.size());
    const float scale = 2.0f / static_cast<float>(B);
    for (std::size_t i = 0; i < xh.size(); ++i) {
        const float e = xh[i] - x[i];
        res.recon += double(e) * e;
        dxh[i] = scale * e;
    }
    if (!grad) return res;

    auto& g = *grad;
    std::fill(g.begin(), g.end(), 0.0f);
    float* gW = g.data() + L.w_enc;
    float* gD = tied ? gW : g.data() + L.w_dec;
    float* gbe = g.data() + L.b_enc;
    float* gbd = g.data() + L.b_dec;
    float* gth = g.data() + L.theta;

    // Decoder: dD = f^T dxh (f is sparse; the kernel skips zeros).
    kernels::gemm_tn(f, dxh, {gD, static_cast<std::size_t>(d_f) * d_in}, d_f, d_in, B, tied);
    kernels::accumulate_column_sums(dxh, {gbd, static_cast<std::size_t>(d_in)}, B, d_in);

    // df only where it matters: active units and units inside the kernel window.
    const float inv_eps = 1.0f / eps;
    const float l0w = static_cast<float>(lambda) / static_cast<float>(B);
    std::vector<float> dz(z.size(), 0.0f);
    for (int b = 0; b < B; ++b) {
        const float* zr = z.data() + static_cast<std::size_t>(b) * d_f;
        const float* dx = dxh.data() + static_cast<std::size_t>(b) * d_in;
        float* dzr = dz.data() + static_cast<std::size_t>(b) * d_f;
        for (int i = 0; i < d_f; ++i) {
            const bool active = zr[i] > th[i];
            const bool window = std::fabs(zr[i] - th[i]) < 0.5f * eps;
            if (!active && !window) continue;
            const float* col = D + static_cast<std::size_t>(i) * d_in;
            float df = 0.0f;
#pragma omp simd reduction(+ : df)
            for (int j = 0; j < d_in; ++j) df += dx[j] * col[j];
            if (active) dzr[i] = df;
            if (window) {
                // Rectangular-kernel pseudo-derivatives of z*H(z - theta) and of H(z - theta).
                gth[i] += -th[i] * inv_eps * df - l0w * inv_eps;
                dzr[i] += l0w * inv_eps;
            }
        }
    }
    kernels::accumulate_column_sums(dz, {gbe, static_cast<std::size_t>(d_f)}, B, d_f);
    kernels::gemm_tn(dz, {x, static_cast<std::size_t>(B) * d_in}, {gW, static_cast<std::size_t>(d_f) * d_in}, d_f,
                     d_in, B, true);
    return res;
}

} // namespace

SaeModel train_sae(const Matrix& samples, const SaeTrainConfig& cfg, CaptureSite site, int layer, SaeTrainReport* report)
{
    cfg.validate();
    const int N = samples.rows();
    const int d_in = samples.cols();
    if (N < 2 || d_in < 1) throw PreconditionError("train_sae: need at least two samples");
    for (float v : samples.storage()) {
        if (!std::isfinite(v)) throw PreconditionError("train_sae: non-finite activation");
    }
    const int d_f = cfg.n_multiplier * d_in;
    SaeTrainReport local;
    SaeTrainReport& rep = report ? *report : local;
    rep = SaeTrainReport{};
    rep.few_samples = N < 10 * d_f;

    SaeModel sae(d_in, d_f, cfg.tied);
    sae.site = site;
    sae.layer = layer;

    Rng rng(cfg.seed);
    std::vector<int> order(N);
    for (int i = 0; i < N; ++i) order[i] = i;
    rng.shuffle(order);
    const int n_val = std::clamp(static_cast<int>(std::lround(cfg.val_fraction * N)), 1, N - 1);
    std::vector<int> val(order.end() - n_val, order.end());
    std::vector<int> train(order.begin(), order.end() - n_val);

    // Standardization statistics from the training split only.
    for (int j = 0; j < d_in; ++j) {
        double s = 0.0, s2 = 0.0;
        for (int r : train) s += samples(r, j);
        const double mu = s / train.size();
        for (int r : train) s2 += (samples(r, j) - mu) * (samples(r, j) - mu);
        const double sd = std::sqrt(s2 / train.size());
        sae.mean[j] = static_cast<float>(mu);
        sae.stddev[j] = static_cast<float>(sd > 1e-6 ? sd : 1.0);
    }
    auto gather = [&](const std::vector<int>& rows) {
        std::vector<float> out(static_cast<std::size_t>(rows.size()) * d_in);
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const auto x = sae.normalize(samples.row(rows[k]));
            std::copy(x.begin(), x.end(), out.begin() + k * d_in);
        }
        return out;
    };
    const auto xval = gather(val);
    auto xtrain = gather(train);

    const Params L = layout(d_in, d_f, cfg.tied);
    std::vector<float> params(L.total, 0.0f), grad(L.total, 0.0f);
    // Random unit-norm dictionary; encoder starts as the decoder transpose.
    for (int i = 0; i < d_f; ++i) {
        double n2 = 0.0;
        float* row = params.data() + L.w_enc + static_cast<std::size_t>(i) * d_in;
        for (int j = 0; j < d_in; ++j) {
            row[j] = static_cast<float>(rng.normal());
            n2 += double(row[j]) * row[j];
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(n2));
        for (int j = 0; j < d_in; ++j) row[j] *= inv;
        if (!cfg.tied) std::copy(row, row + d_in, params.data() + L.w_dec + static_cast<std::size_t>(i) * d_in);
    }
    std::fill(params.begin() + L.theta, params.end(), static_cast<float>(cfg.theta_init));
    if (cfg.init_active_fraction > 0.0) {
        const int n_tr = static_cast<int>(train.size());
        std::vector<float> z(static_cast<std::size_t>(n_tr) * d_f);
        kernels::gemm_nt(xtrain, {params.data() + L.w_enc, static_cast<std::size_t>(d_f) * d_in}, z, n_tr, d_f, d_in);
        const int k = std::clamp(static_cast<int>(std::lround((1.0 - cfg.init_active_fraction) * n_tr)), 0, n_tr - 1);
        std::vector<float> col(n_tr);
        for (int i = 0; i < d_f; ++i) {
            for (int r = 0; r < n_tr; ++r) col[r] = z[static_cast<std::size_t>(r) * d_f + i];
            std::nth_element(col.begin(), col.begin() + k, col.end());
            params[L.theta + i] = std::max(col[k], static_cast<float>(cfg.theta_init));
        }
    }

    const float eps = static_cast<float>(cfg.ste_bandwidth);
    Adam opt(L.total, cfg.lr);
    auto eval_val = [&](const std::vector<float>& p) {
        const auto r = run_batch(xval.data(), n_val, d_in, d_f, cfg.tied, p, L, cfg.lambda, eps, nullptr);
        return (r.recon + cfg.lambda * r.l0) / n_val;
    };

    std::vector<float> best = params;
    double best_val = eval_val(params);
    int since_best = 0;
    std::vector<float> batch;
    std::vector<int> torder(train.size());
    for (std::size_t i = 0; i < torder.size(); ++i) torder[i] = static_cast<int>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(torder);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < torder.size(); start += cfg.batch_size) {
            const int B = static_cast<int>(std::min<std::size_t>(cfg.batch_size, torder.size() - start));
            batch.resize(static_cast<std::size_t>(B) * d_in);
            for (int b = 0; b < B; ++b) {
                const float* src = xtrain.data() + static_cast<std::size_t>(torder[start + b]) * d_in;
                std::copy(src, src + d_in, batch.begin() + static_cast<std::size_t>(b) * d_in);
            }
            const auto r = run_batch(batch.data(), B, d_in, d_f, cfg.tied, params, L, cfg.lambda, eps, &grad);
            const double loss = (r.recon + cfg.lambda * r.l0) / B;
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "train_sae: non-finite loss at epoch " << epoch << " (lr=" << cfg.lr << ", lambda=" << cfg.lambda
                    << ")";
                throw NumericError(msg.str());
            }
            loss_sum += loss * B;
            opt.step(params, grad);
            for (std::size_t i = L.theta; i < L.total; ++i) params[i] = std::max(params[i], kMinTheta);
            renormalize_decoder(params.data() + (cfg.tied ? L.w_enc : L.w_dec), d_f, d_in);
        }
        rep.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
        const double v = eval_val(params);
        rep.val_loss.push_back(v);
        if (v < best_val) {
            best_val = v;
            best = params;
            rep.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            rep.stopped_early = true;
            break;
        }
    }
    rep.final_loss = best_val;

    std::copy(best.begin() + L.w_enc, best.begin() + L.w_enc + sae.w_enc.size(), sae.w_enc.storage().begin());
    if (!cfg.tied) std::copy(best.begin() + L.w_dec, best.begin() + L.w_dec + sae.w_dec_t.size(), sae.w_dec_t.storage().begin());
    std::copy(best.begin() + L.b_enc, best.begin() + L.b_enc + d_f, sae.b_enc.begin());
    std::copy(best.begin() + L.b_dec, best.begin() + L.b_dec + d_in, sae.b_dec.begin());
    std::copy(best.begin() + L.theta, best.begin() + L.theta + d_f, sae.theta.begin());
    sae.check_invariants();
    return sae;
}

SaeQuality evaluate_sae(const SaeModel& sae, const Matrix& samples)
{
    if (samples.rows() == 0) throw PreconditionError("evaluate_sae: no samples");
    if (samples.cols() != sae.input_dim()) throw ShapeError("evaluate_sae: width mismatch");
    const int N = samples.rows(), d = samples.cols();
    std::vector<double> mu(d, 0.0);
    for (int r = 0; r < N; ++r)
        for (int j = 0; j < d; ++j) mu[j] += samples(r, j);
    for (auto& m : mu) m /= N;

    std::vector<double> err(N), norm(N), cen(N), l0(N);
    std::vector<std::vector<char>> fired(N);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < N; ++r) {
        const auto h = samples.row(r);
        const auto f = sae.encode(h);
        const auto hh = sae.decode(f);
        double e = 0.0, n = 0.0, c = 0.0;
        for (int j = 0; j < d; ++j) {
            e += double(h[j] - hh[j]) * (h[j] - hh[j]);
            n += double(h[j]) * h[j];
            c += (h[j] - mu[j]) * (h[j] - mu[j]);
        }
        err[r] = e;
        norm[r] = n;
        cen[r] = c;
        fired[r].resize(f.size());
        long k = 0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            fired[r][i] = f[i] != 0.0f;
            k += fired[r][i];
        }
        l0[r] = static_cast<double>(k);
    }
    double E = 0.0, Nn = 0.0, C = 0.0, L0 = 0.0;
    std::vector<char> ever(sae.feature_dim(), 0);
    for (int r = 0; r < N; ++r) {
        E += err[r];
        Nn += norm[r];
        C += cen[r];
        L0 += l0[r];
        for (std::size_t i = 0; i < ever.size(); ++i) ever[i] |= fired[r][i];
    }
    SaeQuality q;
    q.relative_l2 = Nn > 0.0 ? std::sqrt(E / Nn) : 0.0;
    q.fvu = C > 0.0 ? E / C : 0.0;
    q.mean_l0 = L0 / N;
    q.dead_fraction = static_cast<double>(std::count(ever.begin(), ever.end(), 0)) / static_cast<double>(ever.size());
    return q;
}

SelectedUnits select_features(const std::vector<const SaeModel*>& saes,
                              const std::vector<std::vector<float>>& activations, double tau1)
{
    if (saes.size() != activations.size()) throw ShapeError("select_features: one activation vector per SAE");
    LayerActivations acts;
    for (std::size_t k = 0; k < saes.size(); ++k) acts.push_back({saes[k]->layer, saes[k]->encode(activations[k])});
    return select_by_fraction_of_max(acts, tau1, UnitKind::Feature, false);
}

} // namespace featlab
