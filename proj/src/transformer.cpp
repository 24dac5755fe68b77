#include <algorithm>
#include <cmath>
#include <limits>

#include "featlab/errors.hpp"
#include "featlab/kernels.hpp"
#include "featlab/toylm.hpp"

namespace featlab {

namespace {

constexpr float kLnEps = 1e-5f;

void layer_norm(const Matrix& x, const float* g, const float* b, Matrix& y, std::vector<float>& mean,
                std::vector<float>& rstd, const std::vector<int>* rows = nullptr)
{
    const int d = x.cols();
    const int n = rows ? static_cast<int>(rows->size()) : x.rows();
    y = Matrix(n, d);
    mean.assign(n, 0.0f);
    rstd.assign(n, 0.0f);
    for (int i = 0; i < n; ++i) {
        const auto xr = x.row(rows ? (*rows)[i] : i);
        float mu = 0.0f;
        for (float v : xr) mu += v;
        mu /= static_cast<float>(d);
        float var = 0.0f;
        for (float v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<float>(d);
        const float rs = 1.0f / std::sqrt(var + kLnEps);
        mean[i] = mu;
        rstd[i] = rs;
        auto yr = y.row(i);
        for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * g[j] + b[j];
    }
}

// dx (+)= LN backward of dy; also accumulates dg/db when given.
void layer_norm_backward(const Matrix& x, const std::vector<float>& mean, const std::vector<float>& rstd,
                         const float* g, const Matrix& dy, Matrix& dx, float* dg, float* db,
                         const std::vector<int>* rows = nullptr)
{
    const int d = x.cols();
    std::vector<float> xhat(d), dxhat(d);
    for (int i = 0; i < dy.rows(); ++i) {
        const int r = rows ? (*rows)[i] : i;
        const auto xr = x.row(r);
        const auto dyr = dy.row(i);
        float m1 = 0.0f, m2 = 0.0f;
        for (int j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean[i]) * rstd[i];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
            if (dg) dg[j] += dyr[j] * xhat[j];
            if (db) db[j] += dyr[j];
        }
        m1 /= static_cast<float>(d);
        m2 /= static_cast<float>(d);
        auto dxr = dx.row(r);
        for (int j = 0; j < d; ++j) dxr[j] += rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
    }
}

// y = x W^T + b
void linear(const Matrix& x, const float* w, const float* b, int out, Matrix& y)
{
    y = Matrix(x.rows(), out);
    kernels::gemm_nt(x.storage(), {w, static_cast<std::size_t>(out) * x.cols()}, y.storage(), x.rows(), out, x.cols());
    kernels::add_row_bias(y.storage(), {b, static_cast<std::size_t>(out)}, x.rows(), out);
}

// dx (+)= dy W ; dW += dy^T x ; db += colsum(dy)
void linear_backward(const Matrix& x, const float* w, const Matrix& dy, Matrix& dx, float* dw, float* db,
                     bool accumulate_dx)
{
    const int rows = x.rows(), in = x.cols(), out = dy.cols();
    if (!accumulate_dx) dx = Matrix(rows, in);
    kernels::gemm_nn(dy.storage(), {w, static_cast<std::size_t>(out) * in}, dx.storage(), rows, in, out, true);
    if (dw) kernels::gemm_tn(dy.storage(), x.storage(), {dw, static_cast<std::size_t>(out) * in}, out, in, rows, true);
    if (db) kernels::accumulate_column_sums(dy.storage(), {db, static_cast<std::size_t>(out)}, rows, out);
}

struct ResolvedHook {
    int row;
    int seq;
    const Intervention* iv;
};

} // namespace

void softmax_inplace(std::span<float> v)
{
    float mx = -std::numeric_limits<float>::infinity();
    for (float x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (float& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float& x : v) x *= inv;
}

int ForwardCache::row(int seq, int pos) const
{
    const int len = static_cast<int>(tokens.at(seq).size());
    if (pos < 0) pos += len;
    if (pos < 0 || pos >= len) throw PreconditionError("position out of range");
    return seq_offset[seq] + pos;
}

const Matrix& ForwardCache::site_matrix(CaptureSite site, int layer) const
{
    if (layer < 0 || layer >= static_cast<int>(layers.size())) throw PreconditionError("invalid layer index");
    const auto& L = layers[layer];
    switch (site) {
    case CaptureSite::PostAttnResidual: return L.x_mid;
    case CaptureSite::MlpActivation: return L.act;
    case CaptureSite::PostMlpResidual: return L.x_out;
    }
    throw PreconditionError("invalid site");
}

ForwardCache forward(const Model& model, const std::vector<std::vector<int>>& batch, const ForwardOptions& opts)
{
    const auto& cfg = model.config();
    const auto& lay = model.layout();
    const int d = cfg.d_model, m = cfg.d_mlp, H = cfg.n_heads, dh = d / H;
    ForwardCache c;
    c.tokens = batch;
    for (const auto& s : batch) {
        if (s.empty()) throw PreconditionError("forward: empty sequence");
        if (static_cast<int>(s.size()) > cfg.max_seq_len) throw PreconditionError("forward: sequence exceeds max_seq_len");
        c.seq_offset.push_back(c.rows);
        c.rows += static_cast<int>(s.size());
    }
    const int B = static_cast<int>(batch.size());
    const int rows = c.rows;

    // Resolve interventions to concrete rows, grouped by (site, layer).
    std::vector<std::vector<ResolvedHook>> hooks(3 * cfg.n_layers);
    for (const auto& iv : opts.interventions) {
        if (iv.layer < 0 || iv.layer >= cfg.n_layers) throw PreconditionError("intervention: invalid layer index");
        if (iv.sequence >= B) throw PreconditionError("intervention: sequence index out of range");
        for (int s = 0; s < B; ++s) {
            if (iv.sequence >= 0 && iv.sequence != s) continue;
            hooks[static_cast<int>(iv.site) * cfg.n_layers + iv.layer].push_back({c.row(s, iv.position), s, &iv});
        }
    }
    auto run_hooks = [&](CaptureSite site, int layer, Matrix& mat, std::vector<char>& cut) {
        const auto& hs = hooks[static_cast<int>(site) * cfg.n_layers + layer];
        cut.assign(rows, 0);
        for (const auto& h : hs) {
            h.iv->apply(h.seq, mat.row(h.row));
            cut[h.row] = 1;
        }
    };

    Matrix x(rows, d);
    for (int s = 0; s < B; ++s) {
        for (int p = 0; p < static_cast<int>(batch[s].size()); ++p) {
            const int t = batch[s][p];
            if (t < 0 || t >= cfg.vocab_size) throw PreconditionError("forward: token id out of range");
            const float* te = model.at(lay.tok_emb) + static_cast<std::size_t>(t) * d;
            const float* pe = model.at(lay.pos_emb) + static_cast<std::size_t>(p) * d;
            auto xr = x.row(c.seq_offset[s] + p);
            for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
        }
    }

    c.layers.resize(cfg.n_layers);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& o = lay.layers[l];
        auto& L = c.layers[l];
        L.x_in = std::move(x);
        layer_norm(L.x_in, model.at(o.ln1_g), model.at(o.ln1_b), L.ln1, L.ln1_mean, L.ln1_rstd);
        linear(L.ln1, model.at(o.wq), model.at(o.bq), d, L.q);
        linear(L.ln1, model.at(o.wk), model.at(o.bk), d, L.k);
        linear(L.ln1, model.at(o.wv), model.at(o.bv), d, L.v);

        L.attn = Matrix(rows, d);
        L.probs.assign(static_cast<std::size_t>(B) * H, {});
        for (int s = 0; s < B; ++s) {
            const int T = static_cast<int>(batch[s].size());
            const int r0 = c.seq_offset[s];
            for (int h = 0; h < H; ++h) {
                auto& P = L.probs[static_cast<std::size_t>(s) * H + h];
                P.assign(static_cast<std::size_t>(T) * T, 0.0f);
                for (int i = 0; i < T; ++i) {
                    const float* qi = L.q.row(r0 + i).data() + h * dh;
                    float* pi = P.data() + static_cast<std::size_t>(i) * T;
                    for (int j = 0; j <= i; ++j) {
                        const float* kj = L.k.row(r0 + j).data() + h * dh;
                        float sdot = 0.0f;
                        for (int e = 0; e < dh; ++e) sdot += qi[e] * kj[e];
                        pi[j] = sdot * scale;
                    }
                    softmax_inplace({pi, static_cast<std::size_t>(i + 1)});
                    float* out = L.attn.row(r0 + i).data() + h * dh;
                    for (int j = 0; j <= i; ++j) {
                        const float* vj = L.v.row(r0 + j).data() + h * dh;
                        const float pij = pi[j];
                        for (int e = 0; e < dh; ++e) out[e] += pij * vj[e];
                    }
                }
            }
        }

        Matrix attn_out;
        linear(L.attn, model.at(o.wo), model.at(o.bo), d, attn_out);
        L.x_mid = Matrix(rows, d);
        for (std::size_t i = 0; i < L.x_mid.size(); ++i) L.x_mid.data()[i] = L.x_in.data()[i] + attn_out.data()[i];
        run_hooks(CaptureSite::PostAttnResidual, l, L.x_mid, L.cut_mid);

        layer_norm(L.x_mid, model.at(o.ln2_g), model.at(o.ln2_b), L.ln2, L.ln2_mean, L.ln2_rstd);
        linear(L.ln2, model.at(o.w1), model.at(o.b1), m, L.pre);
        L.act = Matrix(rows, m);
        for (std::size_t i = 0; i < L.act.size(); ++i) L.act.data()[i] = kernels::gelu(L.pre.data()[i]);
        run_hooks(CaptureSite::MlpActivation, l, L.act, L.cut_act);

        Matrix mlp_out;
        linear(L.act, model.at(o.w2), model.at(o.b2), d, mlp_out);
        L.x_out = Matrix(rows, d);
        for (std::size_t i = 0; i < L.x_out.size(); ++i) L.x_out.data()[i] = L.x_mid.data()[i] + mlp_out.data()[i];
        run_hooks(CaptureSite::PostMlpResidual, l, L.x_out, L.cut_out);
        x = L.x_out;
    }

    if (opts.all_logits) {
        c.logit_rows.resize(rows);
        for (int r = 0; r < rows; ++r) c.logit_rows[r] = r;
    } else {
        for (int s = 0; s < B; ++s) c.logit_rows.push_back(c.seq_offset[s] + static_cast<int>(batch[s].size()) - 1);
    }
    layer_norm(x, model.at(lay.lnf_g), model.at(lay.lnf_b), c.final_ln, c.lnf_mean, c.lnf_rstd, &c.logit_rows);
    c.logits = Matrix(c.final_ln.rows(), cfg.vocab_size);
    kernels::gemm_nt(c.final_ln.storage(), {model.at(lay.unembed), static_cast<std::size_t>(cfg.vocab_size) * d},
                     c.logits.storage(), c.final_ln.rows(), cfg.vocab_size, d);
    return c;
}

void backward(const Model& model, const ForwardCache& c, const Matrix& dlogits, std::vector<float>* param_grads,
              ActivationGrads* act_grads)
{
    const auto& cfg = model.config();
    const auto& lay = model.layout();
    const int d = cfg.d_model, m = cfg.d_mlp, H = cfg.n_heads, dh = d / H;
    const int rows = c.rows;
    if (dlogits.rows() != c.logits.rows() || dlogits.cols() != c.logits.cols()) throw ShapeError("backward: dlogits shape");
    if (param_grads && param_grads->size() != lay.total) throw ShapeError("backward: gradient buffer size");
    float* G = param_grads ? param_grads->data() : nullptr;
    auto g_at = [&](std::size_t off) -> float* { return G ? G + off : nullptr; };

    int lowest_needed = 0;
    if (act_grads) {
        act_grads->grads.assign(act_grads->layers.size(), Matrix());
        if (!G) {
            lowest_needed = cfg.n_layers;
            for (int l : act_grads->layers) {
                if (l < 0 || l >= cfg.n_layers) throw PreconditionError("backward: invalid layer index");
                lowest_needed = std::min(lowest_needed, l);
            }
        }
    }

    // Unembedding and final layer norm.
    const int nr = dlogits.rows();
    Matrix dfinal(nr, d);
    kernels::gemm_nn(dlogits.storage(), {model.at(lay.unembed), static_cast<std::size_t>(cfg.vocab_size) * d},
                     dfinal.storage(), nr, d, cfg.vocab_size);
    if (G) {
        kernels::gemm_tn(dlogits.storage(), c.final_ln.storage(),
                         {G + lay.unembed, static_cast<std::size_t>(cfg.vocab_size) * d}, cfg.vocab_size, d, nr, true);
    }
    Matrix dx(rows, d);
    layer_norm_backward(c.layers.back().x_out, c.lnf_mean, c.lnf_rstd, model.at(lay.lnf_g), dfinal, dx,
                        g_at(lay.lnf_g), g_at(lay.lnf_b), &c.logit_rows);

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const int B = static_cast<int>(c.tokens.size());
    for (int l = cfg.n_layers - 1; l >= lowest_needed; --l) {
        const auto& o = lay.layers[l];
        const auto& L = c.layers[l];

        Matrix d_out = std::move(dx);
        for (int r = 0; r < rows; ++r) {
            if (L.cut_out[r]) std::fill(d_out.row(r).begin(), d_out.row(r).end(), 0.0f);
        }

        Matrix d_act;
        linear_backward(L.act, model.at(o.w2), d_out, d_act, g_at(o.w2), g_at(o.b2), false);
        if (act_grads) {
            for (std::size_t i = 0; i < act_grads->layers.size(); ++i) {
                if (act_grads->layers[i] == l) act_grads->grads[i] = d_act;
            }
        }
        if (l == lowest_needed && !G) break;

        Matrix d_pre(rows, m);
        for (int r = 0; r < rows; ++r) {
            if (L.cut_act[r]) continue;
            const auto pr = L.pre.row(r);
            const auto da = d_act.row(r);
            auto dp = d_pre.row(r);
            for (int j = 0; j < m; ++j) dp[j] = da[j] * kernels::gelu_grad(pr[j]);
        }
        Matrix d_ln2;
        linear_backward(L.ln2, model.at(o.w1), d_pre, d_ln2, g_at(o.w1), g_at(o.b1), false);

        Matrix d_mid = d_out;
        layer_norm_backward(L.x_mid, L.ln2_mean, L.ln2_rstd, model.at(o.ln2_g), d_ln2, d_mid, g_at(o.ln2_g),
                            g_at(o.ln2_b));
        for (int r = 0; r < rows; ++r) {
            if (L.cut_mid[r]) std::fill(d_mid.row(r).begin(), d_mid.row(r).end(), 0.0f);
        }

        Matrix d_attn;
        linear_backward(L.attn, model.at(o.wo), d_mid, d_attn, g_at(o.wo), g_at(o.bo), false);

        Matrix dq(rows, d), dk(rows, d), dv(rows, d);
        std::vector<float> dp;
        for (int s = 0; s < B; ++s) {
            const int T = static_cast<int>(c.tokens[s].size());
            const int r0 = c.seq_offset[s];
            for (int h = 0; h < H; ++h) {
                const auto& P = L.probs[static_cast<std::size_t>(s) * H + h];
                dp.assign(static_cast<std::size_t>(T), 0.0f);
                for (int i = 0; i < T; ++i) {
                    const float* doi = d_attn.row(r0 + i).data() + h * dh;
                    const float* pi = P.data() + static_cast<std::size_t>(i) * T;
                    float dot = 0.0f;
                    for (int j = 0; j <= i; ++j) {
                        const float* vj = L.v.row(r0 + j).data() + h * dh;
                        float* dvj = dv.row(r0 + j).data() + h * dh;
                        float s_ = 0.0f;
                        for (int e = 0; e < dh; ++e) {
                            s_ += doi[e] * vj[e];
                            dvj[e] += pi[j] * doi[e];
                        }
                        dp[j] = s_;
                        dot += pi[j] * s_;
                    }
                    const float* qi = L.q.row(r0 + i).data() + h * dh;
                    float* dqi = dq.row(r0 + i).data() + h * dh;
                    for (int j = 0; j <= i; ++j) {
                        const float ds = pi[j] * (dp[j] - dot) * scale;
                        if (ds == 0.0f) continue;
                        const float* kj = L.k.row(r0 + j).data() + h * dh;
                        float* dkj = dk.row(r0 + j).data() + h * dh;
                        for (int e = 0; e < dh; ++e) {
                            dqi[e] += ds * kj[e];
                            dkj[e] += ds * qi[e];
                        }
                    }
                }
            }
        }

        Matrix d_ln1(rows, d);
        linear_backward(L.ln1, model.at(o.wq), dq, d_ln1, g_at(o.wq), g_at(o.bq), true);
        linear_backward(L.ln1, model.at(o.wk), dk, d_ln1, g_at(o.wk), g_at(o.bk), true);
        linear_backward(L.ln1, model.at(o.wv), dv, d_ln1, g_at(o.wv), g_at(o.bv), true);

        dx = std::move(d_mid);
        layer_norm_backward(L.x_in, L.ln1_mean, L.ln1_rstd, model.at(o.ln1_g), d_ln1, dx, g_at(o.ln1_g),
                            g_at(o.ln1_b));
    }

    if (!G) return;
    for (int s = 0; s < B; ++s) {
        for (int p = 0; p < static_cast<int>(c.tokens[s].size()); ++p) {
            const auto dr = dx.row(c.seq_offset[s] + p);
            float* te = G + lay.tok_emb + static_cast<std::size_t>(c.tokens[s][p]) * d;
            float* pe = G + lay.pos_emb + static_cast<std::size_t>(p) * d;
            for (int j = 0; j < d; ++j) {
                te[j] += dr[j];
                pe[j] += dr[j];
            }
        }
    }
}

} // namespace featlab
