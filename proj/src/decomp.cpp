#include "featlab/decomp.hpp"

#include <algorithm>
#include <cmath>

#include "featlab/errors.hpp"
#include "featlab/rng.hpp"

namespace featlab {

std::string to_string(DecompKind kind)
{
    switch (kind) {
    case DecompKind::PCA: return "pca";
    case DecompKind::ICA: return "ica";
    case DecompKind::RD: return "rd";
    }
    return "?";
}

DecompKind parse_decomp_kind(const std::string& name)
{
    if (name == "pca") return DecompKind::PCA;
    if (name == "ica") return DecompKind::ICA;
    if (name == "rd") return DecompKind::RD;
    throw ConfigError("unknown decomposition '" + name + "' (expected pca, ica or rd)");
}

Eigen::MatrixXd to_eigen(const Matrix& m)
{
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
    return out;
}

Eigen::VectorXd Decomposer::project(const Eigen::VectorXd& h) const
{
    if (h.size() != forward.cols()) throw ShapeError("decomposer input: expected length " + std::to_string(forward.cols()));
    return forward * (h - mean);
}

Eigen::VectorXd Decomposer::reconstruct(const Eigen::VectorXd& f) const
{
    if (f.size() != inverse.cols()) throw ShapeError("decomposer code: expected length " + std::to_string(inverse.cols()));
    return inverse * f + mean;
}

std::vector<float> Decomposer::encode(std::span<const float> h) const
{
    require_length(h, static_cast<std::size_t>(input_dim()), "decomposer input");
    Eigen::VectorXd x(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) x[i] = h[i];
    const Eigen::VectorXd f = project(x);
    return {f.data(), f.data() + f.size()};
}

std::vector<float> Decomposer::decode(std::span<const float> f) const
{
    require_length(f, static_cast<std::size_t>(feature_dim()), "decomposer code");
    Eigen::VectorXd x(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) x[i] = f[i];
    const Eigen::VectorXd h = reconstruct(x);
    return {h.data(), h.data() + h.size()};
}

namespace {

std::vector<float> flat(const Eigen::MatrixXd& m)
{
    std::vector<float> out(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    return out;
}

Eigen::MatrixXd unflat(const NamedTensor& t, Eigen::Index rows, Eigen::Index cols)
{
    if (static_cast<Eigen::Index>(t.data.size()) != rows * cols) throw ShapeError("decomposer tensor " + t.name);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t.data[static_cast<std::size_t>(r * cols + c)];
    return m;
}

struct Eigs {
    Eigen::VectorXd values;   // descending, near-zero ones dropped
    Eigen::MatrixXd vectors;  // columns match values
    double total = 0.0;       // trace of the covariance
    Eigen::VectorXd mean;
};

Eigs covariance_eigs(const Eigen::MatrixXd& samples)
{
    const Eigen::Index n = samples.rows();
    if (n < 2) throw PreconditionError("decomposition needs at least two samples");
    if (!samples.allFinite()) throw PreconditionError("decomposition input is not finite");
    Eigs e;
    e.mean = samples.colwise().mean().transpose();
    const Eigen::MatrixXd centered = samples.rowwise() - e.mean.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
    const Eigen::Index d = cov.rows();
    e.total = cov.trace();
    const double vmax = es.eigenvalues().maxCoeff();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = d - 1; i >= 0; --i) {
        if (vmax > 0.0 && es.eigenvalues()[i] >= 1e-10 * vmax) keep.push_back(i);
    }
    e.values.resize(static_cast<Eigen::Index>(keep.size()));
    e.vectors.resize(d, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        e.values[static_cast<Eigen::Index>(k)] = es.eigenvalues()[keep[k]];
        Eigen::VectorXd v = es.eigenvectors().col(keep[k]);
        // Deterministic sign: largest-magnitude entry positive.
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0.0) v = -v;
        e.vectors.col(static_cast<Eigen::Index>(k)) = v;
    }
    return e;
}

// (W W^T)^{-1/2} W
Eigen::MatrixXd symmetric_decorrelate(const Eigen::MatrixXd& w)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * w.transpose());
    const Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

} // namespace

Decomposer fit_pca(const Eigen::MatrixXd& samples, double var_threshold)
{
    if (!(var_threshold > 0.0 && var_threshold <= 1.0)) throw PreconditionError("PCA variance threshold must lie in (0, 1]");
    if (samples.rows() < samples.cols()) throw PreconditionError("PCA needs at least d_in samples");
    const Eigs e = covariance_eigs(samples);
    Decomposer d;
    d.kind = DecompKind::PCA;
    d.mean = e.mean;
    if (e.values.size() == 0) throw PreconditionError("PCA: data has zero variance");
    const Eigen::VectorXd ratio = e.values / e.total;
    Eigen::Index k = 0;
    double cum = 0.0;
    while (k < ratio.size()) {
        cum += ratio[k++];
        if (cum >= var_threshold - 1e-12) break;
    }
    d.requested_dim = static_cast<int>(k);
    d.explained = ratio.head(k);
    d.inverse = e.vectors.leftCols(k);
    d.forward = d.inverse.transpose();
    return d;
}

Decomposer fit_ica(const Eigen::MatrixXd& samples, int d_f, std::uint64_t seed, const IcaOptions& opts)
{
    if (d_f < 1) throw PreconditionError("ICA: d_f must be >= 1");
    const Eigs e = covariance_eigs(samples);
    const Eigen::Index rank = e.values.size();
    if (rank == 0) throw PreconditionError("ICA: data has zero variance");
    const Eigen::Index k = std::min<Eigen::Index>(d_f, rank);

    Decomposer d;
    d.kind = DecompKind::ICA;
    d.mean = e.mean;
    d.requested_dim = d_f;
    const Eigen::VectorXd sd = e.values.head(k).cwiseSqrt();
    d.whitening = sd.cwiseInverse().asDiagonal() * e.vectors.leftCols(k).transpose();
    const Eigen::MatrixXd unwhiten = e.vectors.leftCols(k) * sd.asDiagonal();

    const Eigen::Index n = samples.rows();
    const Eigen::MatrixXd X = d.whitening * (samples.rowwise() - e.mean.transpose()).transpose();  // k x n

    Rng rng(seed);
    Eigen::MatrixXd W(k, k);
    for (Eigen::Index r = 0; r < k; ++r)
        for (Eigen::Index c = 0; c < k; ++c) W(r, c) = rng.normal();
    W = symmetric_decorrelate(W);

    Eigen::MatrixXd best = W;
    double best_change = std::numeric_limits<double>::infinity();
    bool converged = false;
    for (int it = 0; it < opts.max_iter; ++it) {
        const Eigen::MatrixXd Y = W * X;  // k x n
        const Eigen::MatrixXd g = Y.array().cube().matrix();
        const Eigen::VectorXd gp_mean = (3.0 * Y.array().square()).rowwise().mean();
        Eigen::MatrixXd Wn = (g * X.transpose()) / static_cast<double>(n) - gp_mean.asDiagonal() * W;
        Wn = symmetric_decorrelate(Wn);
        const double change = (1.0 - (Wn * W.transpose()).diagonal().cwiseAbs().array()).abs().maxCoeff();
        W = Wn;
        d.iterations = it + 1;
        if (change < best_change) {
            best_change = change;
            best = W;
        }
        if (change < opts.tol) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        W = best;
        d.warning = true;
        d.warning_message = "FastICA did not converge in " + std::to_string(opts.max_iter) + " iterations";
    }

    // Sources whose kurtosis is indistinguishable from a Gaussian's are not
    // identifiable.
    const Eigen::MatrixXd S = W * X;
    const double kurt_tol = 3.0 * std::sqrt(24.0 / static_cast<double>(n));
    int gaussian_like = 0;
    for (Eigen::Index r = 0; r < k; ++r) {
        const double m2 = S.row(r).array().square().mean();
        const double m4 = S.row(r).array().pow(4).mean();
        if (std::fabs(m4 / (m2 * m2) - 3.0) < kurt_tol) ++gaussian_like;
    }
    if (gaussian_like > 1) {
        d.warning = true;
        if (!d.warning_message.empty()) d.warning_message += "; ";
        d.warning_message += std::to_string(gaussian_like) + " components are near-Gaussian (unidentifiable)";
    }

    d.forward = W * d.whitening;
    d.inverse = unwhiten * W.transpose();
    return d;
}

Decomposer fit_random(int d_in, int d_f, std::uint64_t seed)
{
    if (d_in < 1 || d_f < 1) throw PreconditionError("random directions: dimensions must be positive");
    Decomposer d;
    d.kind = DecompKind::RD;
    d.requested_dim = d_f;
    const int k = std::min(d_f, d_in);
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
    Eigen::MatrixXd G(d_in, k);
    for (int r = 0; r < d_in; ++r)
        for (int c = 0; c < k; ++c) G(r, c) = rng.normal(0.0, sd);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(d_in, k);
    const Eigen::MatrixXd R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    for (int c = 0; c < k; ++c) {
        if (R(c, c) < 0.0) Q.col(c) = -Q.col(c);
    }
    d.mean = Eigen::VectorXd::Zero(d_in);
    d.inverse = Q;
    d.forward = Q.transpose();
    if (k < d_f) {
        d.warning = true;
        d.warning_message = "d_f capped at d_in for orthonormal directions";
    }
    return d;
}

Checkpoint Decomposer::to_checkpoint() const
{
    Checkpoint c;
    c.kind = "decomposer";
    c.meta = {{"method", to_string(kind)},
              {"site", to_string(site)},
              {"layer", layer},
              {"d_in", input_dim()},
              {"d_f", feature_dim()},
              {"requested_d_f", requested_dim},
              {"warning", warning},
              {"warning_message", warning_message},
              {"iterations", iterations}};
    c.add("mean", {mean.size()}, flat(mean));
    c.add("forward", {forward.rows(), forward.cols()}, flat(forward));
    c.add("inverse", {inverse.rows(), inverse.cols()}, flat(inverse));
    if (kind == DecompKind::ICA) c.add("whitening", {whitening.rows(), whitening.cols()}, flat(whitening));
    if (kind == DecompKind::PCA) c.add("explained", {explained.size()}, flat(explained));
    return c;
}

Decomposer Decomposer::from_checkpoint(const Checkpoint& c)
{
    if (c.kind != "decomposer") throw PreconditionError("checkpoint kind '" + c.kind + "' is not a decomposer");
    Decomposer d;
    d.kind = parse_decomp_kind(c.meta.at("method").get<std::string>());
    d.site = parse_site(c.meta.at("site").get<std::string>());
    d.layer = c.meta.at("layer").get<int>();
    d.requested_dim = c.meta.at("requested_d_f").get<int>();
    d.warning = c.meta.at("warning").get<bool>();
    d.warning_message = c.meta.at("warning_message").get<std::string>();
    d.iterations = c.meta.value("iterations", 0);
    const Eigen::Index din = c.meta.at("d_in").get<int>(), df = c.meta.at("d_f").get<int>();
    d.mean = unflat(c.get("mean"), din, 1);
    d.forward = unflat(c.get("forward"), df, din);
    d.inverse = unflat(c.get("inverse"), din, df);
    if (d.kind == DecompKind::ICA) d.whitening = unflat(c.get("whitening"), df, din);
    if (d.kind == DecompKind::PCA) d.explained = unflat(c.get("explained"), df, 1);
    return d;
}

void Decomposer::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }
Decomposer Decomposer::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

SelectedUnits select_units(const std::vector<const Decomposer*>& decs,
                           const std::vector<std::vector<float>>& activations, double tau1)
{
    if (decs.size() != activations.size()) throw ShapeError("select_units: one activation vector per decomposer");
    LayerActivations acts;
    for (std::size_t k = 0; k < decs.size(); ++k) acts.push_back({decs[k]->layer, decs[k]->encode(activations[k])});
    return select_by_fraction_of_max(acts, tau1, UnitKind::Feature, true);
}

} // namespace featlab
