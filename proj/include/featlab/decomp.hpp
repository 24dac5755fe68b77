#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "featlab/io.hpp"
#include "featlab/tensor.hpp"
#include "featlab/toylm.hpp"
#include "featlab/units.hpp"

namespace featlab {

enum class DecompKind { PCA, ICA, RD };
std::string to_string(DecompKind kind);
DecompKind parse_decomp_kind(const std::string& name);

// Linear baseline: f = forward * (h - mean), h' = inverse * f + mean.
// Fitting and the double-precision entry points run in double; the Codec
// overrides convert at the boundary.
class Decomposer final : public Codec {
public:
    DecompKind kind = DecompKind::PCA;
    Eigen::VectorXd mean;        // d_in
    Eigen::MatrixXd forward;     // d_f x d_in
    Eigen::MatrixXd inverse;     // d_in x d_f
    Eigen::MatrixXd whitening;   // ICA only: d_f x d_in
    Eigen::VectorXd explained;   // PCA only: per-component variance ratio
    int requested_dim = 0;       // d_f asked for before capping at the rank
    bool warning = false;
    std::string warning_message;
    int iterations = 0;          // ICA fixed-point iterations run
    CaptureSite site = CaptureSite::MlpActivation;
    int layer = 0;

    int input_dim() const override { return static_cast<int>(forward.cols()); }
    int feature_dim() const override { return static_cast<int>(forward.rows()); }
    bool signed_codes() const override { return true; }

    std::vector<float> encode(std::span<const float> h) const override;
    std::vector<float> decode(std::span<const float> f) const override;

    Eigen::VectorXd project(const Eigen::VectorXd& h) const;
    Eigen::VectorXd reconstruct(const Eigen::VectorXd& f) const;

    Checkpoint to_checkpoint() const;
    static Decomposer from_checkpoint(const Checkpoint& c);
    void save(const std::filesystem::path& path) const;
    static Decomposer load(const std::filesystem::path& path);
};

Eigen::MatrixXd to_eigen(const Matrix& m);

// Components sorted by descending eigenvalue; keeps the smallest prefix whose
// cumulative explained variance reaches var_threshold. Eigenvalues below
// 1e-10 * max are treated as zero.
Decomposer fit_pca(const Eigen::MatrixXd& samples, double var_threshold = 0.95);

struct IcaOptions {
    int max_iter = 500;
    double tol = 1e-6;
};
// Symmetric FastICA with the cubic contrast on whitened data. d_f is capped
// at the numerical rank of the sample covariance.
Decomposer fit_ica(const Eigen::MatrixXd& samples, int d_f, std::uint64_t seed, const IcaOptions& opts = {});

// Orthonormal random directions from the QR of a Gaussian matrix. The
// mean is zero, so the transform is a pure rotation onto the columns.
Decomposer fit_random(int d_in, int d_f, std::uint64_t seed);

SelectedUnits select_units(const std::vector<const Decomposer*>& decs,
                           const std::vector<std::vector<float>>& activations, double tau1);

} // namespace featlab
