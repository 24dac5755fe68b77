#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "featlab/io.hpp"
#include "featlab/tensor.hpp"
#include "featlab/toylm.hpp"
#include "featlab/units.hpp"

namespace featlab {

struct SaeTrainConfig {
    double lambda = 0.003;
    double lr = 1e-3;
    int batch_size = 256;
    int epochs = 100;
    int patience = 10;
    int n_multiplier = 4;
    // Kernel bandwidth of the threshold pseudo-gradient, in units of the
    // standardized inputs.
    double ste_bandwidth = 0.001;
    double theta_init = 0.001;
    // When > 0, each threshold starts at the quantile of its initial
    // pre-activations that leaves this fraction of training samples active
    // (never below theta_init).
    double init_active_fraction = 0.2;
    double val_fraction = 0.1;
    bool tied = false;
    std::uint64_t seed = 11;

    void validate() const;
    json to_json() const;
    static SaeTrainConfig from_json(const json& j);
};

struct SaeTrainReport {
    std::vector<double> train_loss;  // per epoch, surrogate objective
    std::vector<double> val_loss;    // per epoch, exact-L0 objective
    int best_epoch = -1;
    double final_loss = 0.0;         // validation loss of the kept parameters
    bool stopped_early = false;
    bool few_samples = false;        // fewer than 10 * d_f samples
};

class SaeModel final : public Codec {
public:
    SaeModel() = default;
    SaeModel(int d_in, int d_f, bool tied);

    int input_dim() const override { return d_in_; }
    int feature_dim() const override { return d_f_; }
    bool signed_codes() const override { return false; }
    bool tied() const { return tied_; }

    std::vector<float> encode(std::span<const float> h) const override;
    std::vector<float> decode(std::span<const float> f) const override;
    // W_enc * normalize(h) + b_enc, before the threshold.
    std::vector<float> pre_activation(std::span<const float> h) const;

    std::vector<float> normalize(std::span<const float> h) const;
    std::vector<float> denormalize(std::span<const float> x) const;

    // Column i of W_dec (a direction in the standardized input space).
    std::span<const float> decoder_column(int i) const;
    // Row i of W_enc.
    std::span<const float> encoder_row(int i) const;

    // Tied mode keeps W_dec = W_enc^T by construction; untied mode stores the
    // decoder as its transpose so that columns are contiguous. Training keeps
    // decoder columns at unit norm.
    Matrix w_enc;          // d_f x d_in
    Matrix w_dec_t;        // d_f x d_in (row i = column i of W_dec); unused when tied
    std::vector<float> b_enc, b_dec, theta;
    std::vector<float> mean, stddev;
    CaptureSite site = CaptureSite::MlpActivation;
    int layer = 0;

    void check_invariants() const;
    Checkpoint to_checkpoint() const;
    static SaeModel from_checkpoint(const Checkpoint& c);
    void save(const std::filesystem::path& path) const;
    static SaeModel load(const std::filesystem::path& path);

    bool operator==(const SaeModel& o) const
    {
        return d_in_ == o.d_in_ && d_f_ == o.d_f_ && tied_ == o.tied_ && site == o.site && layer == o.layer &&
               w_enc == o.w_enc && w_dec_t == o.w_dec_t && b_enc == o.b_enc && b_dec == o.b_dec && theta == o.theta &&
               mean == o.mean && stddev == o.stddev;
    }

private:
    int d_in_ = 0;
    int d_f_ = 0;
    bool tied_ = false;
};

// JumpReLU with the H(0) = 0 convention: z when z > theta, else 0.
inline float jump_relu(float z, float theta) { return z > theta ? z : 0.0f; }

SaeModel train_sae(const Matrix& samples, const SaeTrainConfig& cfg, CaptureSite site, int layer,
                   SaeTrainReport* report = nullptr);

struct SaeQuality {
    double relative_l2 = 0.0;  // sqrt(sum ||h - h_hat||^2 / sum ||h||^2), original units
    double fvu = 0.0;          // sum ||h - h_hat||^2 / sum ||h - mean||^2
    double mean_l0 = 0.0;
    double dead_fraction = 0.0;
};
SaeQuality evaluate_sae(const SaeModel& sae, const Matrix& samples);

// Per-input selection across a stack of SAEs, one activation vector per SAE.
SelectedUnits select_features(const std::vector<const SaeModel*>& saes,
                              const std::vector<std::vector<float>>& activations, double tau1);

} // namespace featlab
