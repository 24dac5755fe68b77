#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "featlab/datasets.hpp"
#include "featlab/io.hpp"
#include "featlab/tensor.hpp"

namespace featlab {

// ---------------------------------------------------------------------------
// Tokenizer

// Word-level vocabulary. Ids 0..2 are reserved; everything else is assigned
// in order of first appearance, so the same corpus always yields the same ids.
class Tokenizer {
public:
    static constexpr int kEos = 0;
    static constexpr int kPad = 1;
    static constexpr int kUnk = 2;

    static Tokenizer build(const std::vector<std::string>& corpus);

    // Whitespace split; trailing '?', ',', '.' and a possessive "'s" become
    // their own tokens.
    static std::vector<std::string> split_words(std::string_view text);

    std::vector<int> encode(std::string_view text) const;
    int id(const std::string& word) const;
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }
    bool contains(const std::string& word) const { return index_.count(word) != 0; }

    nlohmann::json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Model

enum class CaptureSite { PostAttnResidual, MlpActivation, PostMlpResidual };

std::string to_string(CaptureSite site);
CaptureSite parse_site(const std::string& name);

struct ModelConfig {
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_mlp = 256;
    int vocab_size = 0;
    int max_seq_len = 32;
    std::uint64_t seed = 0;

    void validate() const;
    int site_width(CaptureSite site) const { return site == CaptureSite::MlpActivation ? d_mlp : d_model; }
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Offsets of every tensor inside the flat parameter vector. Linear weights
// are stored (out x in), so w2 is d_model x d_mlp and its column c carries
// the output of intermediate neuron c.
struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
    std::size_t tok_emb = 0, pos_emb = 0;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_g = 0, lnf_b = 0, unembed = 0;
    std::size_t total = 0;

    struct Entry {
        std::string name;
        std::size_t offset;
        int rows, cols;
    };
    std::vector<Entry> entries;  // checkpoint order

    static ParamLayout build(const ModelConfig& cfg);
};

class Model {
public:
    Model() = default;
    explicit Model(const ModelConfig& cfg);  // seeded random init

    const ModelConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }

    std::span<float> params() { return params_; }
    std::span<const float> params() const { return params_; }

    float* at(std::size_t offset) { return params_.data() + offset; }
    const float* at(std::size_t offset) const { return params_.data() + offset; }

    // W2 of layer l, element (row r, column c).
    float& w2(int layer, int r, int c);
    float w2(int layer, int r, int c) const;

    bool all_finite() const;

    Checkpoint to_checkpoint() const;
    static Model from_checkpoint(const Checkpoint& ck, const std::string& origin = "checkpoint");
    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

    bool operator==(const Model& o) const { return cfg_.to_json() == o.cfg_.to_json() && params_ == o.params_; }

private:
    ModelConfig cfg_;
    ParamLayout layout_;
    std::vector<float> params_;
};

// ---------------------------------------------------------------------------
// Forward / backward

// Replaces an activation during the forward pass. `position` indexes the
// sequence (negative counts from the end); `sequence` selects a batch row,
// -1 applies to every sequence.
struct Intervention {
    CaptureSite site = CaptureSite::MlpActivation;
    int layer = 0;
    int position = -1;
    int sequence = -1;
    std::function<void(int sequence, std::span<float> activation)> apply;
};

struct ForwardOptions {
    bool all_logits = true;  // false: logits for the final position only
    std::vector<Intervention> interventions;
};

// Everything the backward pass and the capture API need from one forward.
struct ForwardCache {
    std::vector<std::vector<int>> tokens;
    std::vector<int> seq_offset;  // first row of each sequence
    int rows = 0;

    struct Layer {
        Matrix x_in, ln1, q, k, v, attn, x_mid, ln2, pre, act, x_out;
        std::vector<float> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
        std::vector<std::vector<float>> probs;  // [seq*heads] -> T x T
        std::vector<char> cut_mid, cut_act, cut_out;  // rows overwritten by an intervention
    };
    std::vector<Layer> layers;
    Matrix final_ln;
    std::vector<float> lnf_mean, lnf_rstd;
    std::vector<int> logit_rows;  // cache rows that have logits
    Matrix logits;                // logit_rows.size() x vocab

    int row(int seq, int pos) const;
    const Matrix& site_matrix(CaptureSite site, int layer) const;
};

ForwardCache forward(const Model& model, const std::vector<std::vector<int>>& batch, const ForwardOptions& opts = {});

// Gradients with respect to the MLP activation of the requested layers.
struct ActivationGrads {
    std::vector<int> layers;
    std::vector<Matrix> grads;  // rows x d_mlp, same order as `layers`
};

// dlogits must have the shape of cache.logits. `param_grads` (accumulated
// into, may be null) uses the model's flat layout.
void backward(const Model& model, const ForwardCache& cache, const Matrix& dlogits, std::vector<float>* param_grads,
              ActivationGrads* act_grads = nullptr);

void softmax_inplace(std::span<float> v);

// ---------------------------------------------------------------------------
// Training and evaluation

struct TokenizedPrompt {
    std::string id;
    std::string relation;
    std::vector<int> prompt;
    std::vector<int> answer;
};

std::vector<TokenizedPrompt> tokenize(const Tokenizer& tok, const FactSet& facts);

enum class TrainMode { Pretrain, Finetune };

struct TrainConfig {
    double lr = 3e-3;
    int batch_size = 32;
    int epochs = 40;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    std::uint64_t seed = 7;
    TrainMode mode = TrainMode::Pretrain;

    // Finetuning runs the same optimizer at a tenth of the rate.
    double effective_lr() const { return mode == TrainMode::Finetune ? lr / 10.0 : lr; }
    void validate() const;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double final_accuracy = 0.0;
    long steps = 0;
};

// Next-token cross-entropy over prompt + answer sequences.
TrainReport train_lm(Model& model, const std::vector<TokenizedPrompt>& data, const TrainConfig& cfg);

// Teacher-forced product of answer-token probabilities.
double answer_prob(const Model& model, std::span<const int> prompt, std::span<const int> answer,
                   const std::vector<Intervention>& interventions = {});

// Greedy next token after the prompt.
int predict_next(const Model& model, std::span<const int> prompt, const std::vector<Intervention>& interventions = {});

// Fraction of prompts whose greedy next token equals the first answer token.
double answer_accuracy(const Model& model, const std::vector<TokenizedPrompt>& data);

double perplexity(const Model& model, const std::vector<std::vector<int>>& corpus);

struct ActivationRecord {
    CaptureSite site;
    int layer;
    int position;
    std::string input_id;
    std::vector<float> vector;
};

std::vector<ActivationRecord> capture_activations(const Model& model, const std::vector<TokenizedPrompt>& inputs,
                                                  CaptureSite site, const std::vector<int>& layers,
                                                  bool full_sequence = false);

// Activation matrix of one site/layer, one row per record.
Matrix stack_records(const std::vector<ActivationRecord>& records, int layer);

// Logits for every position with the activation at (site, layer, position)
// replaced by `new_vector`.
Matrix run_with_substitution(const Model& model, std::span<const int> tokens, CaptureSite site, int layer,
                             int position, std::span<const float> new_vector);

} // namespace featlab
