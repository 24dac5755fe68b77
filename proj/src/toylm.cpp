#include "featlab/toylm.hpp"

#include <cmath>
#include <sstream>

#include "featlab/errors.hpp"
#include "featlab/io.hpp"
#include "featlab/rng.hpp"

namespace featlab {

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::string> Tokenizer::split_words(std::string_view text)
{
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) {
        std::vector<std::string> tail;
        while (!w.empty() && (w.back() == '?' || w.back() == ',' || w.back() == '.')) {
            // Keep dots that belong to the word (e-mail addresses, "St.").
            if (w.back() == '.' && w.size() > 1 && w.find('@') != std::string::npos) break;
            tail.insert(tail.begin(), std::string(1, w.back()));
            w.pop_back();
        }
        if (w.size() > 2 && w.compare(w.size() - 2, 2, "'s") == 0) {
            out.push_back(w.substr(0, w.size() - 2));
            out.push_back("'s");
        } else if (!w.empty()) {
            out.push_back(w);
        }
        out.insert(out.end(), tail.begin(), tail.end());
    }
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus)
{
    if (corpus.empty()) throw ConfigError("tokenizer: empty corpus");
    Tokenizer t;
    for (const char* r : {"<eos>", "<pad>", "<unk>"}) {
        t.index_[r] = static_cast<int>(t.words_.size());
        t.words_.push_back(r);
    }
    for (const auto& line : corpus) {
        for (auto& w : split_words(line)) {
            if (t.index_.emplace(w, static_cast<int>(t.words_.size())).second) t.words_.push_back(w);
        }
    }
    return t;
}

std::vector<int> Tokenizer::encode(std::string_view text) const
{
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

int Tokenizer::id(const std::string& word) const
{
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::word(int id) const
{
    if (id < 0 || id >= size()) throw PreconditionError("token id out of range");
    return words_[id];
}

nlohmann::json Tokenizer::to_json() const { return {{"words", words_}}; }

Tokenizer Tokenizer::from_json(const nlohmann::json& j)
{
    Tokenizer t;
    t.words_ = j.at("words").get<std::vector<std::string>>();
    if (t.words_.size() < 3 || t.words_[kEos] != "<eos>") throw PreconditionError("tokenizer json: reserved ids missing");
    for (std::size_t i = 0; i < t.words_.size(); ++i) t.index_[t.words_[i]] = static_cast<int>(i);
    return t;
}

// ---------------------------------------------------------------------------
// Config and layout

std::string to_string(CaptureSite site)
{
    switch (site) {
    case CaptureSite::PostAttnResidual: return "post_attn";
    case CaptureSite::MlpActivation: return "mlp";
    case CaptureSite::PostMlpResidual: return "post_mlp";
    }
    return "?";
}

CaptureSite parse_site(const std::string& name)
{
    if (name == "post_attn") return CaptureSite::PostAttnResidual;
    if (name == "mlp") return CaptureSite::MlpActivation;
    if (name == "post_mlp") return CaptureSite::PostMlpResidual;
    throw ConfigError("unknown capture site '" + name + "' (expected post_attn, mlp or post_mlp)");
}

void ModelConfig::validate() const
{
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 || max_seq_len < 1) {
        throw ConfigError("model dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

nlohmann::json ModelConfig::to_json() const
{
    return {{"d_model", d_model}, {"n_layers", n_layers}, {"n_heads", n_heads}, {"d_mlp", d_mlp},
            {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j)
{
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_mlp = j.at("d_mlp");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.seed = j.at("seed");
    c.validate();
    return c;
}

ParamLayout ParamLayout::build(const ModelConfig& cfg)
{
    ParamLayout p;
    std::size_t off = 0;
    auto take = [&](const std::string& name, int rows, int cols) {
        p.entries.push_back({name, off, rows, cols});
        const auto at = off;
        off += static_cast<std::size_t>(rows) * cols;
        return at;
    };
    const int d = cfg.d_model, m = cfg.d_mlp;
    p.tok_emb = take("tok_emb", cfg.vocab_size, d);
    p.pos_emb = take("pos_emb", cfg.max_seq_len, d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto pre = "layer" + std::to_string(l) + ".";
        LayerOffsets lo{};
        lo.ln1_g = take(pre + "ln1_g", 1, d);
        lo.ln1_b = take(pre + "ln1_b", 1, d);
        lo.wq = take(pre + "wq", d, d);
        lo.bq = take(pre + "bq", 1, d);
        lo.wk = take(pre + "wk", d, d);
        lo.bk = take(pre + "bk", 1, d);
        lo.wv = take(pre + "wv", d, d);
        lo.bv = take(pre + "bv", 1, d);
        lo.wo = take(pre + "wo", d, d);
        lo.bo = take(pre + "bo", 1, d);
        lo.ln2_g = take(pre + "ln2_g", 1, d);
        lo.ln2_b = take(pre + "ln2_b", 1, d);
        lo.w1 = take(pre + "w1", m, d);
        lo.b1 = take(pre + "b1", 1, m);
        lo.w2 = take(pre + "w2", d, m);
        lo.b2 = take(pre + "b2", 1, d);
        p.layers.push_back(lo);
    }
    p.lnf_g = take("lnf_g", 1, d);
    p.lnf_b = take("lnf_b", 1, d);
    p.unembed = take("unembed", cfg.vocab_size, d);
    p.total = off;
    return p;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    layout_ = ParamLayout::build(cfg_);
    params_.assign(layout_.total, 0.0f);

    Rng rng(cfg_.seed);
    const float residual_scale = 1.0f / std::sqrt(2.0f * cfg_.n_layers);
    for (const auto& e : layout_.entries) {
        const auto& n = e.name;
        float* p = params_.data() + e.offset;
        const std::size_t count = static_cast<std::size_t>(e.rows) * e.cols;
        const bool is_gain = n.ends_with("_g");
        const bool is_bias = e.rows == 1 && !is_gain;
        if (is_gain) {
            std::fill(p, p + count, 1.0f);
        } else if (!is_bias) {
            float std = 0.02f;
            if (n.ends_with(".wo") || n.ends_with(".w2")) std *= residual_scale;
            if (n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") || n.ends_with(".w1")) {
                std = 1.0f / std::sqrt(static_cast<float>(e.cols));
            }
            for (std::size_t i = 0; i < count; ++i) p[i] = static_cast<float>(rng.normal(0.0, std));
        }
    }
}

float& Model::w2(int layer, int r, int c)
{
    return params_[layout_.layers.at(layer).w2 + static_cast<std::size_t>(r) * cfg_.d_mlp + c];
}

float Model::w2(int layer, int r, int c) const
{
    return params_[layout_.layers.at(layer).w2 + static_cast<std::size_t>(r) * cfg_.d_mlp + c];
}

bool Model::all_finite() const
{
    for (float v : params_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Checkpoint Model::to_checkpoint() const
{
    Checkpoint ck;
    ck.kind = "toylm";
    ck.meta["config"] = cfg_.to_json();
    ck.meta["seed"] = cfg_.seed;
    for (const auto& e : layout_.entries) {
        const auto begin = params_.begin() + static_cast<std::ptrdiff_t>(e.offset);
        ck.add(e.name, {e.rows, e.cols},
               std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(e.rows) * e.cols));
    }
    return ck;
}

Model Model::from_checkpoint(const Checkpoint& ck, const std::string& origin)
{
    if (ck.kind != "toylm") throw PreconditionError(origin + " is not a toylm checkpoint");
    Model m;
    m.cfg_ = ModelConfig::from_json(ck.meta.at("config"));
    m.layout_ = ParamLayout::build(m.cfg_);
    m.params_.assign(m.layout_.total, 0.0f);
    for (const auto& e : m.layout_.entries) {
        const auto& t = ck.get(e.name);
        if (t.shape != std::vector<std::int64_t>{e.rows, e.cols}) throw ShapeError("checkpoint tensor " + e.name);
        std::copy(t.data.begin(), t.data.end(), m.params_.begin() + static_cast<std::ptrdiff_t>(e.offset));
    }
    return m;
}

void Model::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }

Model Model::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path), path.string()); }

} // namespace featlab
