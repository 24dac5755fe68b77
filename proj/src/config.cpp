#include "featlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "featlab/errors.hpp"
#include "featlab/io.hpp"

namespace featlab {

namespace {

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want)
{
    throw ConfigError("config key '" + key + "': expected " + want + ", got '" + value + "'");
}

} // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& origin)
{
    KeyValueConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        const auto body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + body + "'");
        const auto key = trim(std::string_view(body).substr(0, eq));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        c.values_[key] = trim(std::string_view(body).substr(eq + 1));
    }
    return c;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse(read_file(path), path.string());
}

void KeyValueConfig::assign(std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override must look like key=value: '" + std::string(assignment) + "'");
    const auto key = trim(assignment.substr(0, eq));
    if (key.empty()) throw ConfigError("override with empty key: '" + std::string(assignment) + "'");
    values_[key] = trim(assignment.substr(eq + 1));
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

void KeyValueConfig::merge(const KeyValueConfig& other)
{
    for (const auto& [k, v] : other.values_) values_[k] = v;
}

const std::string& KeyValueConfig::get(const std::string& key) const
{
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
}

double KeyValueConfig::get_double(const std::string& key) const
{
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) bad_value(key, v, "a number");
        return d;
    } catch (const std::logic_error&) {
        bad_value(key, v, "a number");
    }
}

long KeyValueConfig::get_int(const std::string& key) const
{
    const auto& v = get(key);
    long x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
    return x;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key) const
{
    const auto& v = get(key);
    std::uint64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
    return x;
}

bool KeyValueConfig::get_bool(const std::string& key) const
{
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const
{
    std::vector<std::string> out;
    std::istringstream in(get(key));
    std::string item;
    while (std::getline(in, item, ',')) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key) const
{
    std::vector<int> out;
    for (const auto& s : get_list(key)) {
        int x = 0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
        if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, get(key), "a comma-separated integer list");
        out.push_back(x);
    }
    return out;
}

std::string KeyValueConfig::canonical() const
{
    std::string s;
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
}

std::string KeyValueConfig::hash() const { return sha256_hex(canonical()); }

const std::vector<ConfigKey>& config_schema()
{
    static const std::vector<ConfigKey> keys = {
        {"experiment.id", "featlab", "label used by `report` to group runs"},

        {"seed.data", "7", "fact corpus generation"},
        {"seed.privacy", "7", "privacy corpus generation"},
        {"seed.lm", "7", "model initialisation"},
        {"seed.train", "7", "LM batch order"},
        {"seed.sae", "11", "SAE init and batch order (plus the layer index)"},
        {"seed.decomp", "23", "ICA init and random directions (plus the layer index)"},
        {"seed.split", "3", "SAE held-out row split"},
        {"seed.bootstrap", "5", "bootstrap resampling"},
        {"seed.mix", "13", "monosemanticity mixture draws"},
        {"seed.interp", "17", "interpretability held-back samples"},

        {"data.facts_per_relation", "20", "facts per built-in relation"},
        {"data.privacy_facts_per_relation", "20", "privacy facts per relation used downstream (of 500)"},

        {"lm.d_model", "64", ""},
        {"lm.n_layers", "4", ""},
        {"lm.n_heads", "4", ""},
        {"lm.d_mlp", "256", ""},
        {"lm.max_seq_len", "32", ""},
        {"lm.lr", "3e-3", "AdamW learning rate (finetune uses a tenth)"},
        {"lm.batch_size", "32", ""},
        {"lm.epochs", "40", ""},
        {"lm.weight_decay", "0", ""},
        {"lm.grad_clip", "1", "global gradient norm clip, 0 disables"},
        {"lm.mode", "pretrain", "pretrain | finetune (finetune reads input.lm)"},

        {"capture.site", "mlp", "post_attn | mlp | post_mlp"},
        {"capture.layers", "all", "all or a comma-separated layer list"},
        {"capture.positions", "all", "all | final"},
        {"capture.prompts", "facts", "facts | facts+privacy (privacy: erasure train templates)"},

        {"sae.lambda", "0.003", "L0 penalty weight"},
        {"sae.lr", "1e-3", ""},
        {"sae.batch_size", "256", ""},
        {"sae.epochs", "100", ""},
        {"sae.patience", "10", "early-stopping patience in epochs"},
        {"sae.n", "4", "dictionary width multiplier"},
        {"sae.ste_bandwidth", "0.001", "threshold pseudo-gradient bandwidth (standardized units)"},
        {"sae.theta_init", "0.001", ""},
        {"sae.init_active_fraction", "0.2", "0 keeps every threshold at theta_init"},
        {"sae.val_fraction", "0.1", "validation split for early stopping"},
        {"sae.tied", "false", ""},
        {"sae.holdout", "0", "fraction of rows kept out and scored after training"},

        {"decomp.kind", "rd", "pca | ica | rd"},
        {"decomp.d_f", "0", "0: sae.n times the input width, capped at the rank"},
        {"decomp.var_threshold", "0.95", "PCA explained-variance target"},
        {"decomp.ica_max_iter", "500", ""},
        {"decomp.ica_tol", "1e-6", ""},

        {"ablate.tau1", "0.3", "feature / neuron selection threshold (fraction of max)"},
        {"ablate.paraphrases", "0", "prompt templates evaluated"},
        {"ablate.max_k", "10", "progressive ablation depth"},
        {"ablate.bootstrap_iterations", "5", ""},
        {"ablate.bootstrap_instances", "300", ""},

        {"ig.steps", "20", "Riemann steps"},
        {"ig.tau", "0.3", "knowledge-neuron threshold (fraction of max)"},
        {"ig.finite_difference", "false", ""},

        {"attribute.paraphrases", "0", ""},
        {"attribute.limit", "0", "0: every prompt"},

        {"edit.method", "feature", "feature | neuron"},
        {"edit.tau1", "0.3", ""},
        {"edit.tau2", "0.1", "reconstruction threshold"},
        {"edit.train_templates", "0,1,2", "privacy templates used for fine-tuning and selection"},
        {"edit.eval_templates", "3,4,5", "held-out rephrasings"},

        {"mono.tau1", "0.3", ""},
        {"mono.total", "500", "inputs per mixture"},
        {"mono.proportions", "0,20,40,60,80,100", "percent drawn from the relation pool"},
        {"mono.selection_paraphrases", "0", ""},
        {"mono.pool_paraphrases", "1,2", ""},

        {"stability.n", "1,2,4,8", "width multipliers; 1 is the base"},
        {"stability.tau1", "0.3", ""},
        {"stability.paraphrases", "0", ""},

        {"interp.kind", "mock", "mock | remote"},
        {"interp.units", "20", "units scored per arm"},
        {"interp.tau1", "0.3", ""},
        {"interp.endpoint", "https://api.openai.com/v1/chat/completions", ""},
        {"interp.model", "gpt-4o-mini", ""},
        {"interp.api_key_env", "OPENAI_API_KEY", "name of the environment variable holding the key"},
        {"interp.timeout_s", "30", ""},
        {"interp.max_retries", "3", ""},
        {"interp.backoff_ms", "250", ""},
        {"interp.max_concurrency", "4", ""},
        {"interp.cache", "", "replay cache file; empty disables"},
        {"interp.replay_only", "false", "fail instead of calling the service on a cache miss"},

        {"input.data", "gen-data", "run directories read by later steps; relative to --runs"},
        {"input.lm", "train-lm", ""},
        {"input.activations", "capture", ""},
        {"input.sae", "train-sae", ""},
        {"input.baseline", "fit-baseline", ""},
    };
    return keys;
}

KeyValueConfig default_config()
{
    KeyValueConfig c;
    for (const auto& k : config_schema()) c.set(k.key, k.default_value);
    return c;
}

KeyValueConfig with_defaults(const KeyValueConfig& cfg)
{
    auto out = default_config();
    for (const auto& [k, v] : cfg.entries()) {
        if (!out.has(k)) throw ConfigError("unknown config key '" + k + "'");
        out.set(k, v);
    }
    return out;
}

std::string schema_text()
{
    std::string s;
    std::string section;
    for (const auto& k : config_schema()) {
        const std::string key = k.key;
        const auto sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!section.empty()) s += "\n";
            section = sec;
        }
        if (*k.help) s += "# " + std::string(k.help) + "\n";
        s += key + " = " + k.default_value + "\n";
    }
    return s;
}

} // namespace featlab
