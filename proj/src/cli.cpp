#include "featlab/cli.hpp"

#include <algorithm>
#include <functional>
#include <iostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "featlab/config.hpp"
#include "featlab/errors.hpp"
#include "featlab/experiments.hpp"
#include "featlab/interp.hpp"
#include "featlab/rundir.hpp"

namespace featlab {

namespace fs = std::filesystem;

namespace {

struct Ctx {
    KeyValueConfig cfg;
    fs::path runs;
    fs::path dir;
    bool overwrite = false;
    std::ostream* out = nullptr;

    fs::path input(const std::string& key) const
    {
        const fs::path p = cfg.get("input." + key);
        return p.is_absolute() ? p : runs / p;
    }
};

// ---------------------------------------------------------------------------
// Config -> library structs

TrainConfig train_config(const KeyValueConfig& c)
{
    TrainConfig t;
    t.lr = c.get_double("lm.lr");
    t.batch_size = static_cast<int>(c.get_int("lm.batch_size"));
    t.epochs = static_cast<int>(c.get_int("lm.epochs"));
    t.weight_decay = c.get_double("lm.weight_decay");
    t.grad_clip = c.get_double("lm.grad_clip");
    t.seed = c.get_u64("seed.train");
    const auto& mode = c.get("lm.mode");
    if (mode == "pretrain") t.mode = TrainMode::Pretrain;
    else if (mode == "finetune") t.mode = TrainMode::Finetune;
    else throw ConfigError("lm.mode must be pretrain or finetune, got '" + mode + "'");
    t.validate();
    return t;
}

SaeTrainConfig sae_config(const KeyValueConfig& c)
{
    SaeTrainConfig s;
    s.lambda = c.get_double("sae.lambda");
    s.lr = c.get_double("sae.lr");
    s.batch_size = static_cast<int>(c.get_int("sae.batch_size"));
    s.epochs = static_cast<int>(c.get_int("sae.epochs"));
    s.patience = static_cast<int>(c.get_int("sae.patience"));
    s.n_multiplier = static_cast<int>(c.get_int("sae.n"));
    s.ste_bandwidth = c.get_double("sae.ste_bandwidth");
    s.theta_init = c.get_double("sae.theta_init");
    s.init_active_fraction = c.get_double("sae.init_active_fraction");
    s.val_fraction = c.get_double("sae.val_fraction");
    s.tied = c.get_bool("sae.tied");
    s.seed = c.get_u64("seed.sae");
    s.validate();
    return s;
}

IgConfig ig_config(const KeyValueConfig& c)
{
    IgConfig g;
    g.steps = static_cast<int>(c.get_int("ig.steps"));
    g.tau = c.get_double("ig.tau");
    g.finite_difference = c.get_bool("ig.finite_difference");
    g.validate();
    return g;
}

ParaphraseSplit split_config(const KeyValueConfig& c)
{
    return {c.get_int_list("edit.train_templates"), c.get_int_list("edit.eval_templates")};
}

InterpreterConfig interp_config(const KeyValueConfig& c)
{
    InterpreterConfig i;
    i.endpoint = c.get("interp.endpoint");
    i.model = c.get("interp.model");
    i.api_key_env = c.get("interp.api_key_env");
    i.timeout_s = c.get_double("interp.timeout_s");
    i.max_retries = static_cast<int>(c.get_int("interp.max_retries"));
    i.backoff_ms = static_cast<int>(c.get_int("interp.backoff_ms"));
    i.max_concurrency = static_cast<int>(c.get_int("interp.max_concurrency"));
    i.cache_path = c.get("interp.cache");
    i.replay_only = c.get_bool("interp.replay_only");
    i.validate();
    return i;
}

double unit_fraction(const KeyValueConfig& c, const std::string& key)
{
    const double v = c.get_double(key);
    if (!(v > 0.0 && v < 1.0)) throw ConfigError(key + " must lie in (0, 1)");
    return v;
}

// ---------------------------------------------------------------------------
// Upstream artifacts

struct Data {
    FactSet facts, privacy;
    Tokenizer tok;
    std::vector<TokenizedPrompt> prompts;

    Corpus corpus() const { return {facts, privacy, tok}; }
};

Data load_data(const fs::path& run)
{
    Data d;
    d.facts = load_jsonl(require_artifact(run, "facts.jsonl"));
    d.privacy = load_jsonl(require_artifact(run, "privacy_subset.jsonl"));
    d.tok = Tokenizer::from_json(json::parse(read_file(require_artifact(run, "tokenizer.json"))));
    d.prompts = tokenize(d.tok, d.facts);
    return d;
}

Model load_model(const fs::path& run) { return Model::load(require_artifact(run, "model.ckpt")); }

// (layer, file) for every `<prefix>_L<layer>.ckpt` artifact of a run.
std::vector<std::pair<int, fs::path>> layer_artifacts(const fs::path& run, const std::string& prefix)
{
    const auto m = read_manifest(run);
    const std::regex re(prefix + "_L([0-9]+)\\.ckpt");
    std::vector<std::pair<int, fs::path>> out;
    for (const auto& [name, hash] : m.at("artifacts").items()) {
        std::smatch sm;
        if (std::regex_match(name, sm, re)) out.push_back({std::stoi(sm[1]), require_artifact(run, name)});
    }
    if (out.empty()) throw PreconditionError("no " + prefix + " checkpoints in " + run.string());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<SaeModel> load_saes(const fs::path& run, const std::string& prefix = "sae")
{
    std::vector<SaeModel> v;
    for (const auto& [l, p] : layer_artifacts(run, prefix)) v.push_back(SaeModel::load(p));
    return v;
}

std::vector<Decomposer> load_baselines(const fs::path& run)
{
    std::vector<Decomposer> v;
    for (const auto& [l, p] : layer_artifacts(run, "baseline")) v.push_back(Decomposer::load(p));
    return v;
}

struct Activations {
    CaptureSite site = CaptureSite::MlpActivation;
    std::vector<int> layers;
    std::vector<Matrix> values;
};

Activations load_activations(const fs::path& run)
{
    Activations a;
    for (const auto& [l, p] : layer_artifacts(run, "activations")) {
        const auto ck = load_checkpoint(p);
        if (ck.kind != "activations") throw PreconditionError(p.string() + " is not an activation dump");
        const auto& t = ck.get("values");
        if (t.shape.size() != 2) throw ShapeError(p.string() + ": activation tensor must be 2-D");
        Matrix m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
        std::copy(t.data.begin(), t.data.end(), m.data());
        a.site = parse_site(ck.meta.at("site").get<std::string>());
        a.layers.push_back(l);
        a.values.push_back(std::move(m));
    }
    return a;
}

template <typename T>
std::vector<const T*> pointers(const std::vector<T>& v)
{
    std::vector<const T*> out;
    for (const auto& x : v) out.push_back(&x);
    return out;
}

std::vector<int> parse_layers(const KeyValueConfig& c, const Model& m)
{
    if (c.get("capture.layers") == "all") return all_layers(m);
    auto l = c.get_int_list("capture.layers");
    for (int x : l) {
        if (x < 0 || x >= m.config().n_layers) throw ConfigError("capture.layers: no layer " + std::to_string(x));
    }
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    return l;
}

std::string num(double v)
{
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
}

void finish(RunDir& r, const Ctx& ctx, const json& summary, const json& details, const std::string& csv)
{
    r.write_report(summary, details, csv);
    r.finish();
    *ctx.out << r.path().string() << "\n";
    for (auto it = summary.begin(); it != summary.end(); ++it) *ctx.out << "  " << it.key() << " = " << it.value().dump() << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const int per_rel = static_cast<int>(c.get_int("data.facts_per_relation"));
    const int priv_per_rel = static_cast<int>(c.get_int("data.privacy_facts_per_relation"));
    if (per_rel < 1) throw ConfigError("data.facts_per_relation must be >= 1");
    const auto facts = gen_fact_dataset(default_relations(), per_rel, c.get_u64("seed.data"));
    const auto privacy = gen_privacy_dataset(c.get_u64("seed.privacy"));
    const auto subset = privacy_subset(privacy, priv_per_rel);
    const auto tok = build_tokenizer({&facts, &subset});

    long valid = 0;
    for (const auto& f : privacy) valid += valid_privacy_answer(f.relation, f.answer);

    RunDir r = RunDir::create(ctx.dir, "gen-data", c, ctx.overwrite);
    r.write_artifact("facts.jsonl", to_jsonl(facts));
    r.write_artifact("privacy.jsonl", to_jsonl(privacy));
    r.write_artifact("privacy_subset.jsonl", to_jsonl(subset));
    r.write_artifact("tokenizer.json", tok.to_json().dump() + "\n");

    std::map<std::string, std::pair<int, int>> per;
    for (const auto& f : facts) {
        per[f.relation].first += 1;
        per[f.relation].second += static_cast<int>(f.paraphrases.size());
    }
    std::string csv = "dataset,relation,facts,prompts\n";
    for (const auto& [rel, n] : per) csv += "facts," + rel + "," + std::to_string(n.first) + "," + std::to_string(n.second) + "\n";
    std::map<std::string, int> priv;
    for (const auto& f : privacy) ++priv[f.relation];
    for (const auto& [rel, n] : priv) csv += "privacy," + rel + "," + std::to_string(n) + "," + std::to_string(n * 6) + "\n";

    const json summary = {{"facts", facts.size()},
                          {"fact_prompts", entries(facts).size()},
                          {"privacy_facts", privacy.size()},
                          {"privacy_valid_fraction", static_cast<double>(valid) / static_cast<double>(privacy.size())},
                          {"privacy_subset_facts", subset.size()},
                          {"vocab_size", tok.size()}};
    finish(r, ctx, summary, json::object(), csv);
}

void cmd_train_lm(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto tc = train_config(c);
    const auto data_run = ctx.input("data");
    const Data d = load_data(data_run);

    Model m;
    TrainReport rep;
    json extra = json::object();
    fs::path base_run;
    if (tc.mode == TrainMode::Pretrain) {
        ModelConfig mc;
        mc.d_model = static_cast<int>(c.get_int("lm.d_model"));
        mc.n_layers = static_cast<int>(c.get_int("lm.n_layers"));
        mc.n_heads = static_cast<int>(c.get_int("lm.n_heads"));
        mc.d_mlp = static_cast<int>(c.get_int("lm.d_mlp"));
        mc.max_seq_len = static_cast<int>(c.get_int("lm.max_seq_len"));
        mc.vocab_size = d.tok.size();
        mc.seed = c.get_u64("seed.lm");
        mc.validate();
        m = Model(mc);
        rep = train_lm(m, d.prompts, tc);
    } else {
        base_run = ctx.input("lm");
        const Model base = load_model(base_run);
        if (base.config().vocab_size != d.tok.size()) throw ShapeError("base model vocabulary does not match the dataset");
        const auto in = erasure_inputs(d.corpus(), split_config(c));
        m = finetune_for_erasure(base, in, d.prompts, tc, &rep);
        extra["privacy_train_accuracy"] = answer_accuracy(m, in.privacy_train);
        extra["fact_accuracy"] = answer_accuracy(m, d.prompts);
    }
    if (!m.all_finite()) throw NumericError("training produced non-finite parameters");

    RunDir r = RunDir::create(ctx.dir, "train-lm", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    if (!base_run.empty()) r.add_input("lm", c.get("input.lm"));
    r.write_checkpoint("model.ckpt", m.to_checkpoint());
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) csv += std::to_string(e + 1) + "," + num(rep.epoch_loss[e]) + "\n";
    json summary = {{"final_loss", rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back()},
                    {"accuracy", rep.final_accuracy},
                    {"steps", rep.steps},
                    {"parameters", m.params().size()}};
    summary.update(extra);
    finish(r, ctx, summary, {{"epoch_loss", rep.epoch_loss}, {"model", m.config().to_json()}}, csv);
}

void cmd_capture(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto data_run = ctx.input("data");
    const auto lm_run = ctx.input("lm");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto site = parse_site(c.get("capture.site"));
    const auto layers = parse_layers(c, m);
    const auto& pos = c.get("capture.positions");
    if (pos != "all" && pos != "final") throw ConfigError("capture.positions must be all or final");
    const auto& which = c.get("capture.prompts");
    auto prompts = d.prompts;
    if (which == "facts+privacy") {
        const auto in = erasure_inputs(d.corpus(), split_config(c));
        prompts.insert(prompts.end(), in.privacy_train.begin(), in.privacy_train.end());
    } else if (which != "facts") {
        throw ConfigError("capture.prompts must be facts or facts+privacy");
    }
    const auto recs = capture_activations(m, prompts, site, layers, pos == "all");

    RunDir r = RunDir::create(ctx.dir, "capture", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    std::string csv = "layer,rows,width\n";
    int rows = 0;
    for (int l : layers) {
        const Matrix x = stack_records(recs, l);
        rows = x.rows();
        Checkpoint ck;
        ck.kind = "activations";
        ck.meta = {{"site", to_string(site)}, {"layer", l}, {"positions", pos}, {"prompts", which}, {"inputs", prompts.size()}};
        ck.add("values", {x.rows(), x.cols()}, x.storage());
        r.write_checkpoint("activations_L" + std::to_string(l) + ".ckpt", ck);
        csv += std::to_string(l) + "," + std::to_string(x.rows()) + "," + std::to_string(x.cols()) + "\n";
    }
    const json summary = {{"layers", layers.size()},
                          {"inputs", prompts.size()},
                          {"rows_per_layer", rows},
                          {"width", m.config().site_width(site)}};
    finish(r, ctx, summary, {{"site", to_string(site)}, {"layers", layers}}, csv);
}

void cmd_train_sae(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto sc = sae_config(c);
    const double holdout = c.get_double("sae.holdout");
    if (holdout < 0.0 || holdout >= 1.0) throw ConfigError("sae.holdout must be in [0, 1)");
    const auto act_run = ctx.input("activations");
    const auto acts = load_activations(act_run);

    std::vector<SaeModel> saes;
    json per_layer = json::array();
    std::string csv = "layer,train_rows,rel_l2,fvu,mean_l0,dead_fraction,heldout_rows,heldout_rel_l2,heldout_mean_l0,"
                      "best_epoch,stopped_early\n";
    double max_rel = 0.0, sum_rel = 0.0, sum_l0 = 0.0, max_out = 0.0, sum_out_l0 = 0.0;
    for (std::size_t k = 0; k < acts.layers.size(); ++k) {
        const int l = acts.layers[k];
        const Matrix& all = acts.values[k];
        Matrix train, held;
        if (holdout > 0.0) split_rows(all, holdout, c.get_u64("seed.split"), train, held);
        else train = all;
        SaeTrainConfig lc = sc;
        lc.seed = sc.seed + static_cast<std::uint64_t>(l);
        SaeTrainReport rep;
        saes.push_back(train_sae(train, lc, acts.site, l, &rep));
        const auto q = evaluate_sae(saes.back(), train);
        SaeQuality hq;
        if (held.rows() > 0) hq = evaluate_sae(saes.back(), held);
        max_rel = std::max(max_rel, q.relative_l2);
        sum_rel += q.relative_l2;
        sum_l0 += q.mean_l0;
        max_out = std::max(max_out, hq.relative_l2);
        sum_out_l0 += hq.mean_l0;
        csv += std::to_string(l) + "," + std::to_string(train.rows()) + "," + num(q.relative_l2) + "," + num(q.fvu) + "," +
               num(q.mean_l0) + "," + num(q.dead_fraction) + "," + std::to_string(held.rows()) + "," +
               num(hq.relative_l2) + "," + num(hq.mean_l0) + "," + std::to_string(rep.best_epoch) + "," +
               (rep.stopped_early ? "true" : "false") + "\n";
        per_layer.push_back({{"layer", l},
                             {"train_loss", rep.train_loss},
                             {"val_loss", rep.val_loss},
                             {"best_epoch", rep.best_epoch},
                             {"few_samples", rep.few_samples},
                             {"relative_l2", q.relative_l2},
                             {"heldout_relative_l2", hq.relative_l2}});
    }

    RunDir r = RunDir::create(ctx.dir, "train-sae", c, ctx.overwrite);
    r.add_input("activations", c.get("input.activations"));
    for (const auto& s : saes) r.write_checkpoint("sae_L" + std::to_string(s.layer) + ".ckpt", s.to_checkpoint());
    const double L = static_cast<double>(saes.size());
    json summary = {{"layers", saes.size()},
                    {"d_f", saes.front().feature_dim()},
                    {"mean_relative_l2", sum_rel / L},
                    {"max_relative_l2", max_rel},
                    {"mean_l0", sum_l0 / L}};
    if (holdout > 0.0) {
        summary["heldout_max_relative_l2"] = max_out;
        summary["heldout_mean_l0"] = sum_out_l0 / L;
    }
    finish(r, ctx, summary, {{"config", sc.to_json()}, {"layers", per_layer}}, csv);
}

void cmd_fit_baseline(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto kind = parse_decomp_kind(c.get("decomp.kind"));
    const long d_f_cfg = c.get_int("decomp.d_f");
    if (d_f_cfg < 0) throw ConfigError("decomp.d_f must be >= 0");
    const IcaOptions ica{static_cast<int>(c.get_int("decomp.ica_max_iter")), c.get_double("decomp.ica_tol")};
    const double var = c.get_double("decomp.var_threshold");
    if (!(var > 0.0 && var <= 1.0)) throw ConfigError("decomp.var_threshold must lie in (0, 1]");
    const auto act_run = ctx.input("activations");
    const auto acts = load_activations(act_run);
    const std::uint64_t seed = c.get_u64("seed.decomp");

    std::vector<Decomposer> decs;
    std::string csv = "layer,kind,d_f,requested,warning,iterations,explained_total\n";
    int warnings = 0;
    double sum_df = 0.0;
    for (std::size_t k = 0; k < acts.layers.size(); ++k) {
        const int l = acts.layers[k];
        const int d_in = acts.values[k].cols();
        const int d_f = d_f_cfg > 0 ? static_cast<int>(d_f_cfg) : static_cast<int>(c.get_int("sae.n")) * d_in;
        Decomposer d;
        switch (kind) {
        case DecompKind::PCA: d = fit_pca(to_eigen(acts.values[k]), var); break;
        case DecompKind::ICA: d = fit_ica(to_eigen(acts.values[k]), d_f, seed + static_cast<std::uint64_t>(l), ica); break;
        case DecompKind::RD: d = fit_random(d_in, d_f, seed + static_cast<std::uint64_t>(l)); break;
        }
        d.site = acts.site;
        d.layer = l;
        warnings += d.warning;
        sum_df += d.feature_dim();
        csv += std::to_string(l) + "," + to_string(kind) + "," + std::to_string(d.feature_dim()) + "," +
               std::to_string(d.requested_dim) + "," + (d.warning ? "true" : "false") + "," +
               std::to_string(d.iterations) + "," + num(d.explained.size() ? d.explained.sum() : 0.0) + "\n";
        decs.push_back(std::move(d));
    }

    RunDir r = RunDir::create(ctx.dir, "fit-baseline", c, ctx.overwrite);
    r.add_input("activations", c.get("input.activations"));
    json warn = json::array();
    for (const auto& d : decs) {
        r.write_checkpoint("baseline_L" + std::to_string(d.layer) + ".ckpt", d.to_checkpoint());
        if (d.warning) warn.push_back({{"layer", d.layer}, {"message", d.warning_message}});
    }
    const json summary = {{"layers", decs.size()}, {"mean_components", sum_df / static_cast<double>(decs.size())},
                          {"warnings", warnings}};
    finish(r, ctx, summary, {{"kind", to_string(kind)}, {"warnings", warn}}, csv);
}

void stat_summary(json& s, const std::string& name, const StatResult& st)
{
    s[name + "_overflow"] = st.overflow;
    if (!st.overflow) {
        s[name + "_t"] = st.t;
        s[name + "_cohens_d"] = st.cohens_d;
    }
    s[name + "_p"] = st.p;
}

void cmd_ablate(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const double tau1 = unit_fraction(c, "ablate.tau1");
    const int max_k = static_cast<int>(c.get_int("ablate.max_k"));
    const BootstrapConfig boot{static_cast<int>(c.get_int("ablate.bootstrap_iterations")),
                               static_cast<int>(c.get_int("ablate.bootstrap_instances")), c.get_u64("seed.bootstrap")};
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm"), sae_run = ctx.input("sae"),
               base_run = ctx.input("baseline");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto saes = load_saes(sae_run);
    const auto bases = load_baselines(base_run);
    const auto prompts = filter_paraphrases(d.prompts, c.get_int_list("ablate.paraphrases"));
    if (prompts.empty()) throw PreconditionError("ablate.paraphrases selects no prompts");

    const auto sp = pointers(saes);
    const auto bp = pointers(bases);
    const auto cmp = compare_ablation(m, prompts, sp, bp, tau1);
    const double recon = reconstruction_delta(m, prompts, sp);
    AblationCurves curves;
    if (max_k > 0) curves = progressive_curves(m, prompts, sp, bp, max_k, boot);

    RunDir r = RunDir::create(ctx.dir, "ablate", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    r.add_input("sae", c.get("input.sae"));
    r.add_input("baseline", c.get("input.baseline"));
    std::string csv = "prompt,sae_delta,baseline_delta,neuron_delta,sae_units,baseline_units,neuron_units\n";
    for (std::size_t i = 0; i < cmp.ids.size(); ++i) {
        csv += csv_escape(cmp.ids[i]) + "," + num(cmp.sae.delta[i]) + "," + num(cmp.rd.delta[i]) + "," +
               num(cmp.neuron.delta[i]) + "," + std::to_string(cmp.sae.counts[i]) + "," +
               std::to_string(cmp.rd.counts[i]) + "," + std::to_string(cmp.neuron.counts[i]) + "\n";
    }
    std::string curve_csv = "arm,k,mean,stderr\n";
    auto add_curve = [&](const char* arm, const std::vector<CurvePoint>& cv) {
        for (const auto& p : cv) curve_csv += std::string(arm) + "," + std::to_string(p.k) + "," + num(p.mean) + "," + num(p.stderr_) + "\n";
    };
    add_curve("sae", curves.sae);
    add_curve("baseline", curves.rd);
    add_curve("neuron", curves.neuron);
    r.write_artifact("curves.csv", curve_csv);

    json summary = {{"prompts", cmp.ids.size()},
                    {"skipped", cmp.skipped},
                    {"sae_mean", cmp.sae.mean},
                    {"baseline_mean", cmp.rd.mean},
                    {"neuron_mean", cmp.neuron.mean},
                    {"reconstruction_delta", recon}};
    stat_summary(summary, "sae_vs_baseline", cmp.sae_vs_rd);
    stat_summary(summary, "sae_vs_neuron", cmp.sae_vs_neuron);
    finish(r, ctx, summary, {{"comparison", cmp.to_json()}, {"curves", curves.to_json()}}, csv);
}

void cmd_attribute(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto ig = ig_config(c);
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    auto prompts = filter_paraphrases(d.prompts, c.get_int_list("attribute.paraphrases"));
    const long limit = c.get_int("attribute.limit");
    if (limit < 0) throw ConfigError("attribute.limit must be >= 0");
    if (limit > 0 && static_cast<std::size_t>(limit) < prompts.size()) prompts.resize(static_cast<std::size_t>(limit));
    if (prompts.empty()) throw PreconditionError("attribute selects no prompts");
    const auto layers = all_layers(m);

    std::vector<AttributionMap> maps(prompts.size());
    std::vector<SelectedUnits> sel(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        maps[i] = ig_attribution(m, prompts[i].prompt, prompts[i].answer, layers, ig);
        maps[i].prompt_id = prompts[i].id;
        sel[i] = select_neurons(maps[i], ig.tau);
    }

    RunDir r = RunDir::create(ctx.dir, "attribute", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    std::string lines;
    for (const auto& a : maps) lines += a.to_json().dump() + "\n";
    r.write_artifact("attributions.jsonl", lines);
    std::string csv = "prompt,selected,top_layer,top_neuron,top_value\n";
    SelectedUnits all;
    all.kind = UnitKind::Neuron;
    double sum = 0.0;
    std::size_t mx = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& v = maps[i].values;
        const auto it = std::max_element(v.storage().begin(), v.storage().end());
        const auto flat = static_cast<int>(it - v.storage().begin());
        csv += csv_escape(maps[i].prompt_id) + "," + std::to_string(sel[i].ids.size()) + "," +
               std::to_string(maps[i].layers[flat / v.cols()]) + "," + std::to_string(flat % v.cols()) + "," + num(*it) + "\n";
        sum += static_cast<double>(sel[i].ids.size());
        mx = std::max(mx, sel[i].ids.size());
        all.merge(sel[i]);
    }
    const json summary = {{"prompts", maps.size()},
                          {"mean_selected", sum / static_cast<double>(maps.size())},
                          {"max_selected", mx},
                          {"union_selected", all.ids.size()}};
    finish(r, ctx, summary, {{"steps", ig.steps}, {"tau", ig.tau}}, csv);
}

std::string plan_csv(const EditPlan& plan)
{
    std::string csv = "layer,column,provenance\n";
    for (const auto& p : plan.positions) {
        std::string prov;
        for (int x : p.provenance) prov += (prov.empty() ? "" : ";") + std::to_string(x);
        csv += std::to_string(p.layer) + "," + std::to_string(p.column) + "," + prov + "\n";
    }
    return csv;
}

void cmd_edit(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto& method = c.get("edit.method");
    if (method != "feature" && method != "neuron") throw ConfigError("edit.method must be feature or neuron");
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto in = erasure_inputs(d.corpus(), split_config(c));

    EditPlan plan;
    std::size_t units = 0;
    fs::path sae_run;
    if (method == "feature") {
        sae_run = ctx.input("sae");
        const auto saes = load_saes(sae_run);
        for (const auto& s : saes) {
            if (s.site != CaptureSite::MlpActivation) throw PreconditionError("feature editing needs SAEs on the MLP activation");
        }
        const auto f = select_privacy_features(m, in.privacy_train, pointers(saes), unit_fraction(c, "edit.tau1"));
        plan = feature_edit_plan(pointers(saes), f, c.get_double("edit.tau2"));
        units = f.ids.size();
    } else {
        const auto n = select_privacy_neurons(m, in.privacy_train, ig_config(c));
        plan = neuron_edit_plan(n);
        units = n.ids.size();
    }
    const Model edited = apply_edit(m, plan);

    RunDir r = RunDir::create(ctx.dir, "edit", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    if (!sae_run.empty()) r.add_input("sae", c.get("input.sae"));
    r.write_artifact("edit_plan.json", plan.to_json().dump(1) + "\n");
    r.write_checkpoint("model.ckpt", edited.to_checkpoint());
    const json summary = {{"units", units}, {"columns_zeroed", plan.size()}, {"empty_warning", plan.empty_warning}};
    finish(r, ctx, summary, {{"method", method}}, plan_csv(plan));
}

void cmd_eval_erasure(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    ErasureConfig ec;
    ec.ig = ig_config(c);
    ec.tau1 = unit_fraction(c, "edit.tau1");
    ec.tau2 = c.get_double("edit.tau2");
    ec.split = split_config(c);
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm"), sae_run = ctx.input("sae");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto saes = load_saes(sae_run);
    const auto in = erasure_inputs(d.corpus(), ec.split);
    const auto cmp = compare_erasure(m, in, pointers(saes), ec);

    RunDir r = RunDir::create(ctx.dir, "eval-erasure", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    r.add_input("sae", c.get("input.sae"));
    r.write_artifact("feature_plan.json", cmp.feature_plan.to_json().dump(1) + "\n");
    r.write_artifact("neuron_plan.json", cmp.neuron_plan.to_json().dump(1) + "\n");
    std::string csv = "method,units,columns,rel,gen,loc,ppl_before,ppl_after,delta_ppl\n";
    json summary = json::object();
    auto add = [&](const char* name, const SelectedUnits& u, const EditPlan& p, const ErasureReport& e) {
        csv += std::string(name) + "," + std::to_string(u.ids.size()) + "," + std::to_string(p.size()) + "," +
               num(e.rel.value()) + "," + num(e.gen.value()) + "," + num(e.loc.value()) + "," + num(e.ppl_before) + "," +
               num(e.ppl_after) + "," + num(e.delta_ppl) + "\n";
        const std::string k = name;
        summary[k + "_units"] = u.ids.size();
        summary[k + "_columns"] = p.size();
        summary[k + "_rel"] = e.rel.value();
        summary[k + "_gen"] = e.gen.value();
        summary[k + "_loc"] = e.loc.value();
        summary[k + "_delta_ppl"] = e.delta_ppl;
    };
    add("feature", cmp.features, cmp.feature_plan, cmp.feature);
    add("neuron", cmp.neurons, cmp.neuron_plan, cmp.neuron);
    finish(r, ctx, summary, cmp.to_json(), csv);
}

void cmd_mono(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    MonoConfig mc;
    mc.tau1 = unit_fraction(c, "mono.tau1");
    mc.mix.proportions = c.get_int_list("mono.proportions");
    mc.mix.total = static_cast<int>(c.get_int("mono.total"));
    mc.mix.seed = c.get_u64("seed.mix");
    mc.mix.validate();
    mc.selection_paraphrases = c.get_int_list("mono.selection_paraphrases");
    mc.pool_paraphrases = c.get_int_list("mono.pool_paraphrases");
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm"), sae_run = ctx.input("sae");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto saes = load_saes(sae_run);
    const auto res = run_monosemanticity(m, d.prompts, pointers(saes), mc);

    RunDir r = RunDir::create(ctx.dir, "mono", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    r.add_input("sae", c.get("input.sae"));
    std::string csv = "proportion,relation_count,mean,kde_bandwidth\n";
    std::string kde_csv = "proportion,x,density\n";
    json summary = {{"frozen_units", res.frozen.ids.size()}, {"rank_correlation", res.rank_correlation}};
    for (const auto& mx : res.mixtures) {
        csv += std::to_string(mx.proportion) + "," + std::to_string(mx.relation_count) + "," + num(mx.mean) + "," +
               num(mx.kde.bandwidth) + "\n";
        for (std::size_t i = 0; i < mx.kde.x.size(); ++i)
            kde_csv += std::to_string(mx.proportion) + "," + num(mx.kde.x[i]) + "," + num(mx.kde.density[i]) + "\n";
        summary["mean_at_" + std::to_string(mx.proportion)] = mx.mean;
    }
    r.write_artifact("kde.csv", kde_csv);
    finish(r, ctx, summary, res.to_json(), csv);
}

void cmd_stability(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    auto ns = c.get_int_list("stability.n");
    if (std::find(ns.begin(), ns.end(), 1) == ns.end()) ns.insert(ns.begin(), 1);
    for (int n : ns) {
        if (n < 1) throw ConfigError("stability.n entries must be >= 1");
    }
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    const double tau1 = unit_fraction(c, "stability.tau1");
    const auto base_cfg = sae_config(c);
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm"), act_run = ctx.input("activations");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto acts = load_activations(act_run);
    const auto prompts = filter_paraphrases(d.prompts, c.get_int_list("stability.paraphrases"));
    if (prompts.empty()) throw PreconditionError("stability.paraphrases selects no prompts");

    std::map<int, std::vector<SaeModel>> stacks;
    std::map<int, std::vector<std::vector<UnitId>>> selected;
    for (int n : ns) {
        auto sc = base_cfg;
        sc.n_multiplier = n;
        for (std::size_t k = 0; k < acts.layers.size(); ++k) {
            auto lc = sc;
            lc.seed = sc.seed + static_cast<std::uint64_t>(acts.layers[k]);
            stacks[n].push_back(train_sae(acts.values[k], lc, acts.site, acts.layers[k]));
        }
        selected[n] = per_prompt_features(m, prompts, pointers(stacks[n]), tau1);
    }

    RunDir r = RunDir::create(ctx.dir, "stability", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    r.add_input("activations", c.get("input.activations"));
    std::string csv = "n,mean_overlap,facts,skipped,mean_selected\n";
    json summary = json::object();
    json details = json::object();
    for (int n : ns) {
        for (const auto& s : stacks[n])
            r.write_checkpoint("sae_n" + std::to_string(n) + "_L" + std::to_string(s.layer) + ".ckpt", s.to_checkpoint());
        const auto rep = overlap_ratio(selected[1], selected[n], n);
        double sel = 0.0;
        for (const auto& v : selected[n]) sel += static_cast<double>(v.size());
        sel /= static_cast<double>(selected[n].size());
        csv += std::to_string(n) + "," + num(rep.mean) + "," + std::to_string(rep.ratios.size()) + "," +
               std::to_string(rep.skipped) + "," + num(sel) + "\n";
        summary["overlap_n" + std::to_string(n)] = rep.mean;
        summary["selected_n" + std::to_string(n)] = sel;
        details["n" + std::to_string(n)] = {{"ratios", rep.ratios}, {"skipped", rep.skipped}};
    }
    finish(r, ctx, summary, details, csv);
}

void cmd_interpret(const Ctx& ctx)
{
    const auto& c = ctx.cfg;
    const auto icfg = interp_config(c);
    auto interp = make_interpreter(c.get("interp.kind"), icfg);
    InterpCompareConfig cc;
    cc.tau1 = unit_fraction(c, "interp.tau1");
    cc.units = static_cast<int>(c.get_int("interp.units"));
    cc.seed = c.get_u64("seed.interp");
    const auto data_run = ctx.input("data"), lm_run = ctx.input("lm"), sae_run = ctx.input("sae");
    const Data d = load_data(data_run);
    const Model m = load_model(lm_run);
    const auto saes = load_saes(sae_run);
    const auto res = compare_interpretability(m, d.tok, d.prompts, pointers(saes), *interp, cc);

    RunDir r = RunDir::create(ctx.dir, "interpret", c, ctx.overwrite);
    r.add_input("data", c.get("input.data"));
    r.add_input("lm", c.get("input.lm"));
    r.add_input("sae", c.get("input.sae"));
    std::string csv = "arm,unit,available,score\n";
    auto rows = [&](const char* arm, const InterpArm& a) {
        for (std::size_t i = 0; i < a.unit_ids.size(); ++i)
            csv += std::string(arm) + "," + a.unit_ids[i] + "," + (a.available[i] ? "true" : "false") + "," + num(a.scores[i]) + "\n";
    };
    rows("feature", res.features);
    rows("neuron", res.neurons);
    const json summary = {{"feature_mean_score", res.features.mean},
                          {"neuron_mean_score", res.neurons.mean},
                          {"feature_units", res.features.unit_ids.size()},
                          {"neuron_units", res.neurons.unit_ids.size()},
                          {"feature_unavailable", res.features.unavailable},
                          {"neuron_unavailable", res.neurons.unavailable}};
    finish(r, ctx, summary, res.to_json(), csv);
}

using Command = std::function<void(const Ctx&)>;

const std::map<std::string, std::pair<Command, const char*>>& commands()
{
    static const std::map<std::string, std::pair<Command, const char*>> m = {
        {"gen-data", {cmd_gen_data, "generate the fact and privacy corpora and the tokenizer"}},
        {"train-lm", {cmd_train_lm, "train the toy LM (lm.mode=finetune fine-tunes input.lm on privacy prompts)"}},
        {"capture", {cmd_capture, "dump activations of one site for every layer"}},
        {"train-sae", {cmd_train_sae, "train one JumpReLU SAE per captured layer"}},
        {"fit-baseline", {cmd_fit_baseline, "fit a PCA / ICA / random-direction baseline per captured layer"}},
        {"ablate", {cmd_ablate, "ablation comparison of SAE features, baseline directions and neurons"}},
        {"attribute", {cmd_attribute, "integrated-gradients attribution over MLP neurons"}},
        {"edit", {cmd_edit, "build an erasure edit plan and write the edited model"}},
        {"eval-erasure", {cmd_eval_erasure, "feature edit vs neuron baseline on the fine-tuned model"}},
        {"mono", {cmd_mono, "monosemanticity mixtures over the relation-fact set"}},
        {"stability", {cmd_stability, "feature overlap across dictionary widths"}},
        {"interpret", {cmd_interpret, "explain-and-predict scores for frequent features and neurons"}},
    };
    return m;
}

// Runs one subcommand; a run that fails is not left half-written.
void run_step(const std::string& name, const Ctx& ctx)
{
    const bool existed = fs::exists(ctx.dir);
    try {
        commands().at(name).first(ctx);
    } catch (...) {
        if (!existed && fs::exists(ctx.dir) && !fs::exists(ctx.dir / "manifest.json")) fs::remove_all(ctx.dir);
        throw;
    }
}

struct PipelineStep {
    const char* command;
    const char* name;
    std::vector<std::pair<const char*, const char*>> set;
};

const std::vector<PipelineStep>& pipeline_steps()
{
    static const std::vector<PipelineStep> s = {
        {"gen-data", "gen-data", {}},
        {"train-lm", "train-lm", {}},
        {"capture", "capture", {}},
        {"train-sae", "train-sae", {}},
        {"fit-baseline", "fit-baseline", {}},
        {"ablate", "ablate", {}},
        {"attribute", "attribute", {}},
        {"mono", "mono", {}},
        {"stability", "stability", {}},
        {"interpret", "interpret", {}},
        {"train-lm", "finetune", {{"lm.mode", "finetune"}}},
        {"capture", "capture-finetune", {{"input.lm", "finetune"}, {"capture.prompts", "facts+privacy"}}},
        {"train-sae", "sae-finetune", {{"input.activations", "capture-finetune"}}},
        {"edit", "edit", {{"input.lm", "finetune"}, {"input.sae", "sae-finetune"}}},
        {"eval-erasure", "eval-erasure", {{"input.lm", "finetune"}, {"input.sae", "sae-finetune"}}},
    };
    return s;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"featlab: SAE features vs neurons on a toy transformer"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    std::vector<std::string> config_files, overrides, steps;
    std::string runs = "runs", name, out_file, stab_n;
    bool overwrite = false, schema = false;

    auto common = [&](CLI::App* s) {
        s->add_option("-c,--config", config_files, "key = value config file; later files win")->check(CLI::ExistingFile);
        s->add_option("-s,--set", overrides, "override one key, e.g. --set sae.lr=3e-4");
        s->add_option("--runs", runs, "root directory of run directories")->capture_default_str();
        s->add_option("--name", name, "run directory name below --runs (default: the subcommand)");
        s->add_flag("--overwrite", overwrite, "replace an existing run directory");
    };
    for (const auto& [cmd, entry] : commands()) {
        auto* s = app.add_subcommand(cmd, entry.second);
        common(s);
        if (cmd == "stability") s->add_option("--n", stab_n, "width multipliers, e.g. 1,2,4,8");
    }
    auto* pipe = app.add_subcommand("pipeline", "run every step into <runs>/<name> and aggregate the reports");
    common(pipe);
    pipe->add_option("--steps", steps, "only these pipeline step names (upstream runs must exist)");
    auto* report = app.add_subcommand("report", "aggregate every report below --runs into one CSV");
    report->add_option("--runs", runs, "root directory of run directories")->capture_default_str();
    report->add_option("-o,--out", out_file, "output CSV (default: <runs>/summary.csv)");
    auto* config = app.add_subcommand("config", "print the resolved configuration");
    config->add_option("-c,--config", config_files, "key = value config file")->check(CLI::ExistingFile);
    config->add_option("-s,--set", overrides, "override one key");
    config->add_flag("--schema", schema, "print every key with its default and description");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return kExitOk;
        }
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        auto* sub = app.get_subcommands().front();
        const std::string cmd = sub->get_name();
        KeyValueConfig raw;
        for (const auto& f : config_files) raw.merge(KeyValueConfig::load(f));
        for (const auto& o : overrides) raw.assign(o);
        if (!stab_n.empty()) raw.set("stability.n", stab_n);
        const auto cfg = with_defaults(raw);

        if (cmd == "config") {
            out << (schema ? schema_text() : cfg.canonical());
            return kExitOk;
        }
        if (cmd == "report") {
            const fs::path dest = out_file.empty() ? fs::path(runs) / "summary.csv" : fs::path(out_file);
            write_file_atomic(dest, aggregate_reports(runs));
            out << dest.string() << "\n";
            return kExitOk;
        }
        if (cmd == "pipeline") {
            const fs::path root = fs::path(runs) / (name.empty() ? "pipeline" : name);
            for (const auto& st : pipeline_steps()) {
                if (!steps.empty() && std::find(steps.begin(), steps.end(), st.name) == steps.end()) continue;
                Ctx ctx{cfg, root, root / st.name, overwrite, &out};
                for (const auto& k : config_schema()) {
                    if (std::string(k.key).rfind("input.", 0) == 0) ctx.cfg.set(k.key, k.default_value);
                }
                for (const auto& [k, v] : st.set) ctx.cfg.set(k, v);
                run_step(st.command, ctx);
            }
            const auto dest = root / "summary.csv";
            write_file_atomic(dest, aggregate_reports(root));
            out << dest.string() << "\n";
            return kExitOk;
        }
        Ctx ctx{cfg, runs, fs::path(runs) / (name.empty() ? cmd : name), overwrite, &out};
        run_step(cmd, ctx);
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const PreconditionError& e) {
        err << "precondition failed: " << e.what() << "\n";
        return kExitPrecondition;
    } catch (const ShapeError& e) {
        err << "shape mismatch: " << e.what() << "\n";
        return kExitPrecondition;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

} // namespace featlab
