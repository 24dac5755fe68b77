#include "featlab/experiments.hpp"

#include <cmath>
#include <algorithm>
#include <numeric>
#include <map>
#include <set>

#include "featlab/errors.hpp"
#include "featlab/rng.hpp"

namespace featlab {

json CorpusConfig::to_json() const
{
    return {{"seed", seed},
            {"facts_per_relation", facts_per_relation},
            {"privacy_seed", privacy_seed},
            {"privacy_facts_per_relation", privacy_facts_per_relation}};
}

CorpusConfig CorpusConfig::from_json(const json& j)
{
    CorpusConfig c;
    c.seed = j.value("seed", c.seed);
    c.facts_per_relation = j.value("facts_per_relation", c.facts_per_relation);
    c.privacy_seed = j.value("privacy_seed", c.privacy_seed);
    c.privacy_facts_per_relation = j.value("privacy_facts_per_relation", c.privacy_facts_per_relation);
    return c;
}

Tokenizer build_tokenizer(const std::vector<const FactSet*>& sets)
{
    std::vector<std::string> text;
    for (const auto* s : sets) {
        for (const auto& e : entries(*s)) {
            text.push_back(e.sentence);
            text.push_back(e.answer);
        }
    }
    return Tokenizer::build(text);
}

FactSet privacy_subset(const FactSet& all, int per_relation)
{
    if (per_relation < 1) throw ConfigError("privacy_facts_per_relation must be >= 1");
    std::map<std::string, int> taken;
    FactSet out;
    for (const auto& f : all) {
        if (taken[f.relation] < per_relation) {
            ++taken[f.relation];
            out.push_back(f);
        }
    }
    return out;
}

Corpus make_corpus(const CorpusConfig& cfg)
{
    Corpus c;
    c.facts = gen_fact_dataset(default_relations(), cfg.facts_per_relation, cfg.seed);
    c.privacy = privacy_subset(gen_privacy_dataset(cfg.privacy_seed), cfg.privacy_facts_per_relation);
    c.tokenizer = build_tokenizer({&c.facts, &c.privacy});
    return c;
}

int paraphrase_index(const TokenizedPrompt& p)
{
    const auto pos = p.id.rfind('#');
    if (pos == std::string::npos) throw PreconditionError("prompt id without paraphrase index: " + p.id);
    return std::stoi(p.id.substr(pos + 1));
}

std::vector<TokenizedPrompt> filter_paraphrases(const std::vector<TokenizedPrompt>& prompts, const std::vector<int>& paraphrases)
{
    const std::set<int> keep(paraphrases.begin(), paraphrases.end());
    std::vector<TokenizedPrompt> out;
    for (const auto& p : prompts) {
        if (keep.count(paraphrase_index(p))) out.push_back(p);
    }
    return out;
}

void split_rows(const Matrix& all, double holdout, std::uint64_t seed, Matrix& train, Matrix& held)
{
    if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
    std::vector<int> idx(all.rows());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    const int n_out = std::max(1, static_cast<int>(std::lround(holdout * all.rows())));
    if (n_out >= all.rows() - 1) throw PreconditionError("holdout leaves too few training rows");
    train = Matrix();
    held = Matrix();
    for (int i = 0; i < all.rows(); ++i) (i < n_out ? held : train).append_row(all.row(idx[i]));
}

std::vector<SaeModel> train_layer_saes_holdout(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                               CaptureSite site, const std::vector<int>& layers,
                                               const SaeTrainConfig& cfg, double holdout, std::uint64_t split_seed,
                                               std::vector<HeldOutQuality>* quality, std::vector<SaeTrainReport>* reports)
{
    if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
    const auto recs = capture_activations(model, prompts, site, layers, true);
    std::vector<SaeModel> out;
    if (reports) reports->clear();
    if (quality) quality->clear();
    for (int l : layers) {
        Matrix train, held;
        split_rows(stack_records(recs, l), holdout, split_seed, train, held);
        SaeTrainConfig c = cfg;
        c.seed = cfg.seed + static_cast<std::uint64_t>(l);
        SaeTrainReport rep;
        out.push_back(train_sae(train, c, site, l, &rep));
        if (reports) reports->push_back(rep);
        if (quality) quality->push_back({l, train.rows(), held.rows(), evaluate_sae(out.back(), held)});
    }
    return out;
}

std::string prompt_text(const Tokenizer& tok, const TokenizedPrompt& p)
{
    std::string s;
    for (int t : p.prompt) {
        if (!s.empty()) s += ' ';
        s += tok.word(t);
    }
    return s;
}

std::vector<int> all_layers(const Model& model)
{
    std::vector<int> l(model.config().n_layers);
    std::iota(l.begin(), l.end(), 0);
    return l;
}

std::vector<std::vector<std::vector<float>>> final_activations(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                                               CaptureSite site, const std::vector<int>& layers)
{
    const auto recs = capture_activations(model, prompts, site, layers, false);
    std::vector<std::vector<std::vector<float>>> out(prompts.size(), std::vector<std::vector<float>>(layers.size()));
    // Records come grouped per prompt, layers in request order.
    std::size_t k = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        for (std::size_t l = 0; l < layers.size(); ++l) out[i][l] = recs[k++].vector;
    }
    return out;
}

std::vector<SaeModel> train_layer_saes(const Model& model, const std::vector<TokenizedPrompt>& prompts, CaptureSite site,
                                       const std::vector<int>& layers, const SaeTrainConfig& cfg,
                                       std::vector<SaeTrainReport>* reports)
{
    const auto recs = capture_activations(model, prompts, site, layers, true);
    std::vector<SaeModel> out;
    if (reports) reports->clear();
    for (int l : layers) {
        SaeTrainConfig c = cfg;
        c.seed = cfg.seed + static_cast<std::uint64_t>(l);
        SaeTrainReport rep;
        out.push_back(train_sae(stack_records(recs, l), c, site, l, &rep));
        if (reports) reports->push_back(rep);
    }
    return out;
}

namespace {

LayerActivations encode_all(const std::vector<const Codec*>& codecs, const std::vector<int>& layers,
                            const std::vector<std::vector<float>>& acts)
{
    LayerActivations out;
    for (std::size_t k = 0; k < codecs.size(); ++k) out.push_back({layers[k], codecs[k]->encode(acts[k])});
    return out;
}

template <typename T>
std::vector<const Codec*> as_codecs(const std::vector<const T*>& v)
{
    return std::vector<const Codec*>(v.begin(), v.end());
}

template <typename T>
std::vector<int> layers_of(const std::vector<const T*>& v)
{
    std::vector<int> l;
    for (const auto* x : v) l.push_back(x->layer);
    return l;
}

template <typename T>
AblationTarget feature_target(const std::vector<const T*>& v)
{
    AblationTarget t;
    t.kind = UnitKind::Feature;
    if (v.empty()) throw PreconditionError("no codecs supplied");
    t.site = v.front()->site;
    for (const auto* x : v) {
        if (x->site != t.site) throw PreconditionError("codecs must share one capture site");
        t.codecs[x->layer] = x;
    }
    return t;
}

json arm_json(const ArmResult& a)
{
    return {{"mean_delta", a.mean}, {"delta", a.delta}, {"counts", a.counts}};
}

json stat_json(const StatResult& s)
{
    return {{"t", s.overflow ? json(s.t > 0 ? "inf" : "-inf") : json(s.t)}, {"p", s.p}, {"cohens_d", s.overflow ? json(nullptr) : json(s.cohens_d)},
            {"n", s.n}, {"overflow", s.overflow}};
}

json units_json(const SelectedUnits& u)
{
    json ids = json::array();
    for (const auto& id : u.ids) ids.push_back({id.layer, id.index});
    return {{"kind", to_string(u.kind)}, {"tau", u.tau}, {"reference_max", u.reference_max}, {"count", u.ids.size()}, {"ids", ids}};
}

} // namespace

json AblationComparison::to_json() const
{
    return {{"prompts", ids},       {"skipped", skipped},
            {"sae", arm_json(sae)}, {"random_directions", arm_json(rd)},
            {"neurons", arm_json(neuron)}, {"sae_vs_random", stat_json(sae_vs_rd)},
            {"sae_vs_neurons", stat_json(sae_vs_neuron)}};
}

AblationComparison compare_ablation(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                    const std::vector<const SaeModel*>& saes, const std::vector<const Decomposer*>& rds,
                                    double tau1)
{
    const auto layers = layers_of(saes);
    if (layers != layers_of(rds)) throw PreconditionError("SAE and random-direction stacks must cover the same layers");
    const auto sae_t = feature_target(saes);
    const auto rd_t = feature_target(rds);
    if (sae_t.site != rd_t.site) throw PreconditionError("SAE and random directions must share a site");
    AblationTarget neuron_t;
    neuron_t.kind = UnitKind::Neuron;
    neuron_t.site = CaptureSite::MlpActivation;

    const auto mlp_layers = all_layers(model);
    const auto site_acts = final_activations(model, prompts, sae_t.site, layers);
    const auto mlp_acts = final_activations(model, prompts, CaptureSite::MlpActivation, mlp_layers);
    const auto sae_c = as_codecs(saes);
    const auto rd_c = as_codecs(rds);

    const std::size_t P = prompts.size();
    struct Row {
        bool used = false;
        double sae = 0, rd = 0, neuron = 0;
        int n_sae = 0, n_rd = 0, n_neuron = 0;
    };
    std::vector<Row> rows(P);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < P; ++i) {
        const auto& p = prompts[i];
        const auto sae_sel = select_by_fraction_of_max(encode_all(sae_c, layers, site_acts[i]), tau1, UnitKind::Feature, false);
        if (sae_sel.ids.empty()) continue;
        std::vector<UnitId> rd_units;
        const auto rd_codes = encode_all(rd_c, layers, site_acts[i]);
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto want = std::count_if(sae_sel.ids.begin(), sae_sel.ids.end(), [&](const UnitId& u) { return u.layer == layers[k]; });
            auto ranked = rank_units({rd_codes[k]}, true);
            for (long j = 0; j < want && j < static_cast<long>(ranked.size()); ++j) rd_units.push_back(ranked[j]);
        }
        LayerActivations mlp;
        for (std::size_t k = 0; k < mlp_layers.size(); ++k) mlp.push_back({mlp_layers[k], mlp_acts[i][k]});
        const auto neurons = select_by_fraction_of_max(mlp, tau1, UnitKind::Neuron, false);

        const double before = answer_prob(model, p.prompt, p.answer);
        const int pos = static_cast<int>(p.prompt.size()) - 1;
        auto after = [&](const AblationTarget& t, const std::vector<UnitId>& u) {
            return delta_prob_from(before, answer_prob(model, p.prompt, p.answer, ablation_interventions(t, u, pos))).delta_clamped;
        };
        Row& r = rows[i];
        r.used = true;
        r.sae = after(sae_t, sae_sel.ids);
        r.rd = after(rd_t, rd_units);
        r.neuron = after(neuron_t, neurons.ids);
        r.n_sae = static_cast<int>(sae_sel.ids.size());
        r.n_rd = static_cast<int>(rd_units.size());
        r.n_neuron = static_cast<int>(neurons.ids.size());
    }
    AblationComparison c;
    for (std::size_t i = 0; i < P; ++i) {
        const auto& r = rows[i];
        if (!r.used) {
            ++c.skipped;
            continue;
        }
        c.ids.push_back(prompts[i].id);
        c.sae.delta.push_back(r.sae);
        c.rd.delta.push_back(r.rd);
        c.neuron.delta.push_back(r.neuron);
        c.sae.counts.push_back(r.n_sae);
        c.rd.counts.push_back(r.n_rd);
        c.neuron.counts.push_back(r.n_neuron);
    }
    if (c.ids.size() < 2) throw PreconditionError("compare_ablation: fewer than two usable prompts");
    c.sae.mean = mean_of(c.sae.delta);
    c.rd.mean = mean_of(c.rd.delta);
    c.neuron.mean = mean_of(c.neuron.delta);
    c.sae_vs_rd = paired_t(c.sae.delta, c.rd.delta);
    c.sae_vs_neuron = paired_t(c.sae.delta, c.neuron.delta);
    return c;
}

json AblationCurves::to_json() const
{
    auto curve = [](const std::vector<CurvePoint>& c) {
        json a = json::array();
        for (const auto& p : c) a.push_back({{"k", p.k}, {"mean", p.mean}, {"stderr", p.stderr_}});
        return a;
    };
    return {{"sae", curve(sae)}, {"random_directions", curve(rd)}, {"neurons", curve(neuron)}};
}

AblationCurves progressive_curves(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                  const std::vector<const SaeModel*>& saes, const std::vector<const Decomposer*>& rds,
                                  int max_k, const BootstrapConfig& boot)
{
    const auto layers = layers_of(saes);
    if (layers != layers_of(rds)) throw PreconditionError("SAE and random-direction stacks must cover the same layers");
    const auto sae_t = feature_target(saes);
    const auto rd_t = feature_target(rds);
    AblationTarget neuron_t;
    neuron_t.kind = UnitKind::Neuron;
    const auto mlp_layers = all_layers(model);
    const auto site_acts = final_activations(model, prompts, sae_t.site, layers);
    const auto mlp_acts = final_activations(model, prompts, CaptureSite::MlpActivation, mlp_layers);
    const auto sae_c = as_codecs(saes);
    const auto rd_c = as_codecs(rds);

    std::vector<RankedPrompt> rs, rr, rn;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        rs.push_back({&prompts[i], rank_units(encode_all(sae_c, layers, site_acts[i]), false)});
        rr.push_back({&prompts[i], rank_units(encode_all(rd_c, layers, site_acts[i]), true)});
        LayerActivations mlp;
        for (std::size_t k = 0; k < mlp_layers.size(); ++k) mlp.push_back({mlp_layers[k], mlp_acts[i][k]});
        rn.push_back({&prompts[i], rank_units(mlp, false)});
    }
    AblationCurves c;
    c.sae = progressive_ablation(model, rs, sae_t, max_k, boot);
    c.rd = progressive_ablation(model, rr, rd_t, max_k, boot);
    c.neuron = progressive_ablation(model, rn, neuron_t, max_k, boot);
    return c;
}

double reconstruction_delta(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                            const std::vector<const SaeModel*>& saes)
{
    if (prompts.empty()) throw PreconditionError("reconstruction_delta: no prompts");
    const auto t = feature_target(saes);
    std::vector<double> d(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < prompts.size(); ++i) d[i] = delta_prob(model, prompts[i].prompt, prompts[i].answer, t, {}).delta_clamped;
    return mean_of(d);
}

// ---------------------------------------------------------------------------

json InterpComparison::to_json() const
{
    auto arm = [](const InterpArm& a) {
        return json{{"units", a.unit_ids},
                    {"scores", a.scores},
                    {"available", a.available},
                    {"unavailable", a.unavailable},
                    {"mean", a.mean}};
    };
    return {{"features", arm(features)}, {"neurons", arm(neurons)}};
}

InterpComparison compare_interpretability(const Model& model, const Tokenizer& tok,
                                          const std::vector<TokenizedPrompt>& prompts,
                                          const std::vector<const SaeModel*>& saes, Interpreter& interp,
                                          const InterpCompareConfig& cfg)
{
    if (cfg.units < 1) throw ConfigError("interp units must be >= 1");
    if (prompts.size() < 20) throw PreconditionError("interpretability needs at least 20 prompts");
    const auto layers = layers_of(saes);
    const auto mlp_layers = all_layers(model);
    const auto site_acts = final_activations(model, prompts, saes.front()->site, layers);
    const auto mlp_acts = final_activations(model, prompts, CaptureSite::MlpActivation, mlp_layers);
    const auto codecs = as_codecs(saes);

    std::vector<LayerActivations> feat(prompts.size()), neur(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        feat[i] = encode_all(codecs, layers, site_acts[i]);
        for (std::size_t k = 0; k < mlp_layers.size(); ++k) neur[i].push_back({mlp_layers[k], mlp_acts[i][k]});
    }
    std::vector<std::string> texts;
    for (const auto& p : prompts) texts.push_back(prompt_text(tok, p));

    // Most frequently selected units first; ties by id.
    auto frequent = [&](const std::vector<LayerActivations>& acts, UnitKind kind) {
        std::map<UnitId, int> count;
        for (const auto& a : acts) {
            for (const auto& u : select_by_fraction_of_max(a, cfg.tau1, kind, false).ids) ++count[u];
        }
        std::vector<std::pair<int, UnitId>> order;
        for (const auto& [u, c] : count) order.push_back({-c, u});
        std::sort(order.begin(), order.end());
        std::vector<UnitId> out;
        for (std::size_t i = 0; i < order.size() && static_cast<int>(i) < cfg.units; ++i) out.push_back(order[i].second);
        return out;
    };
    auto value = [](const LayerActivations& a, UnitId u) {
        for (const auto& [l, v] : a) {
            if (l == u.layer) return static_cast<double>(v[u.index]);
        }
        throw PreconditionError("unit layer not present");
    };
    auto score_arm = [&](const std::vector<LayerActivations>& acts, UnitKind kind, const char* prefix) {
        InterpArm arm;
        for (const auto& u : frequent(acts, kind)) {
            std::vector<UnitSample> samples;
            for (std::size_t i = 0; i < acts.size(); ++i) samples.push_back({texts[i], value(acts[i], u)});
            const std::string id = std::string(prefix) + std::to_string(u.layer) + ":" + std::to_string(u.index);
            const auto r = interpret_score(interp, id, samples, cfg.seed);
            arm.unit_ids.push_back(id);
            arm.scores.push_back(r.available ? r.score : 0.0);
            arm.available.push_back(r.available);
            if (!r.available) ++arm.unavailable;
        }
        std::vector<double> scored;
        for (std::size_t i = 0; i < arm.scores.size(); ++i) {
            if (arm.available[i]) scored.push_back(arm.scores[i]);
        }
        arm.mean = scored.empty() ? 0.0 : mean_of(scored);
        return arm;
    };
    InterpComparison c;
    c.features = score_arm(feat, UnitKind::Feature, "F");
    c.neurons = score_arm(neur, UnitKind::Neuron, "N");
    return c;
}

// ---------------------------------------------------------------------------

double spearman(const std::vector<double>& a, const std::vector<double>& b)
{
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto c = pearson(ranks(a), ranks(b));
    if (!c) throw NumericError("spearman: constant series");
    return *c;
}

json MonoResult::to_json() const
{
    json mixes = json::array();
    for (const auto& m : mixtures) {
        mixes.push_back({{"proportion", m.proportion},
                         {"relation_count", m.relation_count},
                         {"mean", m.mean},
                         {"kde_bandwidth", m.kde.bandwidth}});
    }
    return {{"frozen_units", units_json(frozen)}, {"mixtures", mixes}, {"rank_correlation", rank_correlation}};
}

MonoResult run_monosemanticity(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                               const std::vector<const SaeModel*>& saes, const MonoConfig& cfg)
{
    const std::set<std::string> rel(cfg.relations.begin(), cfg.relations.end());
    std::vector<TokenizedPrompt> select_set, rel_pool, other_pool;
    const std::set<int> sel_p(cfg.selection_paraphrases.begin(), cfg.selection_paraphrases.end());
    const std::set<int> pool_p(cfg.pool_paraphrases.begin(), cfg.pool_paraphrases.end());
    for (const auto& p : prompts) {
        const int k = paraphrase_index(p);
        const bool is_rel = rel.count(p.relation) != 0;
        if (is_rel && sel_p.count(k)) select_set.push_back(p);
        if (pool_p.count(k)) (is_rel ? rel_pool : other_pool).push_back(p);
    }
    if (select_set.empty()) throw PreconditionError("monosemanticity: no selection prompts for the relation set");

    MonoResult r;
    r.frozen.kind = UnitKind::Feature;
    r.frozen.tau = cfg.tau1;
    for (const auto& ids : per_prompt_features(model, select_set, saes, cfg.tau1)) {
        SelectedUnits s;
        s.ids = ids;
        r.frozen.merge(s);
    }
    if (r.frozen.ids.empty()) throw PreconditionError("monosemanticity: no relation features selected");

    const auto layers = layers_of(saes);
    const auto codecs = as_codecs(saes);
    const auto frozen = r.frozen;
    auto activation = [&](const TokenizedPrompt& p) {
        const auto acts = final_activations(model, {p}, saes.front()->site, layers);
        const auto codes = encode_all(codecs, layers, acts[0]);
        double s = 0.0;
        for (std::size_t k = 0; k < layers.size(); ++k) {
            for (int idx : frozen.indices_in_layer(layers[k])) s += codes[k].second[idx];
        }
        return s / static_cast<double>(frozen.ids.size());
    };
    r.mixtures = monosemanticity_experiment(rel_pool, other_pool, activation, cfg.mix);
    std::vector<double> props, means;
    for (const auto& m : r.mixtures) {
        props.push_back(m.proportion);
        means.push_back(m.mean);
    }
    r.rank_correlation = spearman(props, means);
    return r;
}

// ---------------------------------------------------------------------------

ErasureInputs erasure_inputs(const Corpus& corpus, const ParaphraseSplit& split_cfg)
{
    const auto sp = split(corpus.privacy, split_cfg, 0);
    ErasureInputs in;
    in.privacy_train = tokenize(corpus.tokenizer, sp.train);
    in.privacy_rephrase = tokenize(corpus.tokenizer, sp.eval);
    in.unrelated = tokenize(corpus.tokenizer, corpus.facts);
    for (const auto& p : in.unrelated) {
        auto s = p.prompt;
        s.insert(s.end(), p.answer.begin(), p.answer.end());
        in.ppl_corpus.push_back(std::move(s));
    }
    return in;
}

Model finetune_for_erasure(const Model& base, const ErasureInputs& in, const std::vector<TokenizedPrompt>& fact_prompts,
                           const TrainConfig& cfg, TrainReport* report)
{
    Model tuned = base;
    auto data = in.privacy_train;
    data.insert(data.end(), fact_prompts.begin(), fact_prompts.end());
    const auto rep = train_lm(tuned, data, cfg);
    if (report) *report = rep;
    return tuned;
}

std::vector<std::vector<UnitId>> per_prompt_features(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                                     const std::vector<const SaeModel*>& saes, double tau1)
{
    if (saes.empty()) throw PreconditionError("no SAEs supplied");
    const auto layers = layers_of(saes);
    const auto acts = final_activations(model, prompts, saes.front()->site, layers);
    const auto codecs = as_codecs(saes);
    std::vector<std::vector<UnitId>> out(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        out[i] = select_by_fraction_of_max(encode_all(codecs, layers, acts[i]), tau1, UnitKind::Feature, false).ids;
    }
    return out;
}

SelectedUnits select_privacy_features(const Model& model, const std::vector<TokenizedPrompt>& prompts,
                                      const std::vector<const SaeModel*>& saes, double tau1)
{
    SelectedUnits all;
    all.kind = UnitKind::Feature;
    all.tau = tau1;
    for (const auto& ids : per_prompt_features(model, prompts, saes, tau1)) {
        SelectedUnits s;
        s.ids = ids;
        all.merge(s);
    }
    return all;
}

SelectedUnits select_privacy_neurons(const Model& model, const std::vector<TokenizedPrompt>& prompts, const IgConfig& ig)
{
    const auto layers = all_layers(model);
    std::vector<SelectedUnits> per(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto map = ig_attribution(model, prompts[i].prompt, prompts[i].answer, layers, ig);
        map.prompt_id = prompts[i].id;
        per[i] = select_neurons(map, ig.tau);
    }
    SelectedUnits all;
    all.kind = UnitKind::Neuron;
    all.tau = ig.tau;
    for (const auto& s : per) all.merge(s);
    return all;
}

json ErasureComparison::to_json() const
{
    return {{"feature_edit", {{"units", units_json(features)}, {"columns_zeroed", feature_plan.size()}, {"metrics", feature.to_json()}}},
            {"neuron_baseline", {{"units", units_json(neurons)}, {"columns_zeroed", neuron_plan.size()}, {"metrics", neuron.to_json()}}}};
}

ErasureComparison compare_erasure(const Model& tuned, const ErasureInputs& in, const std::vector<const SaeModel*>& saes,
                                  const ErasureConfig& cfg)
{
    ErasureComparison c;
    c.features = select_privacy_features(tuned, in.privacy_train, saes, cfg.tau1);
    c.feature_plan = feature_edit_plan(saes, c.features, cfg.tau2);
    c.neurons = select_privacy_neurons(tuned, in.privacy_train, cfg.ig);
    c.neuron_plan = neuron_edit_plan(c.neurons);
    const Model by_feature = apply_edit(tuned, c.feature_plan);
    const Model by_neuron = apply_edit(tuned, c.neuron_plan);
    c.feature = erasure_metrics(tuned, by_feature, in.privacy_train, in.privacy_rephrase, in.unrelated, in.ppl_corpus);
    c.neuron = erasure_metrics(tuned, by_neuron, in.privacy_train, in.privacy_rephrase, in.unrelated, in.ppl_corpus);
    return c;
}

} // namespace featlab
