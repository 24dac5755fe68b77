// End-to-end acceptance run on the seed-fixed toy stack. Prints one
// PASS/FAIL line per check and exits non-zero if any check fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "featlab/errors.hpp"
#include "featlab/experiments.hpp"
#include "featlab/interp.hpp"
#include "featlab/rng.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

using namespace featlab;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail, double seconds)
{
    std::printf("%s %2d  %-40s %s  (%.0fs)\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(), seconds);
    std::fflush(stdout);
    failures += !ok;
}

// Runs one check; an exception is a failure with its message as detail.
void check(int id, const std::string& name, const std::function<bool(std::ostringstream&)>& body)
{
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream detail;
    detail.precision(4);
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail << "exception: " << e.what();
    }
    report(id, name, ok, detail.str(), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

template <typename T>
std::vector<const T*> pointers(const std::vector<T>& v)
{
    std::vector<const T*> out;
    for (const auto& x : v) out.push_back(&x);
    return out;
}

SaeTrainConfig sae_config()
{
    SaeTrainConfig s;
    s.batch_size = 64;
    s.lr = 3e-4;
    s.init_active_fraction = 0.15;
    s.epochs = 300;
    s.patience = 20;
    return s;
}

constexpr double kHoldout = 0.1;
constexpr std::uint64_t kSplitSeed = 3;
constexpr double kTau1 = 0.3;

// Serves chat completions by running the mock interpreter on the parsed
// request, so the remote client can be exercised offline.
class MockService {
public:
    MockService()
    {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = json::parse(req.body);
            const std::string system = body["messages"][0]["content"];
            const std::string user = body["messages"][1]["content"];
            std::string reply;
            if (system.rfind("You explain", 0) == 0) {
                static const std::regex line(R"(Sample \d+ \(activation ([^)]*)\): (.*))");
                std::vector<InterpRecord> top;
                std::istringstream in(user);
                std::string l;
                while (std::getline(in, l)) {
                    std::smatch m;
                    if (std::regex_match(l, m, line)) top.push_back({m[2].str(), std::stod(m[1].str())});
                }
                reply = mock_.explain("remote", top).text;
                if (reply.empty()) reply = "nothing shared";
            } else {
                const auto a = user.find("Unit description: "), b = user.find("\nText: ");
                const Explanation e{user.substr(a + 18, b - a - 18), "remote", {}};
                reply = std::to_string(mock_.predict(e, {user.substr(b + 7)})[0]);
            }
            const json out = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", reply}}}}})}};
            res.set_content(out.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockService() { stop(); }
    void stop()
    {
        if (!thread_.joinable()) return;
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

private:
    MockInterpreter mock_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

class Oracle final : public Interpreter {
public:
    Oracle(std::map<std::string, double> truth, bool flip) : truth_(std::move(truth)), flip_(flip) {}
    Explanation explain(const std::string& id, const std::vector<InterpRecord>& top) override { return {"oracle", id, top}; }
    std::vector<double> predict(const Explanation&, const std::vector<std::string>& s) override
    {
        std::vector<double> out;
        for (const auto& x : s) out.push_back(flip_ ? 1.0 - truth_.at(x) : truth_.at(x));
        return out;
    }

private:
    std::map<std::string, double> truth_;
    bool flip_;
};

} // namespace

int main()
{
    std::printf("featlab acceptance\n");

    // Shared toy stack.
    const Corpus corpus = make_corpus(CorpusConfig{});
    const auto prompts = tokenize(corpus.tokenizer, corpus.facts);
    const auto first = filter_paraphrases(prompts, {0});
    ModelConfig mc;
    mc.vocab_size = corpus.tokenizer.size();
    mc.seed = 7;
    TrainConfig tc;
    Model model(mc);
    std::vector<SaeModel> saes;
    std::vector<Decomposer> rds;

    check(1, "toy LM memorization", [&](auto& d) {
        TrainReport rep = train_lm(model, prompts, tc);
        Model again(mc);
        train_lm(again, prompts, tc);
        const bool same = again == model;
        d << corpus.facts.size() << " facts, accuracy " << rep.final_accuracy << ", reruns " << (same ? "identical" : "differ");
        return corpus.facts.size() == 200 && rep.final_accuracy >= 0.95 && same;
    });

    check(2, "SAE quality on held-out rows", [&](auto& d) {
        std::vector<HeldOutQuality> q;
        saes = train_layer_saes_holdout(model, prompts, CaptureSite::MlpActivation, all_layers(model), sae_config(),
                                        kHoldout, kSplitSeed, &q);
        bool ok = true;
        double worst = 0.0, worst_l0 = 0.0;
        for (std::size_t k = 0; k < q.size(); ++k) {
            const double l0_frac = q[k].quality.mean_l0 / saes[k].feature_dim();
            worst = std::max(worst, q[k].quality.relative_l2);
            worst_l0 = std::max(worst_l0, l0_frac);
            ok = ok && q[k].quality.relative_l2 < 0.1 && l0_frac < 0.05;
        }
        const double empty = reconstruction_delta(model, first, pointers(saes));
        d << "max relL2 " << worst << ", max L0/d_f " << worst_l0 << ", empty-set dProb " << empty;
        return ok && empty < 0.05;
    });

    check(3, "JumpReLU grid", [&](auto& d) {
        Rng rng(1);
        long bad = 0, n = 0;
        for (int t = 0; t < 200; ++t) {
            const float theta = static_cast<float>(rng.uniform(0.0, 2.0));
            for (int i = -400; i <= 400; ++i) {
                const float z = static_cast<float>(i) * 0.01f;
                for (float v : {z, theta, std::nextafter(theta, 10.0f), std::nextafter(theta, -10.0f)}) {
                    bad += jump_relu(v, theta) != (v > theta ? v : 0.0f);
                    ++n;
                }
            }
        }
        d << n << " points, " << bad << " mismatches";
        return bad == 0;
    });

    check(4, "integrated gradients oracles", [&](auto& d) {
        auto grad = [](std::function<double(double)> g) {
            return [g](const std::vector<std::vector<double>>& pts) {
                std::vector<std::vector<double>> out;
                for (const auto& p : pts) out.push_back({g(p[0])});
                return out;
            };
        };
        const std::vector<double> w0 = {0.5}, w1 = {3.5};
        double worst_lin = 0.0;
        for (int n : {1, 2, 5, 20, 300, 1000}) {
            const auto a = integrated_gradients(w0, w1, n, grad([](double) { return 1.7; }));
            worst_lin = std::max(worst_lin, std::fabs(a[0] - 3.0 * 1.7));
        }
        const auto q = integrated_gradients(w0, w1, 300, grad([](double w) { return 2.0 * w; }));
        const double exact = 3.5 * 3.5 - 0.5 * 0.5;
        const double rel = std::fabs(q[0] - exact) / exact;
        IgConfig ig;
        const auto& p = first.front();
        const auto zero = ig_attribution(model, baseline_prompt(p.prompt), p.answer, all_layers(model), ig, false);
        double zmax = 0.0;
        for (float v : zero.values.storage()) zmax = std::max(zmax, static_cast<double>(std::fabs(v)));
        d << "linear err " << worst_lin << ", quadratic rel err " << rel << ", baseline-prompt max " << zmax;
        return worst_lin < 1e-12 && rel < 0.01 && zmax == 0.0;
    });

    check(5, "decomposition oracles", [&](auto& d) {
        Rng rng(2);
        Eigen::MatrixXd x(300, 6);
        for (int i = 0; i < x.rows(); ++i)
            for (int j = 0; j < x.cols(); ++j) x(i, j) = rng.normal();
        const auto pca = fit_pca(x, 1.0);
        double rt = 0.0;
        for (int i = 0; i < x.rows(); ++i) {
            const Eigen::VectorXd h = x.row(i).transpose();
            rt = std::max(rt, (pca.reconstruct(pca.project(h)) - h).norm());
        }
        Eigen::VectorXd dir(6);
        dir << 1, -2, 0.5, 3, 0, 1;
        dir.normalize();
        Eigen::MatrixXd line(200, 6);
        for (int i = 0; i < line.rows(); ++i) line.row(i) = rng.normal(0.0, 2.0) * dir.transpose();
        const double cos = std::fabs(fit_pca(line).inverse.col(0).normalized().dot(dir));

        Eigen::MatrixXd s(4000, 2);
        for (int i = 0; i < s.rows(); ++i) s.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1);
        Eigen::Matrix2d a;
        a << 1.0, 0.6, -0.4, 1.2;
        const Eigen::MatrixXd mixed = s * a.transpose();
        const auto ica = fit_ica(mixed, 2, 5);
        Eigen::MatrixXd y(s.rows(), 2);
        for (int i = 0; i < s.rows(); ++i) y.row(i) = ica.project(mixed.row(i).transpose()).transpose();
        auto corr = [](const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
            const Eigen::VectorXd p = u.array() - u.mean(), q = v.array() - v.mean();
            return std::fabs(p.dot(q) / (p.norm() * q.norm()));
        };
        const double sep = std::max(std::min(corr(y.col(0), s.col(0)), corr(y.col(1), s.col(1))),
                                    std::min(corr(y.col(0), s.col(1)), corr(y.col(1), s.col(0))));
        double gram = 0.0;
        for (int l : all_layers(model)) {
            auto rd = fit_random(mc.d_mlp, 4 * mc.d_mlp, 23 + static_cast<std::uint64_t>(l));
            rd.site = CaptureSite::MlpActivation;
            rd.layer = l;
            const Eigen::MatrixXd g = rd.inverse.transpose() * rd.inverse;
            gram = std::max(gram, (g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff());
            rds.push_back(std::move(rd));
        }
        d << "PCA round trip " << rt << ", rank-1 cosine " << cos << ", ICA |corr| " << sep << ", RD gram err " << gram;
        return rt < 1e-6 && cos > 0.999 && sep >= 0.95 && gram < 1e-10;
    });

    check(6, "feature vs direction vs neuron ablation", [&](auto& d) {
        const auto cmp = compare_ablation(model, first, pointers(saes), pointers(rds), kTau1);
        const auto n = cmp.sae.delta.size();
        d << n << " facts; SAE " << cmp.sae.mean << ", RD " << cmp.rd.mean << " (p " << cmp.sae_vs_rd.p << "), neurons "
          << cmp.neuron.mean << " (p " << cmp.sae_vs_neuron.p << ")";
        return n >= 100 && cmp.sae.mean > cmp.rd.mean && cmp.sae.mean > cmp.neuron.mean && cmp.sae_vs_rd.p < 0.05 &&
               cmp.sae_vs_neuron.p < 0.05;
    });

    check(7, "monosemanticity mixtures", [&](auto& d) {
        MonoConfig cfg;
        cfg.tau1 = kTau1;
        cfg.mix.total = 200;
        const auto res = run_monosemanticity(model, prompts, pointers(saes), cfg);
        bool increasing = true;
        for (std::size_t i = 1; i < res.mixtures.size(); ++i) increasing = increasing && res.mixtures[i].mean > res.mixtures[i - 1].mean;
        d << "means";
        for (const auto& m : res.mixtures) d << " " << m.mean;
        d << ", rank corr " << res.rank_correlation;

        std::vector<TokenizedPrompt> rel(300), other(300);
        for (auto& p : rel) p.relation = "R";
        MixtureConfig mix;
        mix.total = 200;
        const auto fx = monosemanticity_experiment(rel, other, [](const TokenizedPrompt& p) { return p.relation == "R" ? 1.0 : 0.0; }, mix);
        bool exact = true;
        for (const auto& m : fx) exact = exact && m.mean == m.proportion / 100.0;
        d << ", fixture " << (exact ? "exact" : "off");
        return increasing && res.rank_correlation == 1.0 && exact;
    });

    check(8, "overlap ratio windows", [&](auto&) {
        using V = std::vector<std::vector<UnitId>>;
        const V base = {{{0, 3}, {1, 10}}, {{2, 0}}, {{0, 1}}};
        const V probe = {{{0, 12}, {0, 15}, {0, 16}, {1, 43}}, {{2, 3}, {2, 4}}, {}};
        const auto r = overlap_ratio(base, probe, 4);
        const bool ok4 = r.ratios == std::vector<double>{0.75, 0.5} && r.skipped == 1 && r.mean == 0.625;
        const auto self = overlap_ratio(base, base, 1);
        return ok4 && self.mean == 1.0;
    });

    check(9, "paired t statistics", [&](auto& d) {
        const std::vector<double> a = {1, 2, 3, 4}, b = {0, 1, 1, 3};
        const auto r = paired_t(a, b);
        std::vector<double> as = a, bs = b;
        for (auto& v : as) v += 11.5;
        for (auto& v : bs) v += 11.5;
        const auto s = paired_t(as, bs), anti = paired_t(b, a);
        d << "t " << r.t << ", d " << r.cohens_d;
        return std::fabs(r.t - 5.0) < 1e-9 && std::fabs(r.cohens_d - 2.5) < 1e-9 && std::fabs(s.t - r.t) < 1e-9 &&
               std::fabs(s.cohens_d - r.cohens_d) < 1e-9 && std::fabs(anti.t + r.t) < 1e-9 &&
               std::fabs(anti.cohens_d + r.cohens_d) < 1e-9;
    });

    check(10, "interpretability scoring pipeline", [&](auto& d) {
        std::vector<UnitSample> samples;
        std::map<std::string, double> truth;
        for (int i = 0; i < 40; ++i) {
            samples.push_back({"s" + std::to_string(i), 0.2 + 0.05 * ((i * 7) % 40)});
        }
        double mx = 0.0;
        for (const auto& s : samples) mx = std::max(mx, s.activation);
        for (const auto& s : samples) truth[s.text] = s.activation / mx;
        Oracle perfect(truth, false), anti(truth, true);
        const auto p = interpret_score(perfect, "u", samples, 1), n = interpret_score(anti, "u", samples, 1);
        const bool oracles = p.available && n.available && std::fabs(p.score - 1.0) < 1e-9 && std::fabs(n.score + 1.0) < 1e-9;

        InterpCompareConfig cc;
        MockInterpreter mock;
        const auto full = compare_interpretability(model, corpus.tokenizer, prompts, pointers(saes), mock, cc);

        const auto dir = fs::temp_directory_path() / "featlab_acceptance";
        fs::remove_all(dir);
        fs::create_directories(dir);
        InterpreterConfig ic;
        ic.cache_path = dir / "replay.json";
        ic.backoff_ms = 1;
        cc.units = 4;
        InterpComparison live, replayed;
        int sent = 0;
        {
            MockService svc;
            ic.endpoint = svc.endpoint();
            RemoteInterpreter remote(ic);
            live = compare_interpretability(model, corpus.tokenizer, first, pointers(saes), remote, cc);
            sent = remote.requests_sent();
        }
        ic.replay_only = true;
        RemoteInterpreter replay(ic);
        replayed = compare_interpretability(model, corpus.tokenizer, first, pointers(saes), replay, cc);
        const bool same = live.features.scores == replayed.features.scores && live.neurons.scores == replayed.neurons.scores;
        d << "oracles " << p.score << "/" << n.score << ", mock IS features " << full.features.mean << " neurons "
          << full.neurons.mean << ", remote " << sent << " requests, replay " << replay.requests_sent() << " requests "
          << (same ? "identical" : "differ");
        return oracles && full.features.unit_ids.size() > 0 && sent > 0 && replay.requests_sent() == 0 && same;
    });

    check(11, "knowledge erasure", [&](auto& d) {
        ErasureConfig ec;
        ec.tau1 = kTau1;
        ec.finetune = tc;
        ec.finetune.mode = TrainMode::Finetune;
        const auto in = erasure_inputs(corpus, ec.split);
        const Model tuned = finetune_for_erasure(model, in, prompts, ec.finetune);
        auto sae_inputs = prompts;
        sae_inputs.insert(sae_inputs.end(), in.privacy_train.begin(), in.privacy_train.end());
        const auto tuned_saes = train_layer_saes_holdout(tuned, sae_inputs, CaptureSite::MlpActivation, all_layers(tuned),
                                                         sae_config(), kHoldout, kSplitSeed, nullptr);
        const auto c = compare_erasure(tuned, in, pointers(tuned_saes), ec);
        d << "feature |P| " << c.feature_plan.size() << " Rel " << c.feature.rel.value() << " Gen " << c.feature.gen.value()
          << " Loc " << c.feature.loc.value() << " dPPL " << c.feature.delta_ppl << "; neuron |P| " << c.neuron_plan.size()
          << " Rel " << c.neuron.rel.value() << " Gen " << c.neuron.gen.value() << " Loc " << c.neuron.loc.value()
          << " dPPL " << c.neuron.delta_ppl;
        return c.feature.rel.value() >= c.neuron.rel.value() && c.feature.loc.value() >= c.neuron.loc.value() &&
               c.feature_plan.size() <= c.neuron_plan.size();
    });

    check(12, "privacy dataset contract", [&](auto& d) {
        const auto a = gen_privacy_dataset(7);
        std::map<std::string, int> per;
        long valid = 0;
        for (const auto& f : a) {
            ++per[f.relation];
            valid += valid_privacy_answer(f.relation, f.answer);
        }
        bool balanced = per.size() == 3;
        for (const auto& [r, n] : per) balanced = balanced && n == 500;
        const auto n_entries = entries(a).size();
        const bool same = to_jsonl(gen_privacy_dataset(7)) == to_jsonl(a);
        d << a.size() << " facts, " << n_entries << " entries, " << valid << " valid, regeneration "
          << (same ? "identical" : "differs");
        return a.size() == 1500 && balanced && n_entries == 9000 && valid == 1500 && same;
    });

    std::printf("%d of 12 checks failed\n", failures);
    return failures == 0 ? 0 : 1;
}
