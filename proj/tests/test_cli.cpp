#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "featlab/cli.hpp"
#include "featlab/io.hpp"

using namespace featlab;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args)
{
    args.insert(args.begin(), "featlab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"(# small enough for a unit test
data.facts_per_relation = 3
data.privacy_facts_per_relation = 2
lm.d_model = 16
lm.n_layers = 2
lm.n_heads = 2
lm.d_mlp = 32
lm.epochs = 2
sae.epochs = 2
sae.batch_size = 32
stability.n = 1,2
)";

fs::path root()
{
    static const fs::path r = [] {
        const auto d = fs::temp_directory_path() / "featlab_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        write_file_atomic(d / "tiny.conf", kTinyConfig);
        return d;
    }();
    return r;
}

std::vector<std::string> common(std::vector<std::string> extra = {})
{
    std::vector<std::string> a = {"-c", (root() / "tiny.conf").string(), "--runs", (root() / "runs").string()};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
}

Result step(const std::string& cmd, std::vector<std::string> extra = {})
{
    auto a = common(std::move(extra));
    a.insert(a.begin(), cmd);
    return run(a);
}

// gen-data, train-lm and capture once for the whole suite.
void upstream()
{
    static const bool done = [] {
        for (const char* cmd : {"gen-data", "train-lm", "capture"}) {
            const auto r = step(cmd, {"--overwrite"});
            REQUIRE_MESSAGE(r.code == kExitOk, r.err);
        }
        return true;
    }();
    (void)done;
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with the config code")
{
    CHECK(run({}).code == kExitConfig);
    CHECK(run({"no-such-command"}).code == kExitConfig);
    CHECK(run({"train-lm", "--bogus-flag"}).code == kExitConfig);
    CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("config errors")
{
    auto r = run({"config", "--set", "lm.nonsense=3"});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("lm.nonsense") != std::string::npos);

    r = run({"config", "--set", "no_equals_sign"});
    CHECK(r.code == kExitConfig);

    const auto bad = root() / "bad.conf";
    write_file_atomic(bad, "lm.epochs = 3\nthis line is broken\n");
    r = run({"config", "-c", bad.string()});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find(":2:") != std::string::npos);

    r = step("train-sae", {"--set", "sae.lr=fast", "--name", "bad-lr"});
    CHECK(r.code == kExitConfig);
    CHECK_FALSE(fs::exists(root() / "runs" / "bad-lr"));
}

TEST_CASE("config prints the resolved canonical form")
{
    const auto r = run({"config", "--set", "sae.lr=5e-4"});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("sae.lr = 5e-4\n") != std::string::npos);
    CHECK(r.out.find("lm.epochs = 40\n") != std::string::npos);
    const auto s = run({"config", "--schema"});
    CHECK(s.out.find("# L0 penalty weight\nsae.lambda = 0.003\n") != std::string::npos);
}

TEST_CASE("a missing upstream run is named")
{
    const auto r = step("train-sae", {"--set", "input.activations=nowhere", "--name", "orphan"});
    CHECK(r.code == kExitPrecondition);
    CHECK(r.err.find("nowhere") != std::string::npos);
    CHECK_FALSE(fs::exists(root() / "runs" / "orphan"));
}

TEST_CASE("steps write complete run directories")
{
    upstream();
    const auto r = step("train-sae", {"--overwrite"});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto dir = root() / "runs" / "train-sae";
    for (const char* f : {"config.txt", "manifest.json", "report.json", "report.csv", "sae_L0.ckpt", "sae_L1.ckpt"})
        CHECK_MESSAGE(fs::exists(dir / f), f);
    const auto m = json::parse(read_file(dir / "manifest.json"));
    CHECK(m["format_version"] == 1);
    CHECK(m["inputs"]["activations"] == "capture");
    CHECK(m["artifacts"]["sae_L0.ckpt"] == sha256_hex(read_file(dir / "sae_L0.ckpt")));
    CHECK(r.out.find("max_relative_l2") != std::string::npos);

    const auto again = step("train-sae");
    CHECK(again.code == kExitPrecondition);
    CHECK(again.err.find("--overwrite") != std::string::npos);
}

TEST_CASE("reruns are byte-identical")
{
    upstream();
    REQUIRE(step("train-sae", {"--name", "rerun-a", "--overwrite"}).code == kExitOk);
    REQUIRE(step("train-sae", {"--name", "rerun-b", "--overwrite"}).code == kExitOk);
    for (const char* f : {"config.txt", "manifest.json", "report.json", "report.csv", "sae_L0.ckpt", "sae_L1.ckpt"}) {
        CHECK_MESSAGE(read_file(root() / "runs" / "rerun-a" / f) == read_file(root() / "runs" / "rerun-b" / f), f);
    }
}

TEST_CASE("stability reports overlap per width")
{
    upstream();
    const auto r = step("stability", {"--n", "2", "--overwrite"});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto rep = json::parse(read_file(root() / "runs" / "stability" / "report.json"));
    CHECK(rep["summary"].contains("overlap_n1"));
    CHECK(rep["summary"].contains("overlap_n2"));
    CHECK(rep["summary"]["overlap_n1"] == 1.0);
    CHECK(fs::exists(root() / "runs" / "stability" / "sae_n2_L1.ckpt"));
}

TEST_CASE("report aggregates and refuses foreign format versions")
{
    upstream();
    const auto agg = root() / "agg";
    fs::remove_all(agg);
    auto r = run({"gen-data", "-c", (root() / "tiny.conf").string(), "--runs", agg.string()});
    REQUIRE(r.code == kExitOk);
    r = run({"report", "--runs", agg.string()});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto csv = read_file(agg / "summary.csv");
    CHECK(csv.rfind("experiment_id,run,subcommand,config_hash,metric,value\n", 0) == 0);
    CHECK(csv.find(",gen-data,") != std::string::npos);

    auto rep = json::parse(read_file(agg / "gen-data" / "report.json"));
    rep["format_version"] = 2;
    write_file_atomic(agg / "gen-data" / "report.json", rep.dump());
    r = run({"report", "--runs", agg.string()});
    CHECK(r.code == kExitPrecondition);
    CHECK(r.err.find("format version 2") != std::string::npos);
}

}
