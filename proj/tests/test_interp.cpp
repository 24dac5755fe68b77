#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <map>
#include <thread>

#include "featlab/errors.hpp"
#include "featlab/eval.hpp"
#include "featlab/interp.hpp"

using namespace featlab;
namespace fs = std::filesystem;

namespace {

// Predicts straight from a lookup table; `flip` predicts the complement.
class OracleInterpreter final : public Interpreter {
public:
    OracleInterpreter(std::map<std::string, double> truth, bool flip) : truth_(std::move(truth)), flip_(flip) {}
    Explanation explain(const std::string& unit_id, const std::vector<InterpRecord>& top) override
    {
        return {"oracle", unit_id, top};
    }
    std::vector<double> predict(const Explanation&, const std::vector<std::string>& samples) override
    {
        std::vector<double> out;
        for (const auto& s : samples) out.push_back(flip_ ? 1.0 - truth_.at(s) : truth_.at(s));
        return out;
    }

private:
    std::map<std::string, double> truth_;
    bool flip_;
};

std::vector<UnitSample> graded_samples(int n)
{
    std::vector<UnitSample> s;
    for (int i = 0; i < n; ++i) s.push_back({"sample " + std::to_string(i), 0.1 + 0.03 * i});
    return s;
}

fs::path temp_dir(const std::string& name)
{
    const auto d = fs::temp_directory_path() / ("featlab_interp_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

struct FakeService {
    httplib::Server server;
    std::thread thread;
    std::atomic<int> hits{0};
    int failures_left = 0;
    int port = 0;

    explicit FakeService(int failures) : failures_left(failures)
    {
        server.Post("/v1/chat/completions", [this](const httplib::Request&, httplib::Response& res) {
            ++hits;
            if (failures_left > 0) {
                --failures_left;
                res.status = 500;
                return;
            }
            res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"0.7"}}]})", "application/json");
        });
        server.Post("/garbage", [this](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.set_content("not json at all", "text/plain");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~FakeService()
    {
        server.stop();
        thread.join();
    }
    std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
};

InterpreterConfig fast_config(const std::string& endpoint)
{
    InterpreterConfig c;
    c.endpoint = endpoint;
    c.backoff_ms = 1;
    c.timeout_s = 5.0;
    c.max_concurrency = 2;
    return c;
}

} // namespace

TEST_SUITE("interp") {

TEST_CASE("mock explanation is the shared words")
{
    MockInterpreter m;
    const auto e = m.explain("L0/F1", {{"the phone number of alice", 1.0}, {"bob has phone number 555", 0.9}, {"Phone number for carol", 0.8}});
    CHECK(e.text == "phone number");
    CHECK(e.unit_id == "L0/F1");
    CHECK_THROWS_AS(m.explain("u", {{"a", 1.0}, {"b", 0.5}}), PreconditionError);
}

TEST_CASE("mock predictions are Jaccard overlaps")
{
    MockInterpreter m;
    Explanation e{"phone number", "u", {}};
    const auto p = m.predict(e, {"phone number", "the phone number", "lives in paris", ""});
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] == doctest::Approx(2.0 / 3.0));
    CHECK(p[2] == 0.0);
    CHECK(p[3] == 0.0);
}

TEST_CASE("parse_score clips and rejects")
{
    CHECK(parse_score("0.42") == doctest::Approx(0.42));
    CHECK(parse_score("Score: 1.7") == 1.0);
    CHECK(parse_score("-3") == 0.0);
    CHECK(parse_score("about .5 I think") == doctest::Approx(0.5));
    CHECK_THROWS_AS(parse_score("no idea"), ProtocolError);
}

TEST_CASE("oracle interpreters bound the score")
{
    const auto samples = graded_samples(30);
    double mx = 0.0;
    for (const auto& s : samples) mx = std::max(mx, s.activation);
    std::map<std::string, double> truth;
    for (const auto& s : samples) truth[s.text] = s.activation / mx;

    OracleInterpreter perfect(truth, false), anti(truth, true);
    const auto good = interpret_score(perfect, "u", samples, 1);
    REQUIRE(good.available);
    CHECK(good.score == doctest::Approx(1.0));
    CHECK(good.predicted.size() == 6);
    const auto bad = interpret_score(anti, "u", samples, 1);
    REQUIRE(bad.available);
    CHECK(bad.score == doctest::Approx(-1.0));

    CHECK_THROWS_AS(interpret_score(perfect, "u", graded_samples(19), 1), PreconditionError);
    std::vector<UnitSample> dead(25, {"x", 0.0});
    CHECK_FALSE(interpret_score(perfect, "u", dead, 1).available);
}

TEST_CASE("mock scores a phone-number unit highly")
{
    const char* names[] = {"alice", "bob", "carol", "dave", "erin", "frank"};
    std::vector<UnitSample> samples;
    for (int i = 0; i < 6; ++i) samples.push_back({std::string("the phone number of ") + names[i] + " is", 0.95 - 0.02 * i});
    for (int i = 0; i < 24; ++i) samples.push_back({"person" + std::to_string(i) + " lives in paris", 0.05 + 0.002 * i});
    MockInterpreter m;
    const auto r = interpret_score(m, "P001", samples, 4);
    REQUIRE(r.available);
    CHECK(r.explanation.text == "the phone number of is");
    CHECK(r.score > 0.8);
}

TEST_CASE("remote client retries, caches and replays")
{
    FakeService svc(2);
    const auto dir = temp_dir("cache");
    auto cfg = fast_config(svc.url("/v1/chat/completions"));
    cfg.cache_path = dir / "cache.json";
    {
        RemoteInterpreter r(cfg);
        CHECK(r.complete("sys", "hello") == "0.7");
        CHECK(r.requests_sent() == 3);
        CHECK(svc.hits == 3);
        CHECK(r.complete("sys", "hello") == "0.7");
        CHECK(r.requests_sent() == 3);
    }
    REQUIRE(fs::exists(cfg.cache_path));

    cfg.replay_only = true;
    RemoteInterpreter replay(cfg);
    CHECK(replay.complete("sys", "hello") == "0.7");
    CHECK(replay.requests_sent() == 0);
    CHECK_THROWS_AS(replay.complete("sys", "something new"), TransportError);
    CHECK(svc.hits == 3);
}

TEST_CASE("remote client gives up after the retry budget")
{
    FakeService svc(100);
    auto cfg = fast_config(svc.url("/v1/chat/completions"));
    cfg.max_retries = 2;
    RemoteInterpreter r(cfg);
    CHECK_THROWS_AS(r.complete("sys", "x"), TransportError);
    CHECK(r.requests_sent() == 3);
}

TEST_CASE("garbage replies are protocol errors")
{
    FakeService svc(0);
    RemoteInterpreter r(fast_config(svc.url("/garbage")));
    CHECK_THROWS_AS(r.complete("sys", "x"), ProtocolError);
}

TEST_CASE("remote predictions go through the service")
{
    FakeService svc(0);
    RemoteInterpreter r(fast_config(svc.url("/v1/chat/completions")));
    const auto p = r.predict({"phones", "u", {}}, {"a", "b", "c"});
    CHECK(p == std::vector<double>{0.7, 0.7, 0.7});
}

TEST_CASE("interpreter configuration")
{
    InterpreterConfig c;
    c.max_concurrency = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(make_interpreter("oracle", InterpreterConfig{}), ConfigError);
    CHECK(dynamic_cast<MockInterpreter*>(make_interpreter("mock", InterpreterConfig{}).get()));
    InterpreterConfig bad;
    bad.endpoint = "ftp://example";
    CHECK_THROWS_AS(RemoteInterpreter{bad}, ConfigError);
}

}
