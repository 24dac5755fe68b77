#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "featlab/interp.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <future>
#include <regex>
#include <semaphore>
#include <set>
#include <sstream>
#include <thread>

#include "featlab/errors.hpp"
#include "featlab/toylm.hpp"

namespace featlab {

namespace {

std::vector<std::string> lower_words(const std::string& text)
{
    std::vector<std::string> out;
    for (auto w : Tokenizer::split_words(text)) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        out.push_back(std::move(w));
    }
    return out;
}

void require_three(const std::vector<InterpRecord>& top)
{
    if (top.size() != 3) throw PreconditionError("explain needs exactly 3 exemplar records, got " + std::to_string(top.size()));
}

} // namespace

Explanation MockInterpreter::explain(const std::string& unit_id, const std::vector<InterpRecord>& top)
{
    require_three(top);
    std::vector<std::string> common;
    std::set<std::string> seen;
    const auto w1 = lower_words(top[1].text), w2 = lower_words(top[2].text);
    const std::set<std::string> s1(w1.begin(), w1.end()), s2(w2.begin(), w2.end());
    for (const auto& w : lower_words(top[0].text)) {
        if (s1.count(w) && s2.count(w) && seen.insert(w).second) common.push_back(w);
    }
    Explanation e;
    e.unit_id = unit_id;
    e.exemplars = top;
    for (std::size_t i = 0; i < common.size(); ++i) e.text += (i ? " " : "") + common[i];
    return e;
}

std::vector<double> MockInterpreter::predict(const Explanation& e, const std::vector<std::string>& samples)
{
    const auto ew = lower_words(e.text);
    const std::set<std::string> es(ew.begin(), ew.end());
    std::vector<double> out;
    for (const auto& s : samples) {
        const auto sw = lower_words(s);
        const std::set<std::string> ss(sw.begin(), sw.end());
        std::size_t inter = 0;
        for (const auto& w : es) inter += ss.count(w);
        const std::size_t uni = es.size() + ss.size() - inter;
        out.push_back(uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0);
    }
    return out;
}

void InterpreterConfig::validate() const
{
    if (!(timeout_s > 0.0)) throw ConfigError("interpreter timeout must be > 0");
    if (max_retries < 0) throw ConfigError("interpreter max_retries must be >= 0");
    if (max_concurrency < 1) throw ConfigError("interpreter max_concurrency must be >= 1");
    if (backoff_ms < 0) throw ConfigError("interpreter backoff_ms must be >= 0");
}

InterpreterConfig InterpreterConfig::from_json(const json& j)
{
    InterpreterConfig c;
    c.endpoint = j.value("endpoint", c.endpoint);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
    c.temperature = j.value("temperature", c.temperature);
    c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
    c.cache_path = j.value("cache_path", std::string());
    c.replay_only = j.value("replay_only", c.replay_only);
    return c;
}

ReplayCache::ReplayCache(std::filesystem::path path) : path_(std::move(path))
{
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    const auto j = json::parse(read_file(path_));
    for (auto it = j.begin(); it != j.end(); ++it) entries_[it.key()] = it.value().get<std::string>();
}

bool ReplayCache::lookup(const std::string& key, std::string& out) const
{
    std::lock_guard lock(mu_);
    const auto it = entries_.find(key);
    if (it == entries_.end()) return false;
    out = it->second;
    return true;
}

void ReplayCache::store(const std::string& key, const std::string& value)
{
    std::lock_guard lock(mu_);
    entries_[key] = value;
    if (path_.empty()) return;
    json j = json::object();
    for (const auto& [k, v] : entries_) j[k] = v;
    write_file_atomic(path_, j.dump(1));
}

std::size_t ReplayCache::size() const
{
    std::lock_guard lock(mu_);
    return entries_.size();
}

RemoteInterpreter::RemoteInterpreter(InterpreterConfig cfg) : cfg_(std::move(cfg)), cache_(cfg_.cache_path)
{
    cfg_.validate();
    static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, url)) throw ConfigError("interpreter endpoint is not an http(s) URL: " + cfg_.endpoint);
    scheme_host_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/";
}

int RemoteInterpreter::requests_sent() const
{
    std::lock_guard lock(mu_);
    return sent_;
}

std::string RemoteInterpreter::complete(const std::string& system, const std::string& user)
{
    const json body = {{"model", cfg_.model},
                       {"temperature", cfg_.temperature},
                       {"messages", json::array({{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}})}};
    const std::string payload = body.dump();
    const std::string key = sha256_hex(payload);
    std::string cached;
    if (cache_.lookup(key, cached)) return cached;
    if (cfg_.replay_only) throw TransportError("replay cache miss for request " + key.substr(0, 12) + " in replay-only mode");

    httplib::Client cli(scheme_host_);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (const char* k = std::getenv(cfg_.api_key_env.c_str()); k && *k) headers.emplace("Authorization", std::string("Bearer ") + k);

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms * (1 << std::min(attempt - 1, 6))));
        {
            std::lock_guard lock(mu_);
            ++sent_;
        }
        auto res = cli.Post(path_, headers, payload, "application/json");
        if (!res) {
            last_error = "transport: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) throw ProtocolError("interpreter returned HTTP " + std::to_string(res->status) + ": " + res->body);
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::exception&) {
            throw ProtocolError("interpreter reply is not JSON: " + res->body.substr(0, 200));
        }
        const auto* content = reply.contains("choices") && reply["choices"].is_array() && !reply["choices"].empty() &&
                                      reply["choices"][0].contains("message")
                                  ? &reply["choices"][0]["message"]
                                  : nullptr;
        if (!content || !content->contains("content") || !(*content)["content"].is_string())
            throw ProtocolError("interpreter reply lacks choices[0].message.content: " + res->body.substr(0, 200));
        const auto text = (*content)["content"].get<std::string>();
        cache_.store(key, text);
        return text;
    }
    throw TransportError("interpreter request failed after " + std::to_string(cfg_.max_retries + 1) + " attempts (" + last_error + ")");
}

namespace {

const char* kExplainSystem =
    "You explain what a single unit inside a language model responds to. You are shown text samples with the unit's "
    "activation on a 0-1 scale. Reply with one short phrase describing the common pattern.";
const char* kPredictSystem =
    "You predict how strongly a language-model unit activates on a text, given a description of the unit. Reply with "
    "a single number between 0 and 1 and nothing else.";

} // namespace

Explanation RemoteInterpreter::explain(const std::string& unit_id, const std::vector<InterpRecord>& top)
{
    require_three(top);
    std::ostringstream user;
    user.precision(3);
    for (std::size_t i = 0; i < top.size(); ++i) user << "Sample " << i + 1 << " (activation " << top[i].activation << "): " << top[i].text << "\n";
    Explanation e;
    e.unit_id = unit_id;
    e.exemplars = top;
    e.text = complete(kExplainSystem, user.str());
    if (e.text.empty()) throw ProtocolError("interpreter returned an empty explanation");
    return e;
}

std::vector<double> RemoteInterpreter::predict(const Explanation& e, const std::vector<std::string>& samples)
{
    std::counting_semaphore<> slots(cfg_.max_concurrency);
    std::vector<std::future<double>> jobs;
    for (const auto& s : samples) {
        jobs.push_back(std::async(std::launch::async, [this, &slots, &e, s] {
            slots.acquire();
            struct Release {
                std::counting_semaphore<>& s;
                ~Release() { s.release(); }
            } release{slots};
            return parse_score(complete(kPredictSystem, "Unit description: " + e.text + "\nText: " + s));
        }));
    }
    std::vector<double> out;
    for (auto& j : jobs) out.push_back(j.get());
    return out;
}

double parse_score(const std::string& reply)
{
    static const std::regex num(R"([-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?)");
    std::smatch m;
    if (!std::regex_search(reply, m, num)) throw ProtocolError("no number in interpreter reply: " + reply.substr(0, 200));
    return std::clamp(std::stod(m.str()), 0.0, 1.0);
}

std::unique_ptr<Interpreter> make_interpreter(const std::string& kind, const InterpreterConfig& cfg)
{
    if (kind == "mock") return std::make_unique<MockInterpreter>();
    if (kind == "remote") return std::make_unique<RemoteInterpreter>(cfg);
    throw ConfigError("unknown interpreter '" + kind + "' (expected mock or remote)");
}

} // namespace featlab
