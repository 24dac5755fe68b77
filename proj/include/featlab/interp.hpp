#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "featlab/io.hpp"

namespace featlab {

struct InterpRecord {
    std::string text;
    double activation = 0.0;  // normalized to [0, 1]
};

struct Explanation {
    std::string text;
    std::string unit_id;
    std::vector<InterpRecord> exemplars;
};

class Interpreter {
public:
    virtual ~Interpreter() = default;
    // Exactly three exemplar records.
    virtual Explanation explain(const std::string& unit_id, const std::vector<InterpRecord>& top) = 0;
    // One prediction in [0, 1] per sample.
    virtual std::vector<double> predict(const Explanation& e, const std::vector<std::string>& samples) = 0;
};

// Offline stand-in: the explanation is the set of words shared by all
// exemplars; a prediction is the Jaccard overlap of explanation and sample
// words.
class MockInterpreter final : public Interpreter {
public:
    Explanation explain(const std::string& unit_id, const std::vector<InterpRecord>& top) override;
    std::vector<double> predict(const Explanation& e, const std::vector<std::string>& samples) override;
};

struct InterpreterConfig {
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string model = "gpt-4o-mini";
    std::string api_key_env = "OPENAI_API_KEY";
    double timeout_s = 30.0;
    int max_retries = 3;
    int backoff_ms = 250;
    double temperature = 0.0;
    int max_concurrency = 4;
    std::filesystem::path cache_path;  // empty: no replay cache
    bool replay_only = false;          // never touch the network

    void validate() const;
    static InterpreterConfig from_json(const json& j);
};

// Persistent request-hash -> response-text map.
class ReplayCache {
public:
    ReplayCache() = default;
    explicit ReplayCache(std::filesystem::path path);
    bool lookup(const std::string& key, std::string& out) const;
    void store(const std::string& key, const std::string& value);
    std::size_t size() const;

private:
    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::map<std::string, std::string> entries_;
};

// Chat-completions client. Requests are JSON bodies
//   {"model", "temperature", "messages": [{"role","content"}...]}
// and the reply text is read from choices[0].message.content.
class RemoteInterpreter final : public Interpreter {
public:
    explicit RemoteInterpreter(InterpreterConfig cfg);
    Explanation explain(const std::string& unit_id, const std::vector<InterpRecord>& top) override;
    std::vector<double> predict(const Explanation& e, const std::vector<std::string>& samples) override;

    // One chat exchange with retries and the replay cache. Thread-safe.
    std::string complete(const std::string& system, const std::string& user);
    int requests_sent() const;

private:
    InterpreterConfig cfg_;
    ReplayCache cache_;
    std::string scheme_host_;
    std::string path_;
    mutable std::mutex mu_;
    int sent_ = 0;
};

// First number in a reply, clipped to [0, 1]; ProtocolError if none.
double parse_score(const std::string& reply);

std::unique_ptr<Interpreter> make_interpreter(const std::string& kind, const InterpreterConfig& cfg);

} // namespace featlab
