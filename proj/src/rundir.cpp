#include "featlab/rundir.hpp"

#include <algorithm>
#include <sstream>
#include <vector>

#include "featlab/errors.hpp"

namespace featlab {

namespace fs = std::filesystem;

RunDir RunDir::create(const fs::path& dir, const std::string& subcommand, const KeyValueConfig& cfg, bool overwrite)
{
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) throw PreconditionError("run directory already exists: " + dir.string() + " (use --overwrite)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    RunDir r;
    r.dir_ = dir;
    r.subcommand_ = subcommand;
    r.cfg_ = cfg;
    write_file_atomic(dir / "config.txt", cfg.canonical());
    return r;
}

void RunDir::write_artifact(const std::string& name, std::string_view bytes)
{
    write_file_atomic(dir_ / name, bytes);
    artifacts_[name] = sha256_hex(bytes);
}

void RunDir::write_checkpoint(const std::string& name, const Checkpoint& ckpt)
{
    write_artifact(name, serialize_checkpoint(ckpt));
}

void RunDir::add_input(const std::string& key, const fs::path& run)
{
    inputs_[key] = run.string();
}

void RunDir::write_report(const json& summary, const json& details, const std::string& csv)
{
    for (auto it = summary.begin(); it != summary.end(); ++it) {
        if (!it.value().is_number() && !it.value().is_boolean())
            throw PreconditionError("report summary entry '" + it.key() + "' is not a scalar");
    }
    const json report = {{"format_version", kRunFormatVersion},
                         {"subcommand", subcommand_},
                         {"experiment_id", cfg_.get("experiment.id")},
                         {"config_hash", cfg_.hash()},
                         {"summary", summary},
                         {"details", details}};
    write_artifact("report.json", report.dump(1) + "\n");
    write_artifact("report.csv", csv);
}

void RunDir::finish()
{
    json seeds = json::object();
    for (const auto& [k, v] : cfg_.entries()) {
        if (k.rfind("seed.", 0) == 0) seeds[k.substr(5)] = v;
    }
    const json m = {{"format_version", kRunFormatVersion},
                    {"subcommand", subcommand_},
                    {"experiment_id", cfg_.get("experiment.id")},
                    {"config_hash", cfg_.hash()},
                    {"seeds", seeds},
                    {"inputs", inputs_},
                    {"artifacts", artifacts_}};
    write_file_atomic(dir_ / "manifest.json", m.dump(1) + "\n");
}

json read_manifest(const fs::path& run)
{
    const auto p = run / "manifest.json";
    if (!fs::exists(p)) throw PreconditionError("missing upstream run (no manifest): " + p.string());
    try {
        return json::parse(read_file(p));
    } catch (const json::exception& e) {
        throw PreconditionError("unreadable manifest " + p.string() + ": " + e.what());
    }
}

fs::path require_artifact(const fs::path& run, const std::string& name)
{
    read_manifest(run);
    const auto p = run / name;
    if (!fs::exists(p)) throw PreconditionError("missing upstream artifact: " + p.string());
    return p;
}

std::string csv_escape(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string aggregate_reports(const fs::path& root)
{
    if (!fs::is_directory(root)) throw PreconditionError("runs directory not found: " + root.string());
    std::vector<fs::path> reports;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().filename() == "report.json" && fs::exists(e.path().parent_path() / "manifest.json"))
            reports.push_back(e.path());
    }
    std::sort(reports.begin(), reports.end());
    struct Row {
        std::string experiment, run, subcommand, hash, metric;
        double value;
    };
    std::vector<Row> rows;
    for (const auto& p : reports) {
        const auto j = json::parse(read_file(p));
        const int version = j.value("format_version", -1);
        if (version != kRunFormatVersion) {
            throw PreconditionError("refusing to merge " + p.string() + ": format version " + std::to_string(version) +
                                    ", expected " + std::to_string(kRunFormatVersion));
        }
        const auto run = fs::relative(p.parent_path(), root).generic_string();
        for (auto it = j["summary"].begin(); it != j["summary"].end(); ++it) {
            const double v = it.value().is_boolean() ? (it.value().get<bool>() ? 1.0 : 0.0) : it.value().get<double>();
            rows.push_back({j["experiment_id"], run, j["subcommand"], j["config_hash"], it.key(), v});
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.experiment < b.experiment; });
    std::ostringstream out;
    out.precision(10);
    out << "experiment_id,run,subcommand,config_hash,metric,value\n";
    for (const auto& r : rows) {
        out << csv_escape(r.experiment) << ',' << csv_escape(r.run) << ',' << r.subcommand << ',' << r.hash.substr(0, 16)
            << ',' << r.metric << ',' << r.value << '\n';
    }
    return out.str();
}

} // namespace featlab
