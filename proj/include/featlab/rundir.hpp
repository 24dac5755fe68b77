#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "featlab/config.hpp"
#include "featlab/io.hpp"

namespace featlab {

// Layout of one run directory (format version 1):
//   config.txt     canonical key = value snapshot, defaults included
//   manifest.json  format version, subcommand, experiment id, config hash,
//                  seeds, inputs and the sha256 of every artifact
//   report.json    {format_version, subcommand, experiment_id, config_hash,
//                   summary: {name: number}, details: {...}}
//   report.csv     subcommand-specific table
//   <artifacts>    checkpoints, JSONL, plans
inline constexpr int kRunFormatVersion = 1;

class RunDir {
public:
    // Fails with PreconditionError when the directory already holds a run,
    // unless `overwrite` is set.
    static RunDir create(const std::filesystem::path& dir, const std::string& subcommand, const KeyValueConfig& cfg,
                         bool overwrite);

    const std::filesystem::path& path() const { return dir_; }
    std::filesystem::path file(const std::string& name) const { return dir_ / name; }

    void write_artifact(const std::string& name, std::string_view bytes);
    void write_checkpoint(const std::string& name, const Checkpoint& ckpt);
    // Records an upstream run this one read from.
    void add_input(const std::string& key, const std::filesystem::path& run);
    void write_report(const json& summary, const json& details, const std::string& csv);
    // Writes the manifest last, so a directory with a manifest is complete.
    void finish();

private:
    std::filesystem::path dir_;
    std::string subcommand_;
    KeyValueConfig cfg_;
    std::map<std::string, std::string> artifacts_;
    std::map<std::string, std::string> inputs_;
};

// A finished upstream run; PreconditionError naming the path otherwise.
json read_manifest(const std::filesystem::path& run);
std::filesystem::path require_artifact(const std::filesystem::path& run, const std::string& name);

// One CSV over every finished run below `root`, keyed by experiment id.
// Refuses runs whose format version differs from kRunFormatVersion.
std::string aggregate_reports(const std::filesystem::path& root);

std::string csv_escape(const std::string& s);

} // namespace featlab
