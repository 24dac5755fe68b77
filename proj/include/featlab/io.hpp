#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace featlab {

using json = nlohmann::json;

// Write-temp-then-rename so readers never observe a half-written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

// Tensor container shared by the LM, SAE, decomposer and activation dumps:
// one JSON header line, then little-endian float32 payloads in header order.
struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

struct Checkpoint {
    static constexpr int kFormatVersion = 1;

    std::string kind;
    json meta = json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor& get(const std::string& name) const;
    void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data);
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace featlab
