#include "featlab/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <openssl/evp.h>

#include "featlab/errors.hpp"

namespace featlab {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw PreconditionError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PreconditionError("missing file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string sha256_hex(std::string_view bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

const NamedTensor& Checkpoint::get(const std::string& name) const
{
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    throw PreconditionError("checkpoint (" + kind + ") has no tensor '" + name + "'");
}

void Checkpoint::add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data)
{
    const auto n = std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    if (n != static_cast<std::int64_t>(data.size())) throw ShapeError("tensor '" + name + "': shape/data mismatch");
    tensors.push_back({std::move(name), std::move(shape), std::move(data)});
}

std::string serialize_checkpoint(const Checkpoint& ckpt)
{
    json header;
    header["format"] = "featlab-checkpoint";
    header["format_version"] = Checkpoint::kFormatVersion;
    header["kind"] = ckpt.kind;
    header["meta"] = ckpt.meta;
    header["tensors"] = json::array();
    for (const auto& t : ckpt.tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});

    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& t : ckpt.tensors) {
        const auto* p = reinterpret_cast<const char*>(t.data.data());
        out.append(p, t.data.size() * sizeof(float));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes)
{
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw PreconditionError("checkpoint: missing header line");
    json header;
    try {
        header = json::parse(bytes.substr(0, nl));
    } catch (const json::exception& e) {
        throw PreconditionError(std::string("checkpoint: bad header: ") + e.what());
    }
    if (header.value("format", "") != "featlab-checkpoint") throw PreconditionError("checkpoint: wrong magic");
    if (header.value("format_version", -1) != Checkpoint::kFormatVersion) {
        throw PreconditionError("checkpoint: unsupported format_version");
    }

    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");
    std::size_t offset = nl + 1;
    for (const auto& t : header.at("tensors")) {
        NamedTensor nt;
        nt.name = t.at("name").get<std::string>();
        nt.shape = t.at("shape").get<std::vector<std::int64_t>>();
        const auto n = std::accumulate(nt.shape.begin(), nt.shape.end(), std::int64_t{1}, std::multiplies<>());
        const std::size_t nbytes = static_cast<std::size_t>(n) * sizeof(float);
        if (offset + nbytes > bytes.size()) throw PreconditionError("checkpoint: truncated payload at " + nt.name);
        nt.data.resize(static_cast<std::size_t>(n));
        std::memcpy(nt.data.data(), bytes.data() + offset, nbytes);
        offset += nbytes;
        ckpt.tensors.push_back(std::move(nt));
    }
    if (offset != bytes.size()) throw PreconditionError("checkpoint: trailing bytes after payload");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

} // namespace featlab
