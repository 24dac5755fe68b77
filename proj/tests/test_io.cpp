#include <doctest.h>

#include <filesystem>

#include "featlab/errors.hpp"
#include "featlab/io.hpp"

using namespace featlab;
namespace fs = std::filesystem;

TEST_SUITE("io") {

TEST_CASE("sha256 of a known vector")
{
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("checkpoint round trip keeps kind, meta and tensors")
{
    Checkpoint c;
    c.kind = "demo";
    c.meta = {{"layer", 3}, {"site", "mlp"}};
    c.add("w", {2, 3}, {1, 2, 3, 4, 5, 6.5f});
    c.add("b", {3}, {-1, 0, 1e-30f});
    const auto bytes = serialize_checkpoint(c);
    const auto d = parse_checkpoint(bytes);
    CHECK(d.kind == "demo");
    CHECK(d.meta == c.meta);
    REQUIRE(d.tensors.size() == 2);
    CHECK(d.get("w").shape == std::vector<std::int64_t>{2, 3});
    CHECK(d.get("w").data == c.get("w").data);
    CHECK(d.get("b").data == c.get("b").data);
    CHECK(serialize_checkpoint(d) == bytes);
    CHECK_THROWS_AS(d.get("missing"), PreconditionError);
}

TEST_CASE("malformed checkpoints are rejected")
{
    Checkpoint c;
    c.kind = "demo";
    c.add("w", {4}, {1, 2, 3, 4});
    const auto bytes = serialize_checkpoint(c);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), PreconditionError);
    CHECK_THROWS_AS(parse_checkpoint("no header"), PreconditionError);
    CHECK_THROWS_AS(parse_checkpoint("{\"format\":\"other\"}\n"), PreconditionError);
    CHECK_THROWS_AS(c.add("bad", {3}, {1, 2}), ShapeError);
}

TEST_CASE("atomic writes leave only the final file")
{
    const auto dir = fs::temp_directory_path() / "featlab_io_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file_atomic(dir / "a.txt", "first");
    write_file_atomic(dir / "a.txt", "second");
    CHECK(read_file(dir / "a.txt") == "second");
    CHECK(file_sha256(dir / "a.txt") == sha256_hex("second"));
    int files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
    CHECK(files == 1);
    CHECK_THROWS_AS(read_file(dir / "missing"), PreconditionError);
    fs::remove_all(dir);
}

}
