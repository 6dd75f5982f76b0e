#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include "dger/checkpoint.hpp"
#include "dger/rng.hpp"

using namespace dger;

namespace {

std::string temp_path(const char* tag) {
    return strfmt("/tmp/dger_test_%s_%d.ckpt", tag, static_cast<int>(::getpid()));
}

struct FileGuard {
    std::string path;
    explicit FileGuard(std::string p) : path(std::move(p)) {}
    ~FileGuard() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint round trip preserves every value bitwise") {
    Rng rng(0xc4ec);
    CheckpointEntries entries;
    entries["adapter.d1.w"] = Tensor::randn({7, 5}, rng, 1.3);
    entries["adapter.d1.b"] = Tensor::randn({1, 5}, rng, 0.1);
    entries["head.w"] = Tensor::randn({16, 31}, rng, 0.02);
    entries["__step"] = Tensor::scalar(417.0);
    Tensor odd({3, 2, 4});
    for (std::size_t i = 0; i < odd.numel(); ++i)
        odd.values()[i] = std::ldexp(1.0, -static_cast<int>(i)) * ((i % 2) ? -1 : 1);
    entries["odd.rank3"] = odd;

    const FileGuard g(temp_path("roundtrip"));
    save_checkpoint(g.path, entries);
    const CheckpointEntries back = load_checkpoint(g.path);

    REQUIRE(back.size() == entries.size());
    for (const auto& [name, t] : entries) {
        REQUIRE(back.count(name) == 1);
        const Tensor& u = back.at(name);
        REQUIRE(u.shape() == t.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(u.values()[i] == t.values()[i]);
    }
}

TEST_CASE("checkpoint preserves denormal and extreme payloads") {
    CheckpointEntries entries;
    Tensor t({1, 4}, {std::numeric_limits<double>::denorm_min(), -0.0,
                      std::numeric_limits<double>::max(), 1e-300});
    entries["edge"] = t;

    const FileGuard g(temp_path("edge"));
    save_checkpoint(g.path, entries);
    const CheckpointEntries back = load_checkpoint(g.path);
    const Tensor& u = back.at("edge");
    for (std::size_t i = 0; i < 4; ++i)
        REQUIRE(std::memcmp(&u.values()[i], &t.values()[i], sizeof(double)) == 0);
}

TEST_CASE("checkpoint rejects a file that is not a checkpoint") {
    const FileGuard g(temp_path("garbage"));
    {
        std::ofstream os(g.path, std::ios::binary);
        os << "definitely not a checkpoint";
    }
    REQUIRE_THROWS_WITH(load_checkpoint(g.path), Catch::Matchers::ContainsSubstring("not a checkpoint"));
}

TEST_CASE("checkpoint rejects truncated files") {
    Rng rng(0x7102);
    CheckpointEntries entries;
    entries["w"] = Tensor::randn({8, 8}, rng, 1.0);

    const FileGuard g(temp_path("trunc"));
    save_checkpoint(g.path, entries);

    std::ifstream is(g.path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();

    for (const std::size_t keep : {blob.size() - 1, blob.size() / 2, std::size_t{9}}) {
        std::ofstream os(g.path, std::ios::binary | std::ios::trunc);
        os.write(blob.data(), static_cast<std::streamsize>(keep));
        os.close();
        REQUIRE_THROWS_WITH(load_checkpoint(g.path), Catch::Matchers::ContainsSubstring("truncated"));
    }
}

TEST_CASE("checkpoint rejects missing files and absurd ranks") {
    REQUIRE_THROWS_WITH(load_checkpoint("/tmp/dger_no_such_file.ckpt"),
                        Catch::Matchers::ContainsSubstring("cannot open"));

    // Hand-build a header advertising rank 99.
    const FileGuard g(temp_path("rank"));
    {
        std::ofstream os(g.path, std::ios::binary);
        os.write("DGERCKPT", 8);
        const auto w32 = [&](uint32_t v) {
            os.write(reinterpret_cast<const char*>(&v), 4);
        };
        w32(1);  // version
        const uint64_t count = 1;
        os.write(reinterpret_cast<const char*>(&count), 8);
        w32(1);
        os.write("w", 1);
        w32(99);  // rank
    }
    REQUIRE_THROWS_WITH(load_checkpoint(g.path), Catch::Matchers::ContainsSubstring("rank"));
}

TEST_CASE("checkpoint round trips optimizer bookkeeping names") {
    CheckpointEntries entries;
    entries["head.b"] = Tensor({1, 3});
    entries["__adam_m/head.b"] = Tensor({1, 3}, {0.5, -0.25, 0.0});
    entries["__adam_v/head.b"] = Tensor({1, 3}, {1e-9, 2e-9, 3e-9});
    entries["__step"] = Tensor::scalar(12.0);
    entries["__epoch"] = Tensor::scalar(3.0);

    const FileGuard g(temp_path("adam"));
    save_checkpoint(g.path, entries);
    const CheckpointEntries back = load_checkpoint(g.path);
    REQUIRE(back.size() == 5);
    REQUIRE(back.at("__adam_m/head.b").values()[1] == -0.25);
    REQUIRE(back.at("__step").values()[0] == 12.0);
}
