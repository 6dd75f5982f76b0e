#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dger/common.hpp"
#include "dger/tensor.hpp"

namespace dger {

// ===========================================================================
// Flat binary checkpoint: a magic header followed by named tensors in
// row-major double precision.  Optimizer state travels as reserved "__"
// entries next to the model parameters, so a resumed run sees exactly the
// bytes a straight-through run would have had.
// ===========================================================================

namespace ckpt1 {

constexpr char kMagic[8] = {'D', 'G', 'E', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        fail(strfmt("checkpoint: truncated while reading %s", what));
    return v;
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        fail(strfmt("checkpoint: truncated while reading %s", what));
    return v;
}

}  // namespace ckpt1

using CheckpointEntries = std::map<std::string, Tensor>;

inline void save_checkpoint(const std::string& path, const CheckpointEntries& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(strfmt("checkpoint: cannot open '%s' for writing", path.c_str()));
    os.write(ckpt1::kMagic, sizeof(ckpt1::kMagic));
    ckpt1::write_u32(os, ckpt1::kVersion);
    ckpt1::write_u64(os, entries.size());
    for (const auto& [name, tensor] : entries) {
        ckpt1::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt1::write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
        for (int d = 0; d < tensor.rank(); ++d)
            ckpt1::write_u32(os, static_cast<std::uint32_t>(tensor.dim(d)));
        os.write(reinterpret_cast<const char*>(tensor.data()),
                 static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!os) fail(strfmt("checkpoint: write to '%s' failed", path.c_str()));
}

inline CheckpointEntries load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(strfmt("checkpoint: cannot open '%s'", path.c_str()));
    char magic[8] = {};
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, ckpt1::kMagic, sizeof(magic)) != 0)
        fail(strfmt("checkpoint: '%s' is not a checkpoint file", path.c_str()));
    const std::uint32_t version = ckpt1::read_u32(is, "version");
    if (version != ckpt1::kVersion)
        fail(strfmt("checkpoint: unsupported version %u", version));
    const std::uint64_t count = ckpt1::read_u64(is, "entry count");

    CheckpointEntries entries;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = ckpt1::read_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) fail("checkpoint: truncated while reading a name");
        const std::uint32_t rank = ckpt1::read_u32(is, "rank");
        if (rank > 8) fail(strfmt("checkpoint: entry '%s' has implausible rank %u", name.c_str(), rank));
        std::vector<int> shape;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = ckpt1::read_u32(is, "dimension");
            shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        Tensor t(std::move(shape));
        if (!is.read(reinterpret_cast<char*>(t.values().data()),
                     static_cast<std::streamsize>(numel * sizeof(double))))
            fail(strfmt("checkpoint: truncated while reading values of '%s'", name.c_str()));
        if (entries.count(name)) fail(strfmt("checkpoint: duplicate entry '%s'", name.c_str()));
        entries.emplace(std::move(name), std::move(t));
    }
    return entries;
}

}  // namespace dger
