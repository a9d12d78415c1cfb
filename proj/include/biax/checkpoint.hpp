#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "biax/tensor.hpp"

namespace biax {

/// Versioned container of named f32 tensors.
///
/// Layout (all integers little-endian):
///   "OBIX" | version u32 | tensor count u32
///   per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 x rank | f32 payload
///   config length u32 | config text (UTF-8, typically JSON; may be empty)
struct Checkpoint {
    static constexpr char kMagic[4] = {'O', 'B', 'I', 'X'};
    static constexpr std::uint32_t kVersion = 1;

    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };

    std::vector<Entry> tensors;
    std::string config;

    const Entry* find(const std::string& name) const {
        for (const auto& e : tensors)
            if (e.name == name) return &e;
        return nullptr;
    }
};

namespace detail {

template <class U>
void put_le(std::string& buf, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::string& buf, std::size_t& pos) {
    if (pos + sizeof(U) > buf.size()) throw CheckpointError("checkpoint truncated");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string buf(Checkpoint::kMagic, 4);
    detail::put_le<std::uint32_t>(buf, Checkpoint::kVersion);
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& e : ckpt.tensors) {
        if (shape_numel(e.shape) != e.data.size()) throw CheckpointError("tensor '" + e.name + "' size mismatch");
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
        buf += e.name;
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) detail::put_le<std::uint64_t>(buf, d);
        for (float f : e.data) detail::put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(f));
    }
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.config.size()));
    buf += ckpt.config;
    return buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
    if (buf.size() < 12 || std::memcmp(buf.data(), Checkpoint::kMagic, 4) != 0) {
        throw CheckpointError("not a checkpoint (bad magic)");
    }
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(buf, pos);
    if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(buf, pos);
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        Checkpoint::Entry e;
        const auto name_len = detail::get_le<std::uint32_t>(buf, pos);
        if (pos + name_len > buf.size()) throw CheckpointError("checkpoint truncated");
        e.name = buf.substr(pos, name_len);
        pos += name_len;
        const auto rank = detail::get_le<std::uint32_t>(buf, pos);
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_le<std::uint64_t>(buf, pos));
        const auto n = shape_numel(e.shape);
        if (pos + 4 * n > buf.size()) throw CheckpointError("checkpoint truncated");
        e.data.resize(n);
        for (auto& f : e.data) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(buf, pos));
        ckpt.tensors.push_back(std::move(e));
    }
    const auto cfg_len = detail::get_le<std::uint32_t>(buf, pos);
    if (pos + cfg_len > buf.size()) throw CheckpointError("checkpoint truncated");
    ckpt.config = buf.substr(pos, cfg_len);
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
    const auto buf = serialize_checkpoint(ckpt);
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw CheckpointError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

}  // namespace biax
