#pragma once

// Checkpoint file:
//   8 bytes   magic "UGTCKPT1"
//   8 bytes   header length H, u64 little-endian
//   H bytes   JSON header {"meta": {...}, "checksum": "<fnv1a64 hex of data>",
//                          "tensors": [{"name", "shape", "offset", "count"}, ...]}
//   data      f64 little-endian; offsets and counts are in elements

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugt/errors.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

inline constexpr char kCheckpointMagic[8] = {'U', 'G', 'T', 'C', 'K', 'P', 'T', '1'};

struct CheckpointEntry {
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, CheckpointEntry> tensors;
};

namespace detail {

inline std::uint64_t fnv1a64(const std::vector<unsigned char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline void put_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p[k]) << (8 * k);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            const nlohmann::json& meta) {
    std::vector<unsigned char> data;
    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
        for (double v : t.values()) detail::put_u64_le(data, std::bit_cast<std::uint64_t>(v));
        offset += t.numel();
    }
    nlohmann::ordered_json header;
    header["meta"] = meta;
    header["checksum"] = detail::hex64(detail::fnv1a64(data));
    header["tensors"] = std::move(index);
    const std::string text = header.dump();

    std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_u64_le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), data.begin(), data.end());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

/// Reads and validates a checkpoint; any structural damage raises FormatError.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || !std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin())) {
        throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    }
    const std::uint64_t header_len = detail::get_u64_le(&bytes[8]);
    if (header_len > bytes.size() - 16) throw FormatError(path.string() + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": corrupt header: " + e.what());
    }
    std::vector<unsigned char> data(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len), bytes.end());
    if (data.size() % 8 != 0) throw FormatError(path.string() + ": data section is not a whole number of f64");
    const std::size_t count = data.size() / 8;

    Checkpoint ck;
    try {
        if (header.at("checksum").get<std::string>() != detail::hex64(detail::fnv1a64(data))) {
            throw FormatError(path.string() + ": checksum mismatch");
        }
        ck.meta = header.at("meta");
        std::size_t covered = 0;
        for (const auto& entry : header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto n = entry.at("count").get<std::size_t>();
            if (shape_numel(shape) != n || offset + n > count || offset != covered) {
                throw FormatError(path.string() + ": inconsistent index entry for " + name);
            }
            if (ck.tensors.contains(name)) throw FormatError(path.string() + ": duplicate tensor " + name);
            CheckpointEntry e{shape, std::vector<double>(n)};
            for (std::size_t k = 0; k < n; ++k) e.values[k] = std::bit_cast<double>(detail::get_u64_le(&data[8 * (offset + k)]));
            ck.order.push_back(name);
            ck.tensors.emplace(name, std::move(e));
            covered += n;
        }
        if (covered != count) throw FormatError(path.string() + ": trailing data after last tensor");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": corrupt header: " + e.what());
    }
    return ck;
}

}  // namespace ugt
