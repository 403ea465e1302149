#pragma once

// Dataset directory layout:
//   meta.json         {"num_users", "num_items", "vocab_size", "P", "C"}
//   interactions.tsv  user_id<TAB>item_id
//   images.bin        f32 little-endian, item-major, P*P*C per item
//   texts.tsv         item_id<TAB>space-separated token ids

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugt/data.hpp"
#include "ugt/errors.hpp"

namespace ugt {

namespace detail {

inline std::uint64_t parse_id(const std::string& token, const std::string& file, std::size_t line) {
    if (token.empty() || token.find_first_not_of("0123456789") != std::string::npos) {
        throw FormatError(file + ":" + std::to_string(line) + ": expected a non-negative integer, got '" + token + "'");
    }
    try {
        return std::stoull(token);
    } catch (const std::exception&) {
        throw FormatError(file + ":" + std::to_string(line) + ": integer out of range '" + token + "'");
    }
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    parts.push_back(cur);
    return parts;
}

inline void write_f32_le(std::ostream& os, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                           static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
    os.write(bytes, 4);
}

inline float read_f32_le(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    ds.validate();
    std::filesystem::create_directories(dir);
    {
        nlohmann::ordered_json meta;
        meta["num_users"] = ds.num_users;
        meta["num_items"] = ds.num_items;
        meta["vocab_size"] = ds.vocab_size;
        meta["P"] = ds.image_size;
        meta["C"] = ds.channels;
        std::ofstream os(dir / "meta.json");
        os << meta.dump(2) << '\n';
    }
    {
        std::ofstream os(dir / "interactions.tsv");
        for (const auto& e : ds.interactions) os << e.user << '\t' << e.item << '\n';
    }
    {
        std::ofstream os(dir / "images.bin", std::ios::binary);
        for (float v : ds.images) detail::write_f32_le(os, v);
    }
    {
        std::ofstream os(dir / "texts.tsv");
        for (std::size_t i = 0; i < ds.texts.size(); ++i) {
            os << i << '\t';
            for (std::size_t k = 0; k < ds.texts[i].size(); ++k) os << (k ? " " : "") << ds.texts[i][k];
            os << '\n';
        }
    }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    {
        std::ifstream is(dir / "meta.json");
        if (!is) throw FormatError("missing " + (dir / "meta.json").string());
        nlohmann::json meta;
        try {
            is >> meta;
            ds.num_users = meta.at("num_users").get<std::size_t>();
            ds.num_items = meta.at("num_items").get<std::size_t>();
            ds.vocab_size = meta.at("vocab_size").get<std::size_t>();
            ds.image_size = meta.at("P").get<std::size_t>();
            ds.channels = meta.at("C").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("meta.json: " + std::string(e.what()));
        }
    }
    {
        const std::string name = "interactions.tsv";
        std::ifstream is(dir / name);
        if (!is) throw FormatError("missing " + (dir / name).string());
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto fields = detail::split_on(line, '\t');
            if (fields.size() != 2) throw FormatError(name + ":" + std::to_string(lineno) + ": expected 2 fields");
            const auto u = detail::parse_id(fields[0], name, lineno);
            const auto i = detail::parse_id(fields[1], name, lineno);
            if (u >= ds.num_users || i >= ds.num_items) {
                throw IntegrityError(name + ":" + std::to_string(lineno) + ": id out of range (" + fields[0] + ", " +
                                     fields[1] + ")");
            }
            ds.interactions.push_back({static_cast<Id>(u), static_cast<Id>(i)});
        }
    }
    {
        std::ifstream is(dir / "images.bin", std::ios::binary);
        if (!is) throw FormatError("missing " + (dir / "images.bin").string());
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        const std::size_t expected = ds.num_items * ds.image_numel() * 4;
        if (bytes.size() != expected) {
            throw FormatError("images.bin: " + std::to_string(bytes.size()) + " bytes, expected " +
                              std::to_string(expected));
        }
        ds.images.resize(ds.num_items * ds.image_numel());
        for (std::size_t k = 0; k < ds.images.size(); ++k) ds.images[k] = detail::read_f32_le(&bytes[4 * k]);
    }
    {
        const std::string name = "texts.tsv";
        std::ifstream is(dir / name);
        if (!is) throw FormatError("missing " + (dir / name).string());
        ds.texts.assign(ds.num_items, {});
        std::vector<bool> seen(ds.num_items, false);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw FormatError(name + ":" + std::to_string(lineno) + ": missing tab");
            const auto item = detail::parse_id(line.substr(0, tab), name, lineno);
            if (item >= ds.num_items) {
                throw IntegrityError(name + ":" + std::to_string(lineno) + ": item id " + std::to_string(item) +
                                     " >= num_items");
            }
            if (seen[item]) throw IntegrityError(name + ":" + std::to_string(lineno) + ": duplicate text for item");
            seen[item] = true;
            std::istringstream tokens(line.substr(tab + 1));
            std::string tok;
            while (tokens >> tok) {
                const auto t = detail::parse_id(tok, name, lineno);
                if (t >= ds.vocab_size) {
                    throw IntegrityError(name + ":" + std::to_string(lineno) + ": token " + tok + " >= vocab_size");
                }
                ds.texts[item].push_back(static_cast<TokenId>(t));
            }
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i]) throw IntegrityError(name + ": no text for item " + std::to_string(i));
    }
    ds.validate();
    return ds;
}

}  // namespace ugt
