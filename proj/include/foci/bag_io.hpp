#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "foci/bag.hpp"
#include "foci/errors.hpp"

namespace foci {

// Bag feature file: magic "FOCB", u32 version, u32 num_classes, u32 d, then
// one record per bag (u32 id length, id bytes, u32 n_real, u32 label, f32
// features row-major, f32 coords) until end of file. All integers are
// little-endian; features are f32 on disk and widened to f64 in memory.
inline constexpr std::uint32_t kBagFormatVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

inline bool read_u32(std::istream& is, std::uint32_t& v) {
    unsigned char buf[4];
    if (!is.read(reinterpret_cast<char*>(buf), 4)) return false;
    v = static_cast<std::uint32_t>(buf[0]) | (static_cast<std::uint32_t>(buf[1]) << 8) |
        (static_cast<std::uint32_t>(buf[2]) << 16) |
        (static_cast<std::uint32_t>(buf[3]) << 24);
    return true;
}

inline void write_f32_matrix(std::ostream& os, const Tensor& t) {
    std::vector<float> buf(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) buf[k] = static_cast<float>(t.data[k]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline bool read_f32_matrix(std::istream& is, Tensor& t) {
    std::vector<float> buf(t.size());
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
        return false;
    for (std::size_t k = 0; k < t.size(); ++k)
        t.data[k] = static_cast<double>(buf[k]);
    return true;
}

} // namespace detail

inline void save_bags(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_bags: cannot open " + path);
    os.write("FOCB", 4);
    detail::write_u32(os, kBagFormatVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(ds.num_classes));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.feature_dim));
    for (const Bag& bag : ds.bags) {
        if (bag.features.cols != ds.feature_dim)
            throw DataError("save_bags: bag " + bag.id + " has d=" +
                            std::to_string(bag.features.cols) + ", dataset d=" +
                            std::to_string(ds.feature_dim));
        if (bag.n_real == 0 || bag.features.rows != bag.n_real ||
            bag.coords.rows != bag.n_real || bag.coords.cols != 2)
            throw DataError("save_bags: bag " + bag.id + " has inconsistent shapes");
        if (bag.label >= ds.num_classes)
            throw DataError("save_bags: bag " + bag.id + " label out of range");
        detail::write_u32(os, static_cast<std::uint32_t>(bag.id.size()));
        os.write(bag.id.data(), static_cast<std::streamsize>(bag.id.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(bag.n_real));
        detail::write_u32(os, static_cast<std::uint32_t>(bag.label));
        detail::write_f32_matrix(os, bag.features);
        detail::write_f32_matrix(os, bag.coords);
    }
    if (!os) throw DataError("save_bags: write failed for " + path);
}

inline Dataset load_bags(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_bags: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FOCB", 4) != 0)
        throw DataError("load_bags: bad magic in " + path);
    std::uint32_t version = 0, num_classes = 0, d = 0;
    if (!detail::read_u32(is, version) || !detail::read_u32(is, num_classes) ||
        !detail::read_u32(is, d))
        throw DataError("load_bags: truncated header in " + path);
    if (version != kBagFormatVersion)
        throw DataError("load_bags: version " + std::to_string(version) +
                        " unsupported (expected " +
                        std::to_string(kBagFormatVersion) + ")");
    if (num_classes == 0 || d == 0)
        throw DataError("load_bags: degenerate header in " + path);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.feature_dim = d;
    while (true) {
        std::uint32_t id_len = 0;
        if (!detail::read_u32(is, id_len)) {
            if (is.eof() && is.gcount() == 0) break;
            throw DataError("load_bags: truncated record in " + path);
        }
        Bag bag;
        bag.id.resize(id_len);
        std::uint32_t n_real = 0, label = 0;
        if (!is.read(bag.id.data(), id_len) || !detail::read_u32(is, n_real) ||
            !detail::read_u32(is, label))
            throw DataError("load_bags: truncated record in " + path);
        if (n_real == 0)
            throw DataError("load_bags: bag " + bag.id + " has zero instances");
        if (label >= num_classes)
            throw DataError("load_bags: bag " + bag.id + " label out of range");
        bag.n_real = n_real;
        bag.label = label;
        bag.features = Tensor(n_real, d);
        bag.coords = Tensor(n_real, 2);
        if (!detail::read_f32_matrix(is, bag.features) ||
            !detail::read_f32_matrix(is, bag.coords))
            throw DataError("load_bags: truncated record in " + path);
        ds.bags.push_back(std::move(bag));
    }
    return ds;
}

// ----- JSON sidecars -----

inline void save_manifest(const std::string& path, const Splits& splits) {
    nlohmann::ordered_json j;
    j["train"] = splits.train;
    j["val"] = splits.val;
    j["test"] = splits.test;
    std::ofstream os(path);
    if (!os) throw DataError("save_manifest: cannot open " + path);
    os << j.dump(2) << "\n";
}

inline Splits load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_manifest: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_manifest: " + std::string(e.what()));
    }
    Splits splits;
    for (const char* key : {"train", "val", "test"})
        if (!j.contains(key) || !j[key].is_array())
            throw DataError("load_manifest: missing split '" + std::string(key) + "'");
    splits.train = j["train"].get<std::vector<std::string>>();
    splits.val = j["val"].get<std::vector<std::string>>();
    splits.test = j["test"].get<std::vector<std::string>>();
    return splits;
}

inline void save_truth(const std::string& path, const EvidenceTruth& truth) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [id, indices] : truth) j[id] = indices;
    std::ofstream os(path);
    if (!os) throw DataError("save_truth: cannot open " + path);
    os << j.dump(2) << "\n";
}

inline EvidenceTruth load_truth(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_truth: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_truth: " + std::string(e.what()));
    }
    EvidenceTruth truth;
    for (auto it = j.begin(); it != j.end(); ++it)
        truth[it.key()] = it.value().get<std::vector<std::size_t>>();
    return truth;
}

} // namespace foci
