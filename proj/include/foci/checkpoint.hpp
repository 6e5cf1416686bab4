#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "foci/bag_io.hpp"
#include "foci/errors.hpp"
#include "foci/models.hpp"

namespace foci {

// Checkpoint file: magic "FOCM", u32 version, then tagged sections until end
// of file. Section: 4-byte tag ("ATTN" | "TRNS" | "HTPK" | "FSEL"), u32
// hyper count + u32 hypers, u32 param count, then per param (u32 name len,
// name, u32 rows, u32 cols, f64 data row-major little-endian). Parameters
// are stored at full f64 width so round-trips are bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_f64(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline bool read_f64(std::istream& is, double& v) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) return false;
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
    return true;
}

struct Section {
    std::string tag;
    std::vector<std::uint32_t> hypers;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline void write_section(std::ostream& os, const Section& s) {
    os.write(s.tag.data(), 4);
    write_u32(os, static_cast<std::uint32_t>(s.hypers.size()));
    for (std::uint32_t h : s.hypers) write_u32(os, h);
    write_u32(os, static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& [name, t] : s.tensors) {
        write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<std::uint32_t>(t.rows));
        write_u32(os, static_cast<std::uint32_t>(t.cols));
        for (double v : t.data) write_f64(os, v);
    }
}

inline std::vector<Section> read_sections(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FOCM", 4) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    std::uint32_t version = 0;
    if (!read_u32(is, version))
        throw DataError("checkpoint: truncated header in " + path);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: version " + std::to_string(version) +
                        " unsupported");
    std::vector<Section> sections;
    while (true) {
        char tag[4];
        if (!is.read(tag, 4)) {
            if (is.eof() && is.gcount() == 0) break;
            throw DataError("checkpoint: truncated section in " + path);
        }
        Section s;
        s.tag.assign(tag, 4);
        std::uint32_t nh = 0;
        if (!read_u32(is, nh)) throw DataError("checkpoint: truncated section in " + path);
        s.hypers.resize(nh);
        for (auto& h : s.hypers)
            if (!read_u32(is, h)) throw DataError("checkpoint: truncated section in " + path);
        std::uint32_t np = 0;
        if (!read_u32(is, np)) throw DataError("checkpoint: truncated section in " + path);
        for (std::uint32_t p = 0; p < np; ++p) {
            std::uint32_t name_len = 0, rows = 0, cols = 0;
            if (!read_u32(is, name_len))
                throw DataError("checkpoint: truncated section in " + path);
            std::string name(name_len, '\0');
            if (!is.read(name.data(), name_len) || !read_u32(is, rows) ||
                !read_u32(is, cols))
                throw DataError("checkpoint: truncated section in " + path);
            Tensor t(rows, cols);
            for (double& v : t.data)
                if (!read_f64(is, v))
                    throw DataError("checkpoint: truncated tensor in " + path);
            s.tensors.emplace_back(std::move(name), std::move(t));
        }
        sections.push_back(std::move(s));
    }
    return sections;
}

inline Section section_of(const Backbone& model) {
    Section s;
    s.tag = archetype_tag(model.archetype());
    s.hypers = {static_cast<std::uint32_t>(model.d()),
                static_cast<std::uint32_t>(model.h()),
                static_cast<std::uint32_t>(model.num_classes())};
    for (std::uint32_t e : model.extra_hypers()) s.hypers.push_back(e);
    for (const auto& r : model.params().refs()) s.tensors.emplace_back(r.name, r.node->value);
    return s;
}

inline void fill_params(ParamList& params, const Section& s, const std::string& what) {
    if (s.tensors.size() != params.refs().size())
        throw DataError("checkpoint: " + what + " expects " +
                        std::to_string(params.refs().size()) + " tensors, file has " +
                        std::to_string(s.tensors.size()));
    for (const auto& [name, t] : s.tensors) {
        NodePtr p = params.find(name);
        if (!p) throw DataError("checkpoint: unknown tensor '" + name + "' in " + what);
        if (p->value.rows != t.rows || p->value.cols != t.cols)
            throw DataError("checkpoint: shape mismatch for '" + name + "' in " + what);
        p->value = t;
    }
}

} // namespace detail

inline std::unique_ptr<Backbone> instantiate_backbone(const detail::Section& s) {
    const auto& hy = s.hypers;
    if (s.tag == "ATTN") {
        if (hy.size() != 3) throw DataError("checkpoint: ATTN header size");
        return std::make_unique<AttentionPoolModel>(hy[0], hy[1], hy[2], 0);
    }
    if (s.tag == "TRNS") {
        if (hy.size() != 5) throw DataError("checkpoint: TRNS header size");
        return std::make_unique<ClsTransformerModel>(hy[0], hy[1], hy[2], hy[3], hy[4], 0);
    }
    if (s.tag == "HTPK") {
        if (hy.size() != 4) throw DataError("checkpoint: HTPK header size");
        return std::make_unique<HardTopKModel>(hy[0], hy[1], hy[2], hy[3], 0);
    }
    throw DataError("checkpoint: unknown archetype tag '" + s.tag + "'");
}

// Saves the backbone (and optionally extra sections appended by the caller,
// e.g. a selector head) into one self-contained file.
inline void save_checkpoint(const std::string& path,
                            const std::vector<detail::Section>& sections) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
    os.write("FOCM", 4);
    detail::write_u32(os, kCheckpointVersion);
    for (const auto& s : sections) detail::write_section(os, s);
    if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline void save_backbone(const std::string& path, const Backbone& model) {
    save_checkpoint(path, {detail::section_of(model)});
}

// Loads the first backbone section; the model comes back frozen.
inline std::unique_ptr<Backbone> load_backbone(const std::string& path) {
    for (const auto& s : detail::read_sections(path)) {
        if (s.tag == "FSEL") continue;
        auto model = instantiate_backbone(s);
        detail::fill_params(model->params(), s, s.tag);
        model->freeze();
        return model;
    }
    throw DataError("checkpoint: no backbone section in " + path);
}

} // namespace foci
