#pragma once

#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "foci/metrics.hpp"
#include "foci/srp.hpp"
#include "foci/training.hpp"

namespace foci {

using Json = nlohmann::ordered_json;

// FNV-1a over the file bytes, hex-encoded; used to stamp reports with the
// identity of their inputs.
inline std::string file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checksum: cannot open " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!is) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

inline Json curve_json(const KCurve& c) {
    Json j;
    j["id"] = c.slide_id;
    j["ranking"] = c.ranking;
    j["n_real"] = c.n_real;
    j["schedule"] = c.schedule;
    Json rows = Json::array();
    for (std::size_t r = 0; r < c.probs.rows; ++r) {
        Json row = Json::array();
        for (std::size_t col = 0; col < c.probs.cols; ++col)
            row.push_back(c.probs.at(r, col));
        rows.push_back(row);
    }
    j["probs"] = rows;
    return j;
}

inline KCurve curve_from_json(const Json& j) {
    KCurve c;
    c.slide_id = j.at("id").get<std::string>();
    c.ranking = j.at("ranking").get<std::string>();
    c.n_real = j.at("n_real").get<std::size_t>();
    c.schedule = j.at("schedule").get<std::vector<std::size_t>>();
    const auto& rows = j.at("probs");
    if (rows.empty()) throw DataError("report: empty curve");
    c.probs = Tensor(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < c.probs.rows; ++r)
        for (std::size_t col = 0; col < c.probs.cols; ++col)
            c.probs.at(r, col) = rows[r][col].get<double>();
    return c;
}

inline Json summary_json(const SrpSlideSummary& s) {
    Json j;
    if (s.msk)
        j["msk"] = *s.msk;
    else
        j["msk"] = nullptr;
    j["reached"] = s.reached;
    j["aukc"] = s.aukc;
    return j;
}

inline Json shi_json(const ShiReport& r) {
    Json j;
    j["msk_cond_base"] = r.msk_cond_base ? Json(*r.msk_cond_base) : Json(nullptr);
    j["msk_cond_foci"] = r.msk_cond_foci ? Json(*r.msk_cond_foci) : Json(nullptr);
    j["epsilon"] = r.epsilon;
    j["shi"] = r.value ? Json(*r.value) : Json(nullptr);
    return j;
}

inline Json wilcoxon_json(const WilcoxonResult& w) {
    Json j;
    j["defined"] = w.defined;
    j["n_used"] = w.n_used;
    j["statistic"] = w.statistic;
    j["t_plus"] = w.t_plus;
    j["exact"] = w.exact;
    j["p_two_sided"] = w.p_two_sided;
    return j;
}

inline Json deletion_json(const DeletionCurve& c) {
    Json j;
    j["id"] = c.slide_id;
    j["ranking"] = c.ranking;
    j["full_prob"] = c.full_prob;
    j["grid"] = c.grid;
    j["delta_p"] = c.delta_p;
    j["delta_p_at_0"] = 0.0;
    j["truncated"] = c.truncated;
    j["auc"] = deletion_auc(c);
    return j;
}

inline std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Reports carry their creation time in one dedicated top-level field so
// rerun comparisons can strip it and compare everything else byte for byte.
inline Json report_core(Json report) {
    report.erase("generated_at");
    return report;
}

inline void write_json(const std::string& path, const Json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("report: cannot write " + path);
    os << j.dump(2) << '\n';
}

inline Json read_json(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("report: cannot open " + path);
    Json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw DataError("report: bad JSON in " + path + ": " + e.what());
    }
    return j;
}

inline void append_jsonl(std::ofstream& os, const Json& j) { os << j.dump() << '\n'; }

// ----- CSV flattening -----

inline std::string csv_escape(const std::string& s) {
    bool needs = false;
    for (char c : s)
        if (c == ',' || c == '"' || c == '\n') needs = true;
    if (!needs) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string csv_cell(const Json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return csv_escape(v.get<std::string>());
    return v.dump();
}

// One header row from the first record's keys, one line per record; every
// record must be a flat object with the same keys.
inline std::string csv_flatten(const Json& rows) {
    if (!rows.is_array() || rows.empty())
        throw ConfigError("csv: need a non-empty array of records");
    std::string out;
    bool first = true;
    for (const auto& [key, value] : rows[0].items()) {
        (void)value;
        if (!first) out += ',';
        out += csv_escape(key);
        first = false;
    }
    out += '\n';
    for (const auto& row : rows) {
        first = true;
        for (const auto& [key, value] : row.items()) {
            (void)key;
            if (!first) out += ',';
            out += csv_cell(value);
            first = false;
        }
        out += '\n';
    }
    return out;
}

// ----- seed merging -----

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

// Sample statistics over per-seed values; absent entries (e.g. an undefined
// conditional mean) are dropped and counted separately.
inline MeanStd merge_values(const std::vector<double>& values) {
    MeanStd m;
    m.n = values.size();
    if (values.empty()) return m;
    m.mean = mean_of(values);
    m.std = sample_std(values);
    return m;
}

inline Json mean_std_json(const MeanStd& m) {
    Json j;
    j["mean"] = m.mean;
    j["std"] = m.std;
    j["n"] = m.n;
    return j;
}

// ----- SVG plots -----

struct PlotSeries {
    std::string name;
    bool dashed = false;
    std::vector<double> xs;
    std::vector<double> ys;
    std::vector<double> lo; // optional band, empty or same length as ys
    std::vector<double> hi;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace detail

// Self-contained line plot: one polyline per series, a translucent band for
// series that carry one, and an optional dotted horizontal threshold line.
inline std::string svg_plot(const std::string& title, const std::string& x_label,
                            const std::string& y_label,
                            const std::vector<PlotSeries>& series,
                            std::optional<double> threshold = std::nullopt) {
    if (series.empty()) throw ConfigError("svg: no series to plot");
    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    bool seen = false;
    auto widen = [&](double x, double y) {
        if (!seen) {
            x_min = x_max = x;
            y_min = y_max = y;
            seen = true;
            return;
        }
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
    };
    for (const auto& s : series) {
        if (s.xs.size() != s.ys.size() || s.xs.empty())
            throw ConfigError("svg: series " + s.name + " has bad shape");
        if (!s.lo.empty() && (s.lo.size() != s.ys.size() || s.hi.size() != s.ys.size()))
            throw ConfigError("svg: series " + s.name + " has a bad band");
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            widen(s.xs[i], s.ys[i]);
            if (!s.lo.empty()) {
                widen(s.xs[i], s.lo[i]);
                widen(s.xs[i], s.hi[i]);
            }
        }
    }
    if (threshold) widen(x_min, *threshold);
    if (x_max == x_min) x_max = x_min + 1.0;
    if (y_max == y_min) y_max = y_min + 1.0;
    const double pad_x = 0.05 * (x_max - x_min);
    const double pad_y = 0.05 * (y_max - y_min);
    x_min -= pad_x;
    x_max += pad_x;
    y_min -= pad_y;
    y_max += pad_y;

    const double w = 640.0, h = 420.0;
    const double ml = 60.0, mr = 20.0, mt = 40.0, mb = 50.0;
    auto px = [&](double x) {
        return ml + (x - x_min) / (x_max - x_min) * (w - ml - mr);
    };
    auto py = [&](double y) {
        return h - mb - (y - y_min) / (y_max - y_min) * (h - mt - mb);
    };

    static const char* palette[] = {"#1f6f8b", "#c0502a", "#4a7c3a",
                                    "#7b4a9e", "#9e7b2a", "#555555"};
    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
           "viewBox=\"0 0 640 420\">\n";
    out += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
           "font-family=\"sans-serif\">" +
           detail::xml_escape(title) + "</text>\n";

    out += "<line x1=\"" + detail::fmt_g(ml) + "\" y1=\"" + detail::fmt_g(h - mb) +
           "\" x2=\"" + detail::fmt_g(w - mr) + "\" y2=\"" + detail::fmt_g(h - mb) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + detail::fmt_g(ml) + "\" y1=\"" + detail::fmt_g(mt) +
           "\" x2=\"" + detail::fmt_g(ml) + "\" y2=\"" + detail::fmt_g(h - mb) +
           "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double fx = x_min + (x_max - x_min) * t / 4.0;
        const double fy = y_min + (y_max - y_min) * t / 4.0;
        out += "<text x=\"" + detail::fmt_g(px(fx)) + "\" y=\"" +
               detail::fmt_g(h - mb + 18.0) +
               "\" text-anchor=\"middle\" font-size=\"11\" "
               "font-family=\"sans-serif\">" +
               detail::fmt_g(fx) + "</text>\n";
        out += "<text x=\"" + detail::fmt_g(ml - 8.0) + "\" y=\"" +
               detail::fmt_g(py(fy) + 4.0) +
               "\" text-anchor=\"end\" font-size=\"11\" "
               "font-family=\"sans-serif\">" +
               detail::fmt_g(fy) + "</text>\n";
    }
    out += "<text x=\"" + detail::fmt_g((ml + w - mr) / 2.0) + "\" y=\"" +
           detail::fmt_g(h - 12.0) +
           "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" +
           detail::xml_escape(x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"" + detail::fmt_g((mt + h - mb) / 2.0) +
           "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 16 " +
           detail::fmt_g((mt + h - mb) / 2.0) + ")\">" +
           detail::xml_escape(y_label) + "</text>\n";

    if (threshold) {
        out += "<line x1=\"" + detail::fmt_g(ml) + "\" y1=\"" +
               detail::fmt_g(py(*threshold)) + "\" x2=\"" + detail::fmt_g(w - mr) +
               "\" y2=\"" + detail::fmt_g(py(*threshold)) +
               "\" stroke=\"#888888\" stroke-dasharray=\"2,4\"/>\n";
    }

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const std::string color = palette[si % 6];
        if (!s.lo.empty()) {
            std::string pts;
            for (std::size_t i = 0; i < s.xs.size(); ++i)
                pts += detail::fmt_g(px(s.xs[i])) + "," +
                       detail::fmt_g(py(s.hi[i])) + " ";
            for (std::size_t i = s.xs.size(); i-- > 0;)
                pts += detail::fmt_g(px(s.xs[i])) + "," +
                       detail::fmt_g(py(s.lo[i])) + " ";
            out += "<polygon points=\"" + pts + "\" fill=\"" + color +
                   "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
        }
        if (s.xs.size() == 1) {
            out += "<circle cx=\"" + detail::fmt_g(px(s.xs[0])) + "\" cy=\"" +
                   detail::fmt_g(py(s.ys[0])) + "\" r=\"3.5\" fill=\"" + color +
                   "\"/>\n";
        } else {
            std::string pts;
            for (std::size_t i = 0; i < s.xs.size(); ++i)
                pts += detail::fmt_g(px(s.xs[i])) + "," +
                       detail::fmt_g(py(s.ys[i])) + " ";
            out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
                   "\" stroke-width=\"1.6\"" +
                   (s.dashed ? " stroke-dasharray=\"6,4\"" : "") + "/>\n";
        }
        out += "<text x=\"" + detail::fmt_g(w - mr - 6.0) + "\" y=\"" +
               detail::fmt_g(mt + 16.0 * static_cast<double>(si) + 12.0) +
               "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\" "
               "fill=\"" +
               color + "\">" + detail::xml_escape(s.name) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("report: cannot write " + path);
    os << content;
}

inline std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("report: cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(is),
                       std::istreambuf_iterator<char>());
}

} // namespace foci
