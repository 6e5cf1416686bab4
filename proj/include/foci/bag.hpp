#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "foci/errors.hpp"
#include "foci/rng.hpp"
#include "foci/tensor.hpp"

namespace foci {

// One multiple-instance sample: a variable-length set of instance feature
// rows plus their 2-D pixel coordinates and a bag-level class label.
struct Bag {
    std::string id;
    Tensor features;  // n_real x d
    Tensor coords;    // n_real x 2
    std::size_t label = 0;
    std::size_t n_real = 0;
};

struct Splits {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

struct Dataset {
    std::vector<Bag> bags;
    std::size_t num_classes = 2;
    std::size_t feature_dim = 0;
    Splits splits;

    const Bag* find(const std::string& id) const {
        for (const auto& b : bags)
            if (b.id == id) return &b;
        return nullptr;
    }
};

// Ground-truth planted-evidence instance indices per bag id, in the bag's
// current index space.
using EvidenceTruth = std::map<std::string, std::vector<std::size_t>>;

struct SynthConfig {
    std::size_t n_slides = 200;
    std::size_t tiles_min = 64;
    std::size_t tiles_max = 128;
    std::size_t d = 32;
    std::size_t num_classes = 2;
    std::size_t evidence_min = 4;
    std::size_t evidence_max = 8;
    double evidence_separation = 4.0;
    double noise_sigma = 1.0;
    // Unit-square canvas keeps the spatial-compactness loss at its intended
    // "light regularizer" magnitude relative to the confidence losses.
    double spatial_cluster_radius = 0.05;
    double canvas = 1.0;
    std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& cfg) {
    if (cfg.n_slides == 0) throw ConfigError("generator: n_slides must be positive");
    if (cfg.tiles_min == 0 || cfg.tiles_min > cfg.tiles_max)
        throw ConfigError("generator: bad tiles_per_bag range");
    if (cfg.evidence_min > cfg.evidence_max || cfg.evidence_max > cfg.tiles_min)
        throw ConfigError("generator: evidence_count range exceeds tiles_per_bag");
    if (cfg.d == 0) throw ConfigError("generator: d must be positive");
    if (cfg.num_classes != 2) throw ConfigError("generator: only two classes supported");
    if (!(cfg.evidence_separation >= 0.0))
        throw ConfigError("generator: evidence_separation must be nonnegative");
    if (!(cfg.noise_sigma > 0.0))
        throw ConfigError("generator: noise_sigma must be positive");
    if (!(cfg.spatial_cluster_radius > 0.0))
        throw ConfigError("generator: spatial_cluster_radius must be positive");
}

namespace detail {

// Values destined for the f32 on-disk format are snapped to f32 precision at
// generation time so save/load round-trips are bit-exact. The volatile
// round-trip is load-bearing: gcc 11 -O3 SLP-vectorizes paired stores and
// illegally elides a plain double->float->double cast chain.
inline double as_f32(double v) {
    volatile float f = static_cast<float>(v);
    return static_cast<double>(f);
}

inline std::string slide_name(std::size_t i) {
    std::ostringstream os;
    os << "slide_" << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

} // namespace detail

// Planted-evidence substrate: every instance is background Gaussian noise
// except `evidence_count` instances whose mean is shifted +/- separation/2
// along feature axis 0 by class, with their coordinates gathered inside one
// random disc per bag. Labels alternate so classes are exactly balanced.
inline std::pair<Dataset, EvidenceTruth> generate_synthetic(const SynthConfig& cfg) {
    validate(cfg);
    Dataset ds;
    ds.num_classes = cfg.num_classes;
    ds.feature_dim = cfg.d;
    EvidenceTruth truth;

    for (std::size_t s = 0; s < cfg.n_slides; ++s) {
        Rng rng(mix_keys(cfg.seed, 0x6261675fULL, s));
        Bag bag;
        bag.id = detail::slide_name(s);
        bag.label = s % 2;
        bag.n_real =
            cfg.tiles_min + static_cast<std::size_t>(
                                rng.below(cfg.tiles_max - cfg.tiles_min + 1));

        const std::size_t n_evidence =
            cfg.evidence_min + static_cast<std::size_t>(
                                   rng.below(cfg.evidence_max - cfg.evidence_min + 1));
        std::vector<std::size_t> order(bag.n_real);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<std::size_t> evidence(order.begin(), order.begin() + n_evidence);
        std::sort(evidence.begin(), evidence.end());

        const double mean0 = (bag.label == 1 ? 0.5 : -0.5) * cfg.evidence_separation;
        bag.features = Tensor(bag.n_real, cfg.d);
        for (std::size_t i = 0; i < bag.n_real; ++i)
            for (std::size_t j = 0; j < cfg.d; ++j)
                bag.features.at(i, j) =
                    detail::as_f32(cfg.noise_sigma * rng.gaussian());
        for (std::size_t idx : evidence)
            bag.features.at(idx, 0) =
                detail::as_f32(mean0 + cfg.noise_sigma * rng.gaussian());

        const double cx = rng.uniform(0.0, cfg.canvas);
        const double cy = rng.uniform(0.0, cfg.canvas);
        bag.coords = Tensor(bag.n_real, 2);
        for (std::size_t i = 0; i < bag.n_real; ++i) {
            bag.coords.at(i, 0) = detail::as_f32(rng.uniform(0.0, cfg.canvas));
            bag.coords.at(i, 1) = detail::as_f32(rng.uniform(0.0, cfg.canvas));
        }
        for (std::size_t idx : evidence) {
            const double r = cfg.spatial_cluster_radius * std::sqrt(rng.uniform());
            const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            bag.coords.at(idx, 0) = detail::as_f32(cx + r * std::cos(theta));
            bag.coords.at(idx, 1) = detail::as_f32(cy + r * std::sin(theta));
        }

        truth[bag.id] = std::move(evidence);
        ds.bags.push_back(std::move(bag));
    }

    // 70/15/15 split over a seed-keyed shuffle of bag order.
    std::vector<std::size_t> perm(cfg.n_slides);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng split_rng(mix_keys(cfg.seed, 0x73706c69ULL, 0));
    split_rng.shuffle(perm);
    const std::size_t n_train = (cfg.n_slides * 70) / 100;
    const std::size_t n_val = (cfg.n_slides * 15) / 100;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const std::string& id = ds.bags[perm[i]].id;
        if (i < n_train)
            ds.splits.train.push_back(id);
        else if (i < n_train + n_val)
            ds.splits.val.push_back(id);
        else
            ds.splits.test.push_back(id);
    }
    return {std::move(ds), std::move(truth)};
}

// Keeps the n_cap instances with the largest feature L2 norm, reordered by
// descending norm with ties broken by original index ascending. `kept_out`
// (optional) receives the original index of each surviving row.
inline Bag prefilter_topnorm(const Bag& bag, std::size_t n_cap,
                             std::vector<std::size_t>* kept_out = nullptr) {
    if (n_cap == 0) throw ConfigError("prefilter: n_cap must be positive");
    std::vector<std::size_t> order(bag.n_real);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> norm_sq(bag.n_real);
    for (std::size_t i = 0; i < bag.n_real; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < bag.features.cols; ++j) {
            const double v = bag.features.at(i, j);
            s += v * v;
        }
        norm_sq[i] = s;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norm_sq[a] > norm_sq[b]; });
    if (order.size() > n_cap) order.resize(n_cap);

    Bag out;
    out.id = bag.id;
    out.label = bag.label;
    out.n_real = order.size();
    out.features = Tensor(out.n_real, bag.features.cols);
    out.coords = Tensor(out.n_real, 2);
    for (std::size_t r = 0; r < order.size(); ++r) {
        std::copy(bag.features.row_ptr(order[r]),
                  bag.features.row_ptr(order[r]) + bag.features.cols,
                  out.features.row_ptr(r));
        out.coords.at(r, 0) = bag.coords.at(order[r], 0);
        out.coords.at(r, 1) = bag.coords.at(order[r], 1);
    }
    if (kept_out) *kept_out = std::move(order);
    return out;
}

// Rewrites truth indices into the filtered index space; evidence rows that
// were filtered away are dropped.
inline std::vector<std::size_t> remap_indices(const std::vector<std::size_t>& truth,
                                              const std::vector<std::size_t>& kept) {
    std::vector<std::size_t> out;
    for (std::size_t new_idx = 0; new_idx < kept.size(); ++new_idx)
        if (std::find(truth.begin(), truth.end(), kept[new_idx]) != truth.end())
            out.push_back(new_idx);
    return out;
}

// Instance-budget rule K = max(k_min, floor(alpha * n_real)).
inline std::size_t adaptive_k(std::size_t n_real, double alpha, std::size_t k_min) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw ConfigError("adaptive_k: alpha must be in (0, 1]");
    if (k_min == 0) throw ConfigError("adaptive_k: k_min must be positive");
    const auto scaled =
        static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n_real)));
    return std::max(k_min, scaled);
}

} // namespace foci
