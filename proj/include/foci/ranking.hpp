#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "foci/rng.hpp"

namespace foci {

// Indices ordered by descending score, ties broken by original index
// ascending. This single order underlies gate selection and reveal order.
inline std::vector<std::size_t> ranking_order(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

// The k top-ranked indices (k clamped to the score count).
inline std::vector<std::size_t> topk_indices(const std::vector<double>& scores,
                                             std::size_t k) {
    auto order = ranking_order(scores);
    if (order.size() > k) order.resize(k);
    return order;
}

// Random ranking control: a seeded score vector independent of any model.
inline std::vector<double> random_scores(std::size_t n, std::uint64_t seed) {
    Rng rng(mix_keys(seed, 0x72616e6bULL, n));
    std::vector<double> s(n);
    for (double& v : s) v = rng.uniform();
    return s;
}

} // namespace foci
