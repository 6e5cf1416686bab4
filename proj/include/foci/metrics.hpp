#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "foci/errors.hpp"

namespace foci {

// ROC AUC via the Mann-Whitney statistic with midranks, so ties contribute
// exactly 0.5 per tied pair.
inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<std::size_t>& labels) {
    if (scores.size() != labels.size())
        throw ConfigError("roc_auc: score/label size mismatch");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (std::size_t l : labels) {
        if (l > 1) throw ConfigError("roc_auc: labels must be 0 or 1");
        n_pos += l;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("roc_auc: both classes must be present");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double u = rank_sum_pos -
                     0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct WilcoxonResult {
    double statistic = 0.0;   // min(T+, T-) over nonzero differences
    double t_plus = 0.0;
    std::size_t n_used = 0;   // differences remaining after dropping zeros
    bool defined = false;     // false when every difference is zero
    double p_two_sided = 1.0;
    bool exact = false;       // enumeration (n <= 15) vs normal approximation
};

// Paired Wilcoxon signed-rank test. Zero differences are dropped, tied
// absolute values receive average ranks, and for n <= 15 the two-sided p is
// exact over all 2^n sign assignments: p = min(1, 2 min(P(T+ <= t), P(T+ >= t))).
// Larger n falls back to the normal approximation with tie correction.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& diffs) {
    WilcoxonResult res;
    std::vector<double> abs_d;
    std::vector<bool> positive;
    for (double d : diffs) {
        if (d == 0.0) continue;
        abs_d.push_back(std::abs(d));
        positive.push_back(d > 0.0);
    }
    const std::size_t n = abs_d.size();
    res.n_used = n;
    if (n == 0) return res;
    res.defined = true;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return abs_d[a] < abs_d[b]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = midrank;
        i = j + 1;
    }

    double t_plus = 0.0, t_minus = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        (positive[k] ? t_plus : t_minus) += rank[k];
    res.t_plus = t_plus;
    res.statistic = std::min(t_plus, t_minus);

    if (n <= 15) {
        res.exact = true;
        const std::uint64_t total = std::uint64_t{1} << n;
        std::uint64_t le = 0, ge = 0;
        const double tol = 1e-9;
        for (std::uint64_t bits = 0; bits < total; ++bits) {
            double t = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                if (bits & (std::uint64_t{1} << k)) t += rank[k];
            if (t <= t_plus + tol) ++le;
            if (t >= t_plus - tol) ++ge;
        }
        const double p = 2.0 * static_cast<double>(std::min(le, ge)) /
                         static_cast<double>(total);
        res.p_two_sided = std::min(1.0, p);
    } else {
        const double dn = static_cast<double>(n);
        const double mean = dn * (dn + 1.0) / 4.0;
        double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0;
        // tie correction: subtract sum(t^3 - t)/48 over tie groups
        i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
            const double t = static_cast<double>(j - i + 1);
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        const double z =
            (res.statistic - mean + 0.5) / std::sqrt(std::max(var, 1e-12));
        res.p_two_sided = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
    }
    return res;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace foci
