#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "foci/bag.hpp"
#include "foci/metrics.hpp"
#include "foci/models.hpp"
#include "foci/ranking.hpp"

namespace foci {

struct SrpConfig {
    double kappa = 0.9;      // operating confidence threshold
    std::size_t k_max = 256; // reveal budget
    std::size_t n_cap = 1024; // pre-filter budget applied before ranking
};

inline void validate(const SrpConfig& cfg) {
    if (!(cfg.kappa > 0.0 && cfg.kappa < 1.0))
        throw ConfigError("srp: kappa must lie in (0,1)");
    if (cfg.k_max == 0) throw ConfigError("srp: k_max must be positive");
    if (cfg.n_cap == 0) throw ConfigError("srp: n_cap must be positive");
}

// Reveal counts: every integer up to min(32, budget), then doubling steps,
// ending exactly at min(k_max, n_real). Dense where minimal sufficient
// counts typically live, sparse after.
inline std::vector<std::size_t> reveal_schedule(std::size_t n_real, std::size_t k_max) {
    if (n_real == 0) throw ConfigError("srp: empty bag");
    if (k_max == 0) throw ConfigError("srp: k_max must be positive");
    const std::size_t last = std::min(k_max, n_real);
    std::vector<std::size_t> steps;
    for (std::size_t k = 1; k <= std::min<std::size_t>(32, last); ++k)
        steps.push_back(k);
    for (std::size_t k = 64; k < last; k *= 2) steps.push_back(k);
    if (steps.back() != last) steps.push_back(last);
    return steps;
}

// Confidence trace of one slide under one ranking: class probabilities of
// the frozen masked forward at each scheduled reveal count.
struct KCurve {
    std::string slide_id;
    std::size_t n_real = 0;
    std::vector<std::size_t> schedule;
    Tensor probs;        // m x C, row j = p(.) at schedule[j]
    std::string ranking; // source tag: "native" | "foci" | "random" | ...
};

inline void validate_schedule(const std::vector<std::size_t>& schedule,
                              std::size_t n_real) {
    if (schedule.empty()) throw ConfigError("srp: empty schedule");
    if (schedule.front() == 0) throw ConfigError("srp: schedule starts at zero");
    for (std::size_t j = 1; j < schedule.size(); ++j)
        if (schedule[j] <= schedule[j - 1])
            throw ConfigError("srp: schedule must be strictly increasing");
    if (schedule.back() > n_real)
        throw ConfigError("srp: schedule exceeds the tile count");
}

// Reveals tiles in descending score order (ties by original index) and runs
// the frozen masked forward at each scheduled count.
inline KCurve reveal_curve(const Backbone& model, const Bag& bag,
                           const std::vector<double>& scores,
                           const std::vector<std::size_t>& schedule,
                           const std::string& ranking_tag) {
    if (scores.size() != bag.n_real)
        throw ConfigError("srp: ranking must cover every tile");
    validate_schedule(schedule, bag.n_real);
    const auto order = ranking_order(scores);
    KCurve curve;
    curve.slide_id = bag.id;
    curve.n_real = bag.n_real;
    curve.schedule = schedule;
    curve.ranking = ranking_tag;
    curve.probs = Tensor(schedule.size(), model.num_classes());
    for (std::size_t j = 0; j < schedule.size(); ++j) {
        PaddingMask mask;
        mask.excluded.assign(bag.n_real, 1);
        for (std::size_t r = 0; r < schedule[j]; ++r) mask.excluded[order[r]] = 0;
        const BackboneOutput out = forward(model, bag, mask);
        for (std::size_t c = 0; c < model.num_classes(); ++c)
            curve.probs.at(j, c) = out.probs.at(0, c);
    }
    return curve;
}

// Smallest scheduled count whose masked forward both picks the true class
// and clears the confidence threshold; absent when no step qualifies.
inline std::optional<std::size_t> msk(const KCurve& curve, std::size_t y, double kappa) {
    if (!(kappa > 0.0 && kappa < 1.0)) throw ConfigError("srp: kappa must lie in (0,1)");
    if (y >= curve.probs.cols) throw ConfigError("srp: label out of range");
    for (std::size_t j = 0; j < curve.schedule.size(); ++j) {
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < curve.probs.cols; ++c)
            if (curve.probs.at(j, c) > curve.probs.at(j, argmax)) argmax = c;
        if (argmax == y && curve.probs.at(j, y) >= kappa) return curve.schedule[j];
    }
    return std::nullopt;
}

struct SrpSlideSummary {
    std::optional<std::size_t> msk;
    bool reached = false;
    double aukc = 0.0;
};

// Trapezoidal area under the true-class confidence curve over the revealed
// fraction, normalized by the largest fraction reached. Segments run only
// between evaluated points; nothing is extrapolated down to fraction zero.
inline double aukc(const KCurve& curve, std::size_t y) {
    if (curve.schedule.size() < 2)
        throw ConfigError("srp: area needs at least two reveal steps");
    if (y >= curve.probs.cols) throw ConfigError("srp: label out of range");
    if (curve.n_real == 0) throw ConfigError("srp: empty bag");
    const double n = static_cast<double>(curve.n_real);
    double area = 0.0;
    for (std::size_t j = 0; j + 1 < curve.schedule.size(); ++j) {
        const double rho_a = static_cast<double>(curve.schedule[j]) / n;
        const double rho_b = static_cast<double>(curve.schedule[j + 1]) / n;
        area += 0.5 * (curve.probs.at(j, y) + curve.probs.at(j + 1, y)) * (rho_b - rho_a);
    }
    return area / (static_cast<double>(curve.schedule.back()) / n);
}

inline SrpSlideSummary summarize_slide(const KCurve& curve, std::size_t y, double kappa) {
    SrpSlideSummary s;
    s.msk = msk(curve, y, kappa);
    s.reached = s.msk.has_value();
    s.aukc = aukc(curve, y);
    return s;
}

inline double reach(const std::vector<SrpSlideSummary>& summaries) {
    if (summaries.empty()) throw ConfigError("srp: no slides to aggregate");
    std::size_t reached = 0;
    for (const auto& s : summaries) reached += s.reached ? 1 : 0;
    return static_cast<double>(reached) / static_cast<double>(summaries.size());
}

// Conditional mean reveal count over the slides that reached the threshold;
// absent when none did.
inline std::optional<double> msk_cond(const std::vector<SrpSlideSummary>& summaries) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : summaries)
        if (s.msk) {
            total += static_cast<double>(*s.msk);
            ++count;
        }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

inline double mean_aukc(const std::vector<SrpSlideSummary>& summaries) {
    if (summaries.empty()) throw ConfigError("srp: no slides to aggregate");
    double total = 0.0;
    for (const auto& s : summaries) total += s.aukc;
    return total / static_cast<double>(summaries.size());
}

// ----- selection headroom -----

inline constexpr double kShiEpsilon = 1e-8;

struct ShiReport {
    std::optional<double> msk_cond_base;
    std::optional<double> msk_cond_foci;
    double epsilon = kShiEpsilon;
    std::optional<double> value;
};

// Signed compression of the rationale ranking against the backbone's own:
// (base - foci) / (base + epsilon). Undefined when the baseline never
// reaches the threshold; a baseline that reaches while the rationale never
// does scores as no compression achieved at the largest deficit.
inline ShiReport shi(std::optional<double> base, std::optional<double> foci,
                     double epsilon = kShiEpsilon) {
    ShiReport r;
    r.msk_cond_base = base;
    r.msk_cond_foci = foci;
    r.epsilon = epsilon;
    if (base && foci) r.value = (*base - *foci) / (*base + epsilon);
    return r;
}

// ----- deletion perturbation -----

inline constexpr std::size_t kDeletionGrid[] = {16, 32, 64, 128, 256};
inline constexpr double kDeletionNorm = 256.0;

struct DeletionCurve {
    std::string slide_id;
    std::string ranking;
    double full_prob = 0.0;            // p_y with nothing deleted
    std::vector<std::size_t> grid;     // evaluated deletion counts (< n_real)
    std::vector<double> delta_p;       // confidence drop per count; drop at 0 is 0
    bool truncated = false;            // bag too small for the full grid
};

// Confidence drop when the top-K ranked tiles are removed, over a fixed
// count grid truncated to counts the bag can afford.
inline DeletionCurve deletion_curve(const Backbone& model, const Bag& bag,
                                    const std::vector<double>& scores, std::size_t y,
                                    const std::string& ranking_tag) {
    if (scores.size() != bag.n_real)
        throw ConfigError("deletion: ranking must cover every tile");
    if (y >= model.num_classes()) throw ConfigError("deletion: label out of range");
    DeletionCurve curve;
    curve.slide_id = bag.id;
    curve.ranking = ranking_tag;
    curve.full_prob = forward(model, bag).probs.at(0, y);
    const auto order = ranking_order(scores);
    for (std::size_t k : kDeletionGrid) {
        if (k >= bag.n_real) {
            curve.truncated = true;
            break;
        }
        PaddingMask mask;
        mask.excluded.assign(bag.n_real, 0);
        for (std::size_t r = 0; r < k; ++r) mask.excluded[order[r]] = 1;
        curve.grid.push_back(k);
        curve.delta_p.push_back(curve.full_prob - forward(model, bag, mask).probs.at(0, y));
    }
    return curve;
}

// Trapezoidal area of the confidence drop between consecutive evaluated
// counts, normalized by the full deletion budget. The zero-count anchor is
// implied, not integrated.
inline double deletion_auc(const DeletionCurve& curve) {
    double area = 0.0;
    for (std::size_t j = 0; j + 1 < curve.grid.size(); ++j)
        area += 0.5 * (curve.delta_p[j] + curve.delta_p[j + 1]) *
                static_cast<double>(curve.grid[j + 1] - curve.grid[j]);
    return area / kDeletionNorm;
}

// ----- selected-only downstream evaluation -----

using RankingFn = std::function<std::vector<double>(const Bag&)>;

// Per-bag random control scores, reproducible and independent across bags.
inline std::vector<double> random_ranking(const Bag& bag, std::uint64_t seed) {
    return random_scores(bag.n_real, mix_keys(seed, hash64(bag.id), 0));
}

struct SelectedOnlyConfig {
    std::size_t k = 32;       // fixed budget; 0 means use the adaptive rule
    double alpha = 0.03;      // adaptive fraction
    std::size_t k_min = 16;   // adaptive floor
};

// Classification AUC over a split when every bag is restricted to its top-K
// ranked tiles before the frozen forward.
inline double selected_only_eval(const Backbone& model, const Dataset& data,
                                 const std::vector<std::string>& split,
                                 const RankingFn& ranking, const SelectedOnlyConfig& cfg) {
    if (split.empty()) throw ConfigError("selected-only: empty split");
    std::vector<double> scores;
    std::vector<std::size_t> labels;
    for (const auto& id : split) {
        const Bag* bag = data.find(id);
        if (!bag) throw DataError("dataset: unknown bag id " + id);
        const std::size_t budget =
            cfg.k > 0 ? cfg.k : adaptive_k(bag->n_real, cfg.alpha, cfg.k_min);
        const auto keep = topk_indices(ranking(*bag), std::min(budget, bag->n_real));
        PaddingMask mask;
        mask.excluded.assign(bag->n_real, 1);
        for (std::size_t i : keep) mask.excluded[i] = 0;
        scores.push_back(forward(model, *bag, mask).probs.at(0, 1));
        labels.push_back(bag->label);
    }
    return roc_auc(scores, labels);
}

// ----- predicted-class variant -----

// Rewrites a binary curve so downstream summaries track the full-bag
// predicted class: for misclassified slides the two probability columns
// swap, making column y carry p of the predicted class.
inline KCurve predicted_class_curve(const KCurve& curve, std::size_t y_hat,
                                    std::size_t y) {
    if (curve.probs.cols != 2)
        throw ConfigError("predicted-class reveal needs a binary classifier");
    if (y_hat >= 2 || y >= 2) throw ConfigError("predicted-class: label out of range");
    KCurve out = curve;
    if (y_hat == y) return out;
    for (std::size_t j = 0; j < out.probs.rows; ++j)
        std::swap(out.probs.at(j, 0), out.probs.at(j, 1));
    return out;
}

// ----- planted-evidence recall -----

// Fraction of the planted evidence present among the top-K ranked tiles.
inline double evidence_recall(const std::vector<double>& scores,
                              const std::vector<std::size_t>& evidence, std::size_t k) {
    if (evidence.empty()) throw ConfigError("recall: no evidence indices");
    const auto top = topk_indices(scores, k);
    std::size_t hit = 0;
    for (std::size_t e : evidence)
        if (std::find(top.begin(), top.end(), e) != top.end()) ++hit;
    return static_cast<double>(hit) / static_cast<double>(evidence.size());
}

} // namespace foci
