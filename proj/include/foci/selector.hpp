#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "foci/bag.hpp"
#include "foci/checkpoint.hpp"
#include "foci/graph.hpp"
#include "foci/models.hpp"
#include "foci/params.hpp"
#include "foci/ranking.hpp"
#include "foci/rng.hpp"

namespace foci {

enum class GateMode { Soft, HardTopK };

struct GateConfig {
    GateMode mode = GateMode::HardTopK;
    double temperature = 0.5; // soft mode
    std::size_t k = 32;       // hard mode
};

// Per-tile scoring head: a 2-layer MLP (h -> h/2 -> 1, ReLU) over the frozen
// backbone's projected tokens. One scalar selection logit per tile.
class SelectorHead {
public:
    SelectorHead(std::size_t h, std::uint64_t seed) : h_(h) {
        if (h < 2) throw ConfigError("selector: token width must be at least 2");
        const std::size_t hidden = h / 2;
        Rng rng(mix_keys(seed, hash64("selector"), 0));
        w1_ = params_.add("sel.w1", linear_init(h, hidden, rng));
        b1_ = params_.add("sel.b1", Tensor(1, hidden), false);
        w2_ = params_.add("sel.w2", linear_init(hidden, 1, rng));
        b2_ = params_.add("sel.b2", Tensor(1, 1), false);
    }

    std::size_t h() const { return h_; }
    std::size_t hidden() const { return h_ / 2; }
    ParamList& params() { return params_; }
    const ParamList& params() const { return params_; }

    // N x 1 selection logits from N x h tokens.
    NodePtr scores(const NodePtr& toks) const {
        if (toks->value.cols != h_)
            throw ConfigError("selector: token width " + std::to_string(toks->value.cols) +
                              " does not match head width " + std::to_string(h_));
        return add(matmul(relu(add(matmul(toks, w1_), b1_)), w2_), b2_);
    }

private:
    std::size_t h_;
    ParamList params_;
    NodePtr w1_, b1_, w2_, b2_;
};

// Selection logits for a whole bag through the frozen projection.
inline std::vector<double> score_tiles(const SelectorHead& head, const Backbone& model,
                                       const Bag& bag) {
    return head.scores(constant(model.tokens_value(bag)))->value.data;
}

// Uniform (0,1) gate noise, one value per tile, keyed so the stream is
// reproducible per (run seed, slide, epoch) and independent across all three.
inline Tensor gate_noise(std::size_t n, std::uint64_t seed, const std::string& slide_id,
                         std::uint64_t epoch) {
    Rng rng(mix_keys(seed, hash64(slide_id), epoch));
    Tensor eps(n, 1);
    for (double& v : eps.data) v = rng.uniform();
    return eps;
}

// Noiseless evaluation uses the distribution median, which cancels the noise
// term exactly: z = sigmoid(a / T).
inline Tensor median_noise(std::size_t n) { return Tensor(n, 1, 0.5); }

// z_i = sigmoid((a_i + log eps_i - log(1 - eps_i)) / T) over an N x 1 logit
// column. Differentiable in a; approaches a step function as T -> 0.
inline NodePtr soft_gate(const NodePtr& a, const Tensor& eps, double temperature) {
    if (!(temperature > 0.0))
        throw ConfigError("soft gate: temperature must be positive");
    if (!eps.same_shape(a->value))
        throw ConfigError("soft gate: noise shape " + shape_str(eps) +
                          " does not match logits " + shape_str(a->value));
    Tensor shift(eps.rows, eps.cols);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double e = eps.data[i];
        if (!(e > 0.0 && e < 1.0))
            throw ConfigError("soft gate: noise must lie strictly inside (0,1)");
        shift.data[i] = std::log(e) - std::log1p(-e);
    }
    return sigmoid(scale(add(a, constant(std::move(shift))), 1.0 / temperature));
}

// One gate evaluation over a bag's selection logits. Soft mode fills `z`;
// hard mode fills `mask`, `ste`, and `selected`.
struct GateOutput {
    NodePtr logits;                    // N x 1 selection logits a
    NodePtr z;                         // soft gates in (0,1)
    Tensor mask;                       // hard binary mask m
    NodePtr ste;                       // m with sigmoid-surrogate backward
    std::vector<std::size_t> selected; // hard mode: chosen rows, ascending
    bool clamped = false;              // hard mode: K exceeded the tile count
};

inline GateOutput soft_gate_output(const NodePtr& a, const Tensor& eps,
                                   double temperature) {
    GateOutput g;
    g.logits = a;
    g.z = soft_gate(a, eps, temperature);
    return g;
}

// Keeps the K highest logits (ties by original index ascending) as an exact
// binary mask; the straight-through node forwards the mask unchanged and
// backpropagates sigma'(a_i) per kept-or-dropped coordinate.
inline GateOutput hard_topk_gate(const NodePtr& a, std::size_t k) {
    if (k == 0) throw ConfigError("hard gate: K must be at least 1");
    if (a->value.cols != 1) throw ConfigError("hard gate: logits must be a column");
    const std::size_t n = a->value.rows;
    GateOutput g;
    g.logits = a;
    g.clamped = k > n;
    g.selected = topk_indices(a->value.data, std::min(k, n));
    std::sort(g.selected.begin(), g.selected.end());
    g.mask = Tensor(n, 1);
    for (std::size_t i : g.selected) g.mask.at(i, 0) = 1.0;
    g.ste = ste_gate(g.mask, a);
    return g;
}

// One backbone input view: the token rows it forwards (ascending) and an
// optional per-row weight column carrying the gate's gradient path.
struct View {
    std::vector<std::size_t> rows;
    NodePtr weights; // null means unit weights
};

struct ThreeViews {
    View full, keep, drop;
    bool drop_empty = false;
};

// Wires the full/keep/drop views for one bag. Soft mode forwards every row
// three times, weighting keep by z and drop by 1-z. Hard mode gathers the
// selected rows (weight m~, value 1) and the complement (weight 1-m~, value
// 1), so keep matches a hard exclusion forward exactly while gradients still
// reach the selection logits through the surrogate.
inline ThreeViews build_views(const GateOutput& gate, GateMode mode) {
    const std::size_t n = gate.logits->value.rows;
    ThreeViews v;
    v.full.rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) v.full.rows[i] = i;
    if (mode == GateMode::Soft) {
        if (!gate.z) throw ConfigError("views: soft mode needs soft gates");
        v.keep.rows = v.full.rows;
        v.keep.weights = gate.z;
        v.drop.rows = v.full.rows;
        v.drop.weights = sub(constant(Tensor(n, 1, 1.0)), gate.z);
        return v;
    }
    if (!gate.ste) throw ConfigError("views: hard mode needs a hard mask");
    v.keep.rows = gate.selected;
    v.keep.weights = gather_rows(gate.ste, gate.selected);
    for (std::size_t i = 0; i < n; ++i)
        if (gate.mask.at(i, 0) == 0.0) v.drop.rows.push_back(i);
    v.drop_empty = v.drop.rows.empty();
    if (!v.drop_empty)
        v.drop.weights = sub(constant(Tensor(v.drop.rows.size(), 1, 1.0)),
                             gather_rows(gate.ste, v.drop.rows));
    return v;
}

// Frozen-backbone logits for one view over precomputed token rows.
inline NodePtr view_logits(const Backbone& model, const NodePtr& toks, const View& view) {
    if (view.rows.empty()) throw ConfigError("views: empty view");
    bool identity = view.rows.size() == toks->value.rows;
    for (std::size_t i = 0; identity && i < view.rows.size(); ++i)
        identity = view.rows[i] == i;
    const NodePtr rows = identity ? toks : gather_rows(toks, view.rows);
    return view.weights ? model.logits(rows, &view.weights) : model.logits(rows);
}

// ----- checkpoint plumbing -----

namespace detail {

inline Section section_of(const SelectorHead& head) {
    Section s;
    s.tag = "FSEL";
    s.hypers = {static_cast<std::uint32_t>(head.h())};
    for (const auto& r : head.params().refs())
        s.tensors.emplace_back(r.name, r.node->value);
    return s;
}

} // namespace detail

// One file holds the frozen backbone and its selector head.
inline void save_selector(const std::string& path, const Backbone& model,
                          const SelectorHead& head) {
    save_checkpoint(path, {detail::section_of(model), detail::section_of(head)});
}

inline std::unique_ptr<SelectorHead> load_selector(const std::string& path) {
    for (const auto& s : detail::read_sections(path)) {
        if (s.tag != "FSEL") continue;
        if (s.hypers.size() != 1) throw DataError("checkpoint: FSEL header size");
        auto head = std::make_unique<SelectorHead>(s.hypers[0], 0);
        detail::fill_params(head->params(), s, "FSEL");
        return head;
    }
    throw DataError("checkpoint: no selector section in " + path);
}

} // namespace foci
