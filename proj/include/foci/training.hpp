#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "foci/bag.hpp"
#include "foci/graph.hpp"
#include "foci/metrics.hpp"
#include "foci/models.hpp"
#include "foci/optim.hpp"
#include "foci/selector.hpp"

namespace foci {

struct LossWeights {
    double suff = 0.5;
    double hinge = 1.0;
    double excl = 0.5;
    double contig = 0.01;
    double budget = 5e-3;
    double entropy = 0.1; // soft mode only
    double tau = 0.9;     // keep-view confidence target
    double beta = 0.2;    // drop-view confidence tolerance
};

inline void validate(const LossWeights& w) {
    for (double l : {w.suff, w.hinge, w.excl, w.contig, w.budget, w.entropy})
        if (!(l >= 0.0)) throw ConfigError("loss: weights must be nonnegative");
    if (!(w.tau > 0.0 && w.tau < 1.0) || !(w.beta > 0.0 && w.beta < 1.0))
        throw ConfigError("loss: tau and beta must lie in (0,1)");
}

// Zeroes one term's weight; used by the one-λ-at-a-time ablation protocol.
inline LossWeights ablated(LossWeights w, const std::string& term) {
    if (term == "suff") w.suff = 0.0;
    else if (term == "hinge") w.hinge = 0.0;
    else if (term == "excl") w.excl = 0.0;
    else if (term == "contig") w.contig = 0.0;
    else if (term == "budget") w.budget = 0.0;
    else if (term == "entropy") w.entropy = 0.0;
    else throw ConfigError("ablate: unknown loss term '" + term + "'");
    return w;
}

struct LossBreakdown {
    double full = 0.0; // monitor, never differentiated
    double suff = 0.0;
    double hinge = 0.0;
    double excl = 0.0;
    double contig = 0.0;
    double budget = 0.0;
    double entropy = 0.0;
    double total = 0.0;
};

// ----- loss terms (graph builders over 1 x C view logits) -----

// Stable cross-entropy: logsumexp(l - max) - (l_y - max).
inline NodePtr cross_entropy(const NodePtr& logits, std::size_t y) {
    if (logits->value.rows != 1 || y >= logits->value.cols)
        throw ConfigError("cross entropy: label out of range");
    double hi = logits->value.data[0];
    for (double v : logits->value.data) hi = std::max(hi, v);
    const NodePtr shifted = add_scalar(logits, -hi);
    return sub(log_op(sum(exp_op(shifted))), pick(shifted, 0, y));
}

inline double cross_entropy_value(const Tensor& logits, std::size_t y) {
    return cross_entropy(constant(logits), y)->value.item();
}

inline NodePtr true_class_prob(const NodePtr& logits, std::size_t y) {
    return pick(softmax_rows(logits), 0, y);
}

inline NodePtr loss_suff(const NodePtr& keep_logits, std::size_t y) {
    return cross_entropy(keep_logits, y);
}

// max(tau - p_keep, 0): pushes keep-view confidence up to the target.
inline NodePtr loss_hinge(const NodePtr& p_keep, double tau) {
    return relu(add_scalar(scale(p_keep, -1.0), tau));
}

// max(p_drop - beta, 0): penalizes residual evidence outside the selection.
inline NodePtr loss_excl(const NodePtr& p_drop, double beta) {
    return relu(add_scalar(p_drop, -beta));
}

// Weighted spatial spread: sum_i z_i ||c_i - mu||^2 / sum_i z_i with mu the
// selection-weighted coordinate centroid. Callers must ensure sum(z) > 0.
inline NodePtr loss_contig(const NodePtr& z, const Tensor& coords) {
    if (z->value.cols != 1 || z->value.rows != coords.rows || coords.cols != 2)
        throw ConfigError("contiguity: weights must be N x 1 over N x 2 coords");
    const NodePtr c = constant(coords);
    const NodePtr inv_mass = recip(sum(z));
    const NodePtr mu = mul(matmul(transpose(z), c), inv_mass); // 1 x 2
    const NodePtr spread = sum_rows(square(sub(c, mu)));       // N x 1
    return mul(sum(mul(z, spread)), inv_mass);
}

// Soft: sum z_i. Hard: sum m~_i, whose forward value is the selected count
// and whose backward is sigma'(a_i) per coordinate.
inline NodePtr loss_budget(const GateOutput& gate, GateMode mode) {
    const NodePtr& g = mode == GateMode::Soft ? gate.z : gate.ste;
    if (!g) throw ConfigError("budget: gate output missing for the active mode");
    return sum(g);
}

// Mean binary entropy of the gates, clamped away from log(0); zero at
// saturated gates, ln 2 at z = 0.5.
inline NodePtr loss_entropy(const NodePtr& z) {
    const NodePtr zc = clamp(z, 1e-12, 1.0 - 1e-12);
    const NodePtr om = sub(constant(Tensor(z->value.rows, z->value.cols, 1.0)), zc);
    const NodePtr t = add(mul(zc, log_op(zc)), mul(om, log_op(om)));
    return scale(mean(t), -1.0);
}

// ----- per-bag selector objective -----

struct BagLoss {
    NodePtr total; // scalar graph node; null when every weight is zero
    LossBreakdown values;
    bool drop_skipped = false;
    bool contig_skipped = false;
};

// Builds the gate, the keep/drop views, and the weighted objective for one
// bag over precomputed frozen tokens. Soft mode needs a noise column.
inline BagLoss selector_bag_loss(const Backbone& model, const SelectorHead& head,
                                 const NodePtr& toks, const Bag& bag,
                                 const GateConfig& gc, const LossWeights& w,
                                 const Tensor* eps = nullptr) {
    BagLoss r;
    const NodePtr a = head.scores(toks);
    GateOutput gate;
    if (gc.mode == GateMode::Soft) {
        if (!eps) throw ConfigError("selector loss: soft mode needs gate noise");
        gate = soft_gate_output(a, *eps, gc.temperature);
    } else {
        gate = hard_topk_gate(a, gc.k);
    }
    const ThreeViews views = build_views(gate, gc.mode);

    const NodePtr keep_logits = view_logits(model, toks, views.keep);
    const NodePtr suff = loss_suff(keep_logits, bag.label);
    const NodePtr hinge = loss_hinge(true_class_prob(keep_logits, bag.label), w.tau);
    r.values.suff = suff->value.item();
    r.values.hinge = hinge->value.item();

    NodePtr excl;
    r.drop_skipped = views.drop_empty;
    if (!views.drop_empty) {
        const NodePtr drop_logits = view_logits(model, toks, views.drop);
        excl = loss_excl(true_class_prob(drop_logits, bag.label), w.beta);
        r.values.excl = excl->value.item();
    }

    const NodePtr gz = gc.mode == GateMode::Soft ? gate.z : gate.ste;
    double mass = 0.0;
    for (double v : gz->value.data) mass += v;
    NodePtr contig;
    r.contig_skipped = !(mass > 0.0);
    if (!r.contig_skipped) {
        contig = loss_contig(gz, bag.coords);
        r.values.contig = contig->value.item();
    }

    const NodePtr budget = loss_budget(gate, gc.mode);
    r.values.budget = budget->value.item();

    NodePtr entropy;
    if (gc.mode == GateMode::Soft) {
        entropy = loss_entropy(gate.z);
        r.values.entropy = entropy->value.item();
    }

    NodePtr total;
    const auto accumulate = [&](const NodePtr& term, double weight) {
        if (!term || weight == 0.0) return;
        const NodePtr scaled = scale(term, weight);
        total = total ? add(total, scaled) : scaled;
    };
    accumulate(suff, w.suff);
    accumulate(hinge, w.hinge);
    accumulate(excl, w.excl);
    accumulate(contig, w.contig);
    accumulate(budget, w.budget);
    accumulate(entropy, w.entropy);
    r.total = total;
    r.values.total = total ? total->value.item() : 0.0;
    return r;
}

// Weighted recombination used to cross-check the recorded total.
inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
    return w.suff * b.suff + w.hinge * b.hinge + w.excl * b.excl +
           w.contig * b.contig + w.budget * b.budget + w.entropy * b.entropy;
}

// ----- backbone pre-training -----

struct BackboneTrainConfig {
    std::size_t epochs = 20;
    double lr = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
};

struct BackboneEpoch {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_auc = 0.0;
};

// Positive-class probability of a full-bag forward, the score used for AUC.
inline double positive_prob(const Backbone& model, const Bag& bag) {
    return forward(model, bag).probs.at(0, 1);
}

inline double dataset_ce(const Backbone& model, const Dataset& data,
                         const std::vector<std::string>& split) {
    double total = 0.0;
    for (const auto& id : split) {
        const Bag* bag = data.find(id);
        if (!bag) throw DataError("dataset: unknown bag id " + id);
        const double p = forward(model, *bag).probs.at(0, bag->label);
        total += -std::log(std::max(p, 1e-300));
    }
    return total / static_cast<double>(split.size());
}

inline double dataset_auc(const Backbone& model, const Dataset& data,
                          const std::vector<std::string>& split) {
    std::vector<double> scores;
    std::vector<std::size_t> labels;
    for (const auto& id : split) {
        const Bag* bag = data.find(id);
        if (!bag) throw DataError("dataset: unknown bag id " + id);
        scores.push_back(positive_prob(model, *bag));
        labels.push_back(bag->label);
    }
    return roc_auc(scores, labels);
}

// Full-bag cross-entropy training of an unfrozen backbone, one bag per step,
// constant learning rate. The model is frozen afterwards.
inline std::vector<BackboneEpoch> train_backbone(Backbone& model, const Dataset& data,
                                                 const BackboneTrainConfig& cfg) {
    if (model.frozen()) throw ConfigError("train: backbone is already frozen");
    if (data.splits.train.empty()) throw ConfigError("train: empty training split");
    AdamW opt(cfg.weight_decay);
    std::vector<BackboneEpoch> history;
    std::vector<Tensor> best_state;
    double best_auc = -1.0;
    double best_ce = std::numeric_limits<double>::infinity();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::string> order = data.splits.train;
        Rng rng(mix_keys(cfg.seed, hash64("backbone-order"), epoch));
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (const auto& id : order) {
            const Bag* bag = data.find(id);
            if (!bag) throw DataError("dataset: unknown bag id " + id);
            model.params().zero_grads();
            const NodePtr toks = model.tokens(constant(bag->features));
            const NodePtr loss = cross_entropy(model.train_logits(toks), bag->label);
            const double lv = loss->value.item();
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at step " +
                                   std::to_string(step) + " (bag " + id + ")");
            backward(loss);
            opt.step(model.params().refs(), cfg.lr);
            epoch_loss += lv;
            ++step;
        }
        BackboneEpoch e;
        e.epoch = epoch;
        e.train_loss = epoch_loss / static_cast<double>(order.size());
        e.val_auc = data.splits.val.empty() ? 0.0 : dataset_auc(model, data, data.splits.val);
        history.push_back(e);
        // Keep the weights with the best validation AUC, breaking ties by
        // validation cross-entropy so saturated-AUC states still rank.
        if (!data.splits.val.empty()) {
            const double vl = dataset_ce(model, data, data.splits.val);
            if (e.val_auc > best_auc || (e.val_auc == best_auc && vl <= best_ce)) {
                best_auc = e.val_auc;
                best_ce = vl;
                best_state.clear();
                for (const auto& r : model.params().refs()) best_state.push_back(r.node->value);
            }
        }
    }
    if (!best_state.empty()) {
        std::size_t i = 0;
        for (auto& r : model.params().refs()) r.node->value = best_state[i++];
    }
    model.freeze();
    return history;
}

// ----- selector training -----

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t warmup_epochs = 5;
    double base_lr = 1e-4;
    double floor_lr = 1e-5;
    double lr_multiplier = 5.0;
    double weight_decay = 0.3;
    std::size_t batch_size = 2;
    GateConfig gate;
    LossWeights weights;
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
    validate(cfg.weights);
    if (cfg.warmup_epochs > cfg.epochs)
        throw ConfigError("train: warmup longer than the epoch budget");
    if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (!(cfg.base_lr > 0.0) || !(cfg.floor_lr > 0.0) || !(cfg.lr_multiplier > 0.0))
        throw ConfigError("train: learning rates must be positive");
    if (cfg.gate.mode == GateMode::Soft && !(cfg.gate.temperature > 0.0))
        throw ConfigError("train: soft gate temperature must be positive");
    if (cfg.gate.mode == GateMode::HardTopK && cfg.gate.k == 0)
        throw ConfigError("train: hard gate K must be at least 1");
}

struct SelectorEpoch {
    std::size_t epoch = 0;
    double lr = 0.0;
    LossBreakdown mean;            // per-bag means, `full` included as monitor
    std::size_t drop_skipped = 0;  // bags whose drop view was empty
    std::size_t contig_skipped = 0;
};

// Entropy regularizes the relaxed gate only, so under the hard gate it can
// never contribute a term and must not count as an objective.
inline bool any_active(const LossWeights& w, GateMode mode) {
    return w.suff > 0.0 || w.hinge > 0.0 || w.excl > 0.0 || w.contig > 0.0 ||
           w.budget > 0.0 || (mode == GateMode::Soft && w.entropy > 0.0);
}

// Trains the rationale head over a frozen backbone with warmup + cosine
// learning rate and gradient accumulation across the batch. The full-bag
// monitor is cached up front: with a frozen backbone and a noiseless full
// view it cannot change across epochs. With every loss weight zero there is
// no objective, so no step is taken and the head is returned untouched.
inline std::vector<SelectorEpoch> train_selector(const Backbone& model, SelectorHead& head,
                                                 const Dataset& data, const TrainConfig& cfg) {
    validate(cfg);
    if (!model.frozen()) throw ConfigError("train: backbone must be frozen");
    if (data.splits.train.empty()) throw ConfigError("train: empty training split");
    const bool active = any_active(cfg.weights, cfg.gate.mode);

    std::vector<const Bag*> bags;
    for (const auto& id : data.splits.train) {
        const Bag* bag = data.find(id);
        if (!bag) throw DataError("dataset: unknown bag id " + id);
        bags.push_back(bag);
    }
    std::vector<NodePtr> toks(bags.size());
    double full_monitor = 0.0;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        toks[i] = constant(model.tokens_value(*bags[i]));
        full_monitor += cross_entropy_value(model.logits(toks[i])->value, bags[i]->label);
    }
    full_monitor /= static_cast<double>(bags.size());

    AdamW opt(cfg.weight_decay);
    std::vector<SelectorEpoch> history;
    const char* term_names[] = {"suff", "hinge", "excl", "contig", "budget", "entropy"};
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        SelectorEpoch rec;
        rec.epoch = epoch;
        rec.lr = scheduled_lr(epoch, cfg.epochs, cfg.warmup_epochs, cfg.base_lr,
                              cfg.floor_lr) *
                 cfg.lr_multiplier;
        std::vector<std::size_t> order(bags.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_keys(cfg.seed, hash64("selector-order"), epoch));
        rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            head.params().zero_grads();
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t i = order[b];
                const Bag& bag = *bags[i];
                Tensor eps;
                const Tensor* eps_ptr = nullptr;
                if (cfg.gate.mode == GateMode::Soft) {
                    eps = gate_noise(bag.n_real, cfg.seed, bag.id, epoch);
                    eps_ptr = &eps;
                }
                const BagLoss r =
                    selector_bag_loss(model, head, toks[i], bag, cfg.gate, cfg.weights, eps_ptr);
                const double terms[] = {r.values.suff,   r.values.hinge,
                                        r.values.excl,   r.values.contig,
                                        r.values.budget, r.values.entropy};
                for (std::size_t t = 0; t < 6; ++t)
                    if (!std::isfinite(terms[t]))
                        throw NumericError(std::string("train: non-finite ") +
                                           term_names[t] + " loss at epoch " +
                                           std::to_string(epoch) + " (bag " + bag.id + ")");
                if (r.total)
                    backward(scale(r.total, 1.0 / static_cast<double>(stop - start)));
                rec.mean.suff += r.values.suff;
                rec.mean.hinge += r.values.hinge;
                rec.mean.excl += r.values.excl;
                rec.mean.contig += r.values.contig;
                rec.mean.budget += r.values.budget;
                rec.mean.entropy += r.values.entropy;
                rec.mean.total += r.values.total;
                rec.drop_skipped += r.drop_skipped ? 1 : 0;
                rec.contig_skipped += r.contig_skipped ? 1 : 0;
            }
            if (active) opt.step(head.params().refs(), rec.lr);
        }
        const double inv = 1.0 / static_cast<double>(bags.size());
        rec.mean.full = full_monitor;
        rec.mean.suff *= inv;
        rec.mean.hinge *= inv;
        rec.mean.excl *= inv;
        rec.mean.contig *= inv;
        rec.mean.budget *= inv;
        rec.mean.entropy *= inv;
        rec.mean.total *= inv;
        history.push_back(rec);
    }
    return history;
}

} // namespace foci
