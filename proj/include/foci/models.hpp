#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "foci/bag.hpp"
#include "foci/graph.hpp"
#include "foci/params.hpp"
#include "foci/ranking.hpp"

namespace foci {

enum class Archetype { AttentionPool, ClsTransformer, HardTopK };

inline const char* archetype_tag(Archetype a) {
    switch (a) {
        case Archetype::AttentionPool: return "ATTN";
        case Archetype::ClsTransformer: return "TRNS";
        default: return "HTPK";
    }
}

// Per-tile exclusion flags; an empty vector means nothing is excluded.
struct PaddingMask {
    std::vector<std::uint8_t> excluded;

    static PaddingMask none() { return {}; }

    bool excludes(std::size_t i) const {
        return i < excluded.size() && excluded[i] != 0;
    }
};

struct BackboneOutput {
    Tensor logits;                     // 1 x C
    Tensor probs;                      // 1 x C, softmax of logits
    std::vector<std::size_t> included; // original tile indices, ascending
    std::vector<double> scores;        // native ranking score per included tile
};

// Common backbone state: a d->h token projection, a classifier head, and the
// frozen flag. Subclasses add their aggregation mechanism. `logits` operates
// on (possibly gathered) token nodes so training, masked evaluation, and
// weighted selector views all share one forward definition.
class Backbone {
public:
    Backbone(Archetype arch, std::size_t d, std::size_t h, std::size_t C)
        : arch_(arch), d_(d), h_(h), C_(C) {
        if (d == 0 || h == 0 || C < 2) throw ConfigError("backbone: bad dimensions");
    }
    virtual ~Backbone() = default;

    Archetype archetype() const { return arch_; }
    std::size_t d() const { return d_; }
    std::size_t h() const { return h_; }
    std::size_t num_classes() const { return C_; }

    ParamList& params() { return params_; }
    const ParamList& params() const { return params_; }
    void freeze() { params_.freeze(); }
    bool frozen() const { return params_.frozen(); }

    // Projected tokens for a feature node (N x d -> N x h).
    NodePtr tokens(const NodePtr& x) const { return add(matmul(x, proj_w_), proj_b_); }

    Tensor tokens_value(const Bag& bag) const {
        return tokens(constant(bag.features))->value;
    }

    // Class logits (1 x C) from tokens, with optional per-token weights
    // (N x 1 node) multiplying the projected tokens before aggregation.
    // `scores_out`, if given, receives the native per-token ranking scores.
    virtual NodePtr logits(const NodePtr& toks, const NodePtr* weights = nullptr,
                           std::vector<double>* scores_out = nullptr) const = 0;

    // Forward used during this model's own pre-training; the hard-top-K
    // archetype overrides it with a straight-through surrogate.
    virtual NodePtr train_logits(const NodePtr& toks) const {
        return logits(toks);
    }

    // Archetype-specific integer hyperparameters (checkpoint header).
    virtual std::vector<std::uint32_t> extra_hypers() const { return {}; }

protected:
    NodePtr init_common(Rng& rng) {
        proj_w_ = params_.add("proj.w", linear_init(d_, h_, rng));
        proj_b_ = params_.add("proj.b", Tensor(1, h_), false);
        return proj_w_;
    }

    NodePtr init_classifier(Rng& rng) {
        cls_w_ = params_.add("cls.w", linear_init(h_, C_, rng));
        cls_b_ = params_.add("cls.b", Tensor(1, C_), false);
        return cls_w_;
    }

    NodePtr classify(const NodePtr& pooled) const {
        return add(matmul(pooled, cls_w_), cls_b_);
    }

    Archetype arch_;
    std::size_t d_, h_, C_;
    ParamList params_;
    NodePtr proj_w_, proj_b_, cls_w_, cls_b_;
};

// ----- gated attention pooling -----

// Pooled feature = sum_i alpha_i t_i with alpha a weighted softmax over the
// gated-attention logits att_i = w^T (tanh(t_i V) (*) sigmoid(t_i U)).
// Per-token weights multiply both the tokens and the softmax mass, so weight
// 0 reproduces hard exclusion bit for bit.
class AttentionPoolModel : public Backbone {
public:
    AttentionPoolModel(std::size_t d, std::size_t h, std::size_t C, std::uint64_t seed)
        : Backbone(Archetype::AttentionPool, d, h, C) {
        Rng rng(mix_keys(seed, hash64("attnpool"), 0));
        init_common(rng);
        att_v_ = params_.add("att.v", linear_init(h, h, rng));
        att_u_ = params_.add("att.u", linear_init(h, h, rng));
        att_w_ = params_.add("att.w", linear_init(h, 1, rng));
        init_classifier(rng);
    }

    NodePtr logits(const NodePtr& toks, const NodePtr* weights = nullptr,
                   std::vector<double>* scores_out = nullptr) const override {
        const NodePtr t = weights ? mul(toks, *weights) : toks;
        const NodePtr gate =
            mul(tanh_op(matmul(t, att_v_)), sigmoid(matmul(t, att_u_)));
        const NodePtr att = matmul(gate, att_w_); // N x 1
        if (scores_out) *scores_out = att->value.data;

        double hi = att->value.data[0];
        for (double v : att->value.data) hi = std::max(hi, v);
        const NodePtr e = exp_op(add_scalar(att, -hi));
        const NodePtr u = weights ? mul(e, *weights) : e;
        const NodePtr alpha = mul(u, recip(sum(u)));
        const NodePtr pooled = matmul(transpose(alpha), t); // 1 x h
        return classify(pooled);
    }

private:
    NodePtr att_v_, att_u_, att_w_;
};

// ----- CLS-token transformer -----

// A learned CLS token is prepended to the (optionally weighted) tokens and
// the sequence runs through L pre-activation-free attention blocks with
// residual connections (no positional encoding, no normalization layers).
// The classifier reads the final CLS state; the native ranking is the dot
// product of each final token state with the final CLS state.
class ClsTransformerModel : public Backbone {
public:
    ClsTransformerModel(std::size_t d, std::size_t h, std::size_t C, std::size_t blocks,
                        std::size_t heads, std::uint64_t seed)
        : Backbone(Archetype::ClsTransformer, d, h, C), blocks_(blocks), heads_(heads) {
        if (heads == 0 || h % heads != 0)
            throw ConfigError("transformer: head count must divide h");
        Rng rng(mix_keys(seed, hash64("transformer"), 0));
        init_common(rng);
        cls_token_ = params_.add("cls_token", gaussian_init(1, h, 0.02, rng), false);
        blocks_params_.resize(blocks);
        for (std::size_t b = 0; b < blocks; ++b) {
            auto& blk = blocks_params_[b];
            const std::string prefix = "blk" + std::to_string(b) + ".";
            blk.wq = params_.add(prefix + "wq", linear_init(h, h, rng));
            blk.bq = params_.add(prefix + "bq", Tensor(1, h), false);
            blk.wk = params_.add(prefix + "wk", linear_init(h, h, rng));
            blk.bk = params_.add(prefix + "bk", Tensor(1, h), false);
            blk.wv = params_.add(prefix + "wv", linear_init(h, h, rng));
            blk.bv = params_.add(prefix + "bv", Tensor(1, h), false);
            blk.wo = params_.add(prefix + "wo", linear_init(h, h, rng));
            blk.bo = params_.add(prefix + "bo", Tensor(1, h), false);
            blk.w1 = params_.add(prefix + "ffn.w1", linear_init(h, h, rng));
            blk.b1 = params_.add(prefix + "ffn.b1", Tensor(1, h), false);
            blk.w2 = params_.add(prefix + "ffn.w2", linear_init(h, h, rng));
            blk.b2 = params_.add(prefix + "ffn.b2", Tensor(1, h), false);
        }
        init_classifier(rng);
    }

    // `key_mask` (1 x N+1, 0 or -inf) excludes sequence positions as
    // attention keys in every block; position 0 is the CLS token and must
    // never be masked. `attn_out`, if given, collects each block's per-head
    // attention probability matrices.
    NodePtr logits_probed(const NodePtr& toks, const NodePtr* weights,
                          const Tensor* key_mask, std::vector<double>* scores_out,
                          std::vector<Tensor>* attn_out) const {
        const NodePtr t = weights ? mul(toks, *weights) : toks;
        NodePtr s = concat_rows({cls_token_, t});
        const std::size_t hd = h_ / heads_;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (const auto& blk : blocks_params_) {
            const NodePtr q = add(matmul(s, blk.wq), blk.bq);
            const NodePtr k = add(matmul(s, blk.wk), blk.bk);
            const NodePtr v = add(matmul(s, blk.wv), blk.bv);
            std::vector<NodePtr> ctx;
            ctx.reserve(heads_);
            for (std::size_t head = 0; head < heads_; ++head) {
                const NodePtr qh = slice_cols(q, head * hd, hd);
                const NodePtr kh = slice_cols(k, head * hd, hd);
                const NodePtr vh = slice_cols(v, head * hd, hd);
                const NodePtr att =
                    scale(matmul(qh, transpose(kh)), inv_scale);
                const NodePtr p = softmax_rows(att, key_mask);
                if (attn_out) attn_out->push_back(p->value);
                ctx.push_back(matmul(p, vh));
            }
            const NodePtr o = add(matmul(concat_cols(ctx), blk.wo), blk.bo);
            s = add(s, o);
            const NodePtr f =
                add(matmul(relu(add(matmul(s, blk.w1), blk.b1)), blk.w2), blk.b2);
            s = add(s, f);
        }
        const std::size_t n = t->value.rows;
        const NodePtr cls_state = gather_rows(s, {0});
        if (scores_out) {
            // <final token state, final CLS state> per token
            std::vector<std::size_t> rows(n);
            for (std::size_t i = 0; i < n; ++i) rows[i] = i + 1;
            const NodePtr dots =
                matmul(gather_rows(s, rows), transpose(cls_state));
            *scores_out = dots->value.data;
        }
        return classify(cls_state);
    }

    NodePtr logits(const NodePtr& toks, const NodePtr* weights = nullptr,
                   std::vector<double>* scores_out = nullptr) const override {
        return logits_probed(toks, weights, nullptr, scores_out, nullptr);
    }

    std::size_t blocks() const { return blocks_; }
    std::size_t heads() const { return heads_; }
    std::vector<std::uint32_t> extra_hypers() const override {
        return {static_cast<std::uint32_t>(blocks_), static_cast<std::uint32_t>(heads_)};
    }

private:
    struct BlockParams {
        NodePtr wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
    };
    std::size_t blocks_, heads_;
    std::vector<BlockParams> blocks_params_;
    NodePtr cls_token_;
};

// ----- hard top-k pooling -----

// Scores every token with a linear head and classifies the mean of the
// k_pool best tokens. Frozen forwards treat the selection as a constant;
// its own pre-training routes gradients through a straight-through sigmoid
// surrogate so the scorer is trainable.
class HardTopKModel : public Backbone {
public:
    HardTopKModel(std::size_t d, std::size_t h, std::size_t C, std::size_t k_pool,
                  std::uint64_t seed)
        : Backbone(Archetype::HardTopK, d, h, C), k_pool_(k_pool) {
        if (k_pool == 0) throw ConfigError("hard-top-k: k_pool must be positive");
        Rng rng(mix_keys(seed, hash64("hardtopk"), 0));
        init_common(rng);
        score_w_ = params_.add("score.w", linear_init(h, 1, rng));
        score_b_ = params_.add("score.b", Tensor(1, 1), false);
        init_classifier(rng);
    }

    NodePtr scorer(const NodePtr& t) const {
        return add(matmul(t, score_w_), score_b_);
    }

    NodePtr logits(const NodePtr& toks, const NodePtr* weights = nullptr,
                   std::vector<double>* scores_out = nullptr) const override {
        const NodePtr t = weights ? mul(toks, *weights) : toks;
        const NodePtr s = scorer(t); // N x 1
        if (scores_out) *scores_out = s->value.data;
        const std::size_t k = std::min(k_pool_, t->value.rows);
        const auto sel = topk_indices(s->value.data, k);
        const NodePtr picked = gather_rows(t, sel);
        const NodePtr pooled =
            matmul(constant(Tensor(1, k, std::vector<double>(k, 1.0 / k))), picked);
        return classify(pooled);
    }

    NodePtr train_logits(const NodePtr& toks) const override {
        const NodePtr s = scorer(toks);
        const std::size_t n = toks->value.rows;
        const std::size_t k = std::min(k_pool_, n);
        Tensor m(n, 1);
        for (std::size_t idx : topk_indices(s->value.data, k)) m.at(idx, 0) = 1.0;
        const NodePtr gate = ste_gate(m, s);
        const NodePtr pooled =
            scale(matmul(transpose(gate), toks), 1.0 / static_cast<double>(k));
        return classify(pooled);
    }

    std::size_t k_pool() const { return k_pool_; }
    std::vector<std::uint32_t> extra_hypers() const override {
        return {static_cast<std::uint32_t>(k_pool_)};
    }

private:
    std::size_t k_pool_;
    NodePtr score_w_, score_b_;
};

// ----- value-level masked/weighted forward -----

inline BackboneOutput forward(const Backbone& model, const Bag& bag,
                              const PaddingMask& mask = {},
                              const std::vector<double>* weights = nullptr) {
    if (bag.features.cols != model.d())
        throw DataError("forward: bag feature dim " + std::to_string(bag.features.cols) +
                        " does not match model d=" + std::to_string(model.d()));
    if (weights) {
        if (weights->size() != bag.n_real)
            throw ConfigError("forward: weight count does not match tile count");
        for (double w : *weights)
            if (!(w >= 0.0 && w <= 1.0))
                throw ConfigError("forward: weights must lie in [0, 1]");
    }

    BackboneOutput out;
    for (std::size_t i = 0; i < bag.n_real; ++i)
        if (!mask.excludes(i)) out.included.push_back(i);
    if (out.included.empty())
        throw ConfigError("forward: every tile is excluded");

    // Row-wise ops commute with row gathering, so the subset forward is
    // bit-identical to a masked full forward and much cheaper.
    Tensor sub(out.included.size(), bag.features.cols);
    for (std::size_t r = 0; r < out.included.size(); ++r)
        std::copy(bag.features.row_ptr(out.included[r]),
                  bag.features.row_ptr(out.included[r]) + bag.features.cols,
                  sub.row_ptr(r));
    const NodePtr toks = model.tokens(constant(std::move(sub)));

    NodePtr logits;
    if (weights) {
        Tensor w(out.included.size(), 1);
        for (std::size_t r = 0; r < out.included.size(); ++r)
            w.at(r, 0) = (*weights)[out.included[r]];
        const NodePtr wnode = constant(std::move(w));
        logits = model.logits(toks, &wnode, &out.scores);
    } else {
        logits = model.logits(toks, nullptr, &out.scores);
    }
    out.logits = logits->value;
    out.probs = softmax_rows(logits)->value;
    return out;
}

// Native ranking scores over the whole (pre-filtered) bag.
inline std::vector<double> native_ranking(const Backbone& model, const Bag& bag) {
    return forward(model, bag).scores;
}

} // namespace foci
