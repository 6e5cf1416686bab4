#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "foci/gradcheck.hpp"
#include "foci/selector.hpp"

using namespace foci;
namespace fs = std::filesystem;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.data.data(), b.data.data(),
                       a.data.size() * sizeof(double)) == 0;
}

Bag random_bag(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Bag b;
    b.id = "bag";
    b.label = 0;
    b.n_real = n;
    b.features = Tensor(n, d);
    for (double& v : b.features.data) v = rng.uniform(-1.0, 1.0);
    b.coords = Tensor(n, 2);
    for (double& v : b.coords.data) v = rng.uniform(0.0, 100.0);
    return b;
}

} // namespace

TEST_CASE("soft gate") {
    SECTION("median noise cancels: a=0 gives exactly one half") {
        const NodePtr a = constant(Tensor(3, 1, 0.0));
        const NodePtr z = soft_gate(a, median_noise(3), 0.5);
        for (double v : z->value.data) CHECK(v == 0.5);
    }

    SECTION("a=2, median noise, T=0.5 gives sigmoid(4)") {
        const NodePtr a = constant(Tensor(1, 1, 2.0));
        const NodePtr z = soft_gate(a, median_noise(1), 0.5);
        CHECK(z->value.item() == Catch::Approx(1.0 / (1.0 + std::exp(-4.0))).margin(1e-15));
        CHECK(z->value.item() == Catch::Approx(0.9820).margin(5e-5));
    }

    SECTION("positive logits saturate as the temperature vanishes") {
        const NodePtr a = constant(Tensor(1, 1, 0.3));
        const NodePtr z = soft_gate(a, median_noise(1), 1e-3);
        CHECK(z->value.item() == Catch::Approx(1.0).margin(1e-9));
        const NodePtr neg = constant(Tensor(1, 1, -0.3));
        CHECK(soft_gate(neg, median_noise(1), 1e-3)->value.item() ==
              Catch::Approx(0.0).margin(1e-9));
    }

    SECTION("gates stay strictly inside (0,1)") {
        Rng rng(5);
        Tensor logits(32, 1);
        for (double& v : logits.data) v = rng.uniform(-6.0, 6.0);
        const NodePtr z = soft_gate(constant(logits), gate_noise(32, 7, "s", 0), 0.5);
        for (double v : z->value.data) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }

    SECTION("monotone in the logit for fixed noise and temperature") {
        const Tensor eps = gate_noise(1, 11, "s", 3);
        double prev = -1.0;
        for (double a = -4.0; a <= 4.0; a += 0.25) {
            const double z =
                soft_gate(constant(Tensor(1, 1, a)), eps, 0.5)->value.item();
            CHECK(z > prev);
            prev = z;
        }
    }

    SECTION("matches a direct evaluation with sampled noise") {
        const Tensor eps = gate_noise(4, 13, "slide", 2);
        Tensor logits(4, 1, {0.7, -1.2, 2.5, 0.0});
        const NodePtr z = soft_gate(constant(logits), eps, 0.5);
        for (std::size_t i = 0; i < 4; ++i) {
            const double shifted =
                (logits.at(i, 0) + std::log(eps.at(i, 0)) - std::log1p(-eps.at(i, 0))) / 0.5;
            CHECK(z->value.at(i, 0) ==
                  Catch::Approx(1.0 / (1.0 + std::exp(-shifted))).margin(1e-15));
        }
    }

    SECTION("gradient of the gate sum matches finite differences") {
        const Tensor eps = gate_noise(5, 17, "slide", 1);
        Rng rng(19);
        Tensor init(5, 1);
        for (double& v : init.data) v = rng.uniform(-2.0, 2.0);
        const NodePtr a = parameter(init);
        const double err = grad_check(
            [&](const std::vector<NodePtr>& ls) {
                return sum(soft_gate(ls[0], eps, 0.5));
            },
            {a});
        CHECK(err <= 1e-4);
    }

    SECTION("degenerate configurations are rejected") {
        const NodePtr a = constant(Tensor(2, 1, 0.0));
        CHECK_THROWS_AS(soft_gate(a, median_noise(2), 0.0), ConfigError);
        CHECK_THROWS_AS(soft_gate(a, median_noise(3), 0.5), ConfigError);
        CHECK_THROWS_AS(soft_gate(a, Tensor(2, 1, 0.0), 0.5), ConfigError);
        CHECK_THROWS_AS(soft_gate(a, Tensor(2, 1, 1.0), 0.5), ConfigError);
    }
}

TEST_CASE("gate noise stream") {
    const Tensor a = gate_noise(16, 3, "slide_007", 4);
    SECTION("is reproducible per key") {
        CHECK(bit_equal(a, gate_noise(16, 3, "slide_007", 4)));
    }
    SECTION("differs across seed, slide, and epoch") {
        CHECK_FALSE(bit_equal(a, gate_noise(16, 4, "slide_007", 4)));
        CHECK_FALSE(bit_equal(a, gate_noise(16, 3, "slide_008", 4)));
        CHECK_FALSE(bit_equal(a, gate_noise(16, 3, "slide_007", 5)));
    }
    SECTION("stays strictly inside the open unit interval") {
        for (double v : a.data) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("hard top-k gate") {
    SECTION("keeps the two largest of [3,1,2]") {
        const GateOutput g = hard_topk_gate(constant(Tensor(3, 1, {3.0, 1.0, 2.0})), 2);
        CHECK(g.mask.data == std::vector<double>{1.0, 0.0, 1.0});
        CHECK(g.selected == std::vector<std::size_t>{0, 2});
        CHECK_FALSE(g.clamped);
    }

    SECTION("ties break toward earlier tiles") {
        const GateOutput g = hard_topk_gate(constant(Tensor(3, 1, {1.0, 1.0, 1.0})), 2);
        CHECK(g.mask.data == std::vector<double>{1.0, 1.0, 0.0});
    }

    SECTION("the straight-through value is the mask, exactly") {
        Rng rng(23);
        Tensor logits(40, 1);
        for (double& v : logits.data) v = rng.uniform(-3.0, 3.0);
        const GateOutput g = hard_topk_gate(constant(logits), 12);
        CHECK(bit_equal(g.ste->value, g.mask));
    }

    SECTION("sum of the mask is min(K, N) for every K") {
        Rng rng(29);
        Tensor logits(10, 1);
        for (double& v : logits.data) v = rng.uniform(-3.0, 3.0);
        const NodePtr a = constant(logits);
        for (std::size_t k = 1; k <= 14; ++k) {
            const GateOutput g = hard_topk_gate(a, k);
            double total = 0.0;
            for (double v : g.mask.data) total += v;
            CHECK(total == static_cast<double>(std::min<std::size_t>(k, 10)));
            CHECK(g.clamped == (k > 10));
        }
    }

    SECTION("gradient of sum(m~) at zero logits is a quarter per coordinate") {
        const NodePtr a = parameter(Tensor(4, 1, 0.0));
        backward(sum(hard_topk_gate(a, 2).ste));
        for (double gv : a->grad.data) CHECK(gv == 0.25);
    }

    SECTION("selection for any K is a prefix of the ranking order") {
        Rng rng(31);
        std::vector<double> scores(9);
        for (double& v : scores) v = std::round(rng.uniform(-2.0, 2.0) * 4.0) / 4.0;
        const NodePtr a = constant(Tensor::column(scores));
        const auto order = ranking_order(scores);
        for (std::size_t k = 1; k <= scores.size(); ++k) {
            std::vector<std::size_t> prefix(order.begin(), order.begin() + k);
            std::sort(prefix.begin(), prefix.end());
            CHECK(hard_topk_gate(a, k).selected == prefix);
        }
    }

    SECTION("a zero budget is rejected") {
        CHECK_THROWS_AS(hard_topk_gate(constant(Tensor(3, 1, 0.0)), 0), ConfigError);
    }
}

TEST_CASE("selector head") {
    SECTION("identical tiles get identical logits") {
        SelectorHead head(8, 3);
        Tensor toks(5, 8);
        Rng rng(37);
        for (std::size_t j = 0; j < 8; ++j) toks.at(0, j) = rng.uniform(-1.0, 1.0);
        for (std::size_t i = 1; i < 5; ++i)
            std::copy(toks.row_ptr(0), toks.row_ptr(0) + 8, toks.row_ptr(i));
        const NodePtr a = head.scores(constant(toks));
        for (double v : a->value.data) CHECK(v == a->value.data[0]);
    }

    SECTION("zeroing the output layer leaves only its bias") {
        SelectorHead head(8, 5);
        head.params().find("sel.w2")->value = Tensor(4, 1);
        head.params().find("sel.b2")->value = Tensor(1, 1, {0.875});
        Rng rng(41);
        Tensor toks(6, 8);
        for (double& v : toks.data) v = rng.uniform(-1.0, 1.0);
        const NodePtr a = head.scores(constant(toks));
        for (double v : a->value.data) CHECK(v == 0.875);
    }

    SECTION("matches an independent dense recomputation") {
        SelectorHead head(10, 7);
        Rng rng(43);
        Tensor toks(6, 10);
        for (double& v : toks.data) v = rng.uniform(-1.0, 1.0);
        const NodePtr a = head.scores(constant(toks));
        const Tensor& w1 = head.params().find("sel.w1")->value;
        const Tensor& b1 = head.params().find("sel.b1")->value;
        const Tensor& w2 = head.params().find("sel.w2")->value;
        const Tensor& b2 = head.params().find("sel.b2")->value;
        for (std::size_t i = 0; i < 6; ++i) {
            double out = b2.at(0, 0);
            for (std::size_t j = 0; j < head.hidden(); ++j) {
                double hvs = b1.at(0, j);
                for (std::size_t k = 0; k < 10; ++k) hvs += toks.at(i, k) * w1.at(k, j);
                out += std::max(hvs, 0.0) * w2.at(j, 0);
            }
            CHECK(a->value.at(i, 0) == Catch::Approx(out).margin(1e-12));
        }
    }

    SECTION("width below two is rejected, as is a token mismatch") {
        CHECK_THROWS_AS(SelectorHead(1, 0), ConfigError);
        SelectorHead head(8, 11);
        CHECK_THROWS_AS(head.scores(constant(Tensor(3, 6))), ConfigError);
    }
}

TEST_CASE("three views") {
    AttentionPoolModel model(5, 8, 2, 13);
    const Bag bag = random_bag(6, 5, 47);
    const NodePtr toks = constant(model.tokens_value(bag));
    SelectorHead head(8, 17);
    const NodePtr a = head.scores(toks);

    SECTION("all-ones soft gates make the keep view the full view, bit for bit") {
        GateOutput g;
        g.logits = a;
        g.z = constant(Tensor(6, 1, 1.0));
        const ThreeViews v = build_views(g, GateMode::Soft);
        CHECK(bit_equal(view_logits(model, toks, v.keep)->value,
                        view_logits(model, toks, v.full)->value));
    }

    SECTION("soft views weigh every tile by z and 1-z") {
        const ThreeViews v = build_views(
            soft_gate_output(a, gate_noise(6, 3, bag.id, 0), 0.5), GateMode::Soft);
        CHECK(v.keep.rows.size() == 6);
        CHECK(v.drop.rows.size() == 6);
        CHECK_FALSE(v.drop_empty);
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(v.keep.weights->value.at(i, 0) + v.drop.weights->value.at(i, 0) ==
                  Catch::Approx(1.0).margin(1e-15));
    }

    SECTION("hard K=1 keeps one tile and drops two") {
        const Bag small = random_bag(3, 5, 53);
        const NodePtr stoks = constant(model.tokens_value(small));
        const GateOutput g = hard_topk_gate(head.scores(stoks), 1);
        const ThreeViews v = build_views(g, GateMode::HardTopK);
        CHECK(v.keep.rows.size() == 1);
        CHECK(v.drop.rows.size() == 2);
        CHECK_FALSE(v.drop_empty);
        for (double w : v.keep.weights->value.data) CHECK(w == 1.0);
        for (double w : v.drop.weights->value.data) CHECK(w == 1.0);
    }

    SECTION("selecting everything empties the drop view") {
        const ThreeViews v = build_views(hard_topk_gate(a, 6), GateMode::HardTopK);
        CHECK(v.drop_empty);
        CHECK(v.keep.rows.size() == 6);
        CHECK_THROWS_AS(view_logits(model, toks, v.drop), ConfigError);
    }

    SECTION("the hard keep view equals a masked backbone forward, bit for bit") {
        const GateOutput g = hard_topk_gate(a, 3);
        const ThreeViews v = build_views(g, GateMode::HardTopK);
        PaddingMask mask;
        mask.excluded.assign(6, 1);
        for (std::size_t i : g.selected) mask.excluded[i] = 0;
        const BackboneOutput masked = forward(model, bag, mask);
        CHECK(bit_equal(view_logits(model, toks, v.keep)->value, masked.logits));
    }

    SECTION("gradients reach the selector through both hard views") {
        const GateOutput g = hard_topk_gate(a, 3);
        const ThreeViews v = build_views(g, GateMode::HardTopK);
        const NodePtr score = add(pick(view_logits(model, toks, v.keep), 0, 0),
                                  pick(view_logits(model, toks, v.drop), 0, 1));
        backward(score);
        bool any = false;
        for (const auto& r : head.params().refs()) {
            if (r.node->grad.size() == 0) continue;
            for (double gv : r.node->grad.data) any = any || gv != 0.0;
        }
        CHECK(any);
    }
}

TEST_CASE("selector checkpoints") {
    const auto path = (fs::temp_directory_path() / "foci_sel.focm").string();
    AttentionPoolModel model(5, 8, 2, 19);
    SelectorHead head(8, 23);
    const Bag bag = random_bag(7, 5, 59);

    SECTION("backbone and head round-trip together") {
        save_selector(path, model, head);
        const auto loaded_model = load_backbone(path);
        const auto loaded_head = load_selector(path);
        CHECK(loaded_head->h() == 8);
        const auto before = score_tiles(head, model, bag);
        const auto after = score_tiles(*loaded_head, *loaded_model, bag);
        REQUIRE(after.size() == before.size());
        for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);
    }

    SECTION("a backbone-only file has no selector") {
        save_backbone(path, model);
        CHECK_THROWS_WITH(load_selector(path),
                          Catch::Matchers::ContainsSubstring("no selector section"));
    }
    fs::remove(path);
}
