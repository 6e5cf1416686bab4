#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "foci/bag.hpp"
#include "foci/bag_io.hpp"

using namespace foci;
namespace fs = std::filesystem;

namespace {

Bag make_bag(std::string id, std::size_t label,
             std::vector<std::vector<double>> rows,
             std::vector<std::pair<double, double>> xy = {}) {
    Bag b;
    b.id = std::move(id);
    b.label = label;
    b.n_real = rows.size();
    const std::size_t d = rows[0].size();
    b.features = Tensor(b.n_real, d);
    for (std::size_t i = 0; i < b.n_real; ++i)
        for (std::size_t j = 0; j < d; ++j) b.features.at(i, j) = rows[i][j];
    b.coords = Tensor(b.n_real, 2);
    for (std::size_t i = 0; i < b.n_real; ++i) {
        b.coords.at(i, 0) = i < xy.size() ? xy[i].first : static_cast<double>(i);
        b.coords.at(i, 1) = i < xy.size() ? xy[i].second : 0.0;
    }
    return b;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.data.data(), b.data.data(),
                       a.data.size() * sizeof(double)) == 0;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
    if (a.num_classes != b.num_classes || a.feature_dim != b.feature_dim ||
        a.bags.size() != b.bags.size())
        return false;
    for (std::size_t i = 0; i < a.bags.size(); ++i) {
        const Bag &x = a.bags[i], &y = b.bags[i];
        if (x.id != y.id || x.label != y.label || x.n_real != y.n_real) return false;
        if (!bit_equal(x.features, y.features) || !bit_equal(x.coords, y.coords))
            return false;
    }
    return true;
}

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / name;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

SynthConfig small_config(std::uint64_t seed = 3) {
    SynthConfig cfg;
    cfg.n_slides = 40;
    cfg.tiles_min = 16;
    cfg.tiles_max = 24;
    cfg.d = 8;
    cfg.evidence_min = 2;
    cfg.evidence_max = 4;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("synthetic generator structure") {
    auto [ds, truth] = generate_synthetic(small_config());
    REQUIRE(ds.bags.size() == 40);
    CHECK(ds.feature_dim == 8);
    CHECK(ds.num_classes == 2);

    SECTION("bag shapes, labels, and evidence counts respect the config") {
        for (std::size_t i = 0; i < ds.bags.size(); ++i) {
            const Bag& b = ds.bags[i];
            CHECK(b.n_real >= 16);
            CHECK(b.n_real <= 24);
            CHECK(b.label == i % 2);
            CHECK(b.features.rows == b.n_real);
            CHECK(b.coords.rows == b.n_real);
            const auto& ev = truth.at(b.id);
            CHECK(ev.size() >= 2);
            CHECK(ev.size() <= 4);
            for (std::size_t idx : ev) CHECK(idx < b.n_real);
        }
    }

    SECTION("splits partition the bag ids 70/15/15") {
        CHECK(ds.splits.train.size() == 28);
        CHECK(ds.splits.val.size() == 6);
        CHECK(ds.splits.test.size() == 6);
        std::set<std::string> seen;
        for (const auto* split : {&ds.splits.train, &ds.splits.val, &ds.splits.test})
            for (const auto& id : *split) CHECK(seen.insert(id).second);
        CHECK(seen.size() == 40);
    }

    SECTION("evidence coordinates are clustered, background is not") {
        for (const Bag& b : ds.bags) {
            const auto& ev = truth.at(b.id);
            if (ev.size() < 2) continue;
            double max_pair = 0.0;
            for (std::size_t a : ev)
                for (std::size_t c : ev) {
                    const double dx = b.coords.at(a, 0) - b.coords.at(c, 0);
                    const double dy = b.coords.at(a, 1) - b.coords.at(c, 1);
                    max_pair = std::max(max_pair, std::sqrt(dx * dx + dy * dy));
                }
            CHECK(max_pair <= 2.0 * 0.05 + 1e-3);
        }
    }
}

TEST_CASE("synthetic generator plants class-separated evidence") {
    SynthConfig cfg = small_config(11);
    cfg.n_slides = 120;
    auto [ds, truth] = generate_synthetic(cfg);

    double ev_mean[2] = {0.0, 0.0};
    std::size_t ev_count[2] = {0, 0};
    double bg_mean = 0.0;
    std::size_t bg_count = 0;
    for (const Bag& b : ds.bags) {
        const auto& ev = truth.at(b.id);
        std::set<std::size_t> ev_set(ev.begin(), ev.end());
        for (std::size_t i = 0; i < b.n_real; ++i) {
            if (ev_set.count(i)) {
                ev_mean[b.label] += b.features.at(i, 0);
                ++ev_count[b.label];
            } else {
                bg_mean += b.features.at(i, 0);
                ++bg_count;
            }
        }
    }
    ev_mean[0] /= static_cast<double>(ev_count[0]);
    ev_mean[1] /= static_cast<double>(ev_count[1]);
    bg_mean /= static_cast<double>(bg_count);

    CHECK(ev_mean[0] == Catch::Approx(-2.0).margin(0.35));
    CHECK(ev_mean[1] == Catch::Approx(2.0).margin(0.35));
    CHECK(bg_mean == Catch::Approx(0.0).margin(0.1));

    SECTION("zero separation collapses the class difference") {
        SynthConfig flat = cfg;
        flat.evidence_separation = 0.0;
        auto [fds, ftruth] = generate_synthetic(flat);
        double m[2] = {0.0, 0.0};
        std::size_t c[2] = {0, 0};
        for (const Bag& b : fds.bags)
            for (std::size_t i : ftruth.at(b.id)) {
                m[b.label] += b.features.at(i, 0);
                ++c[b.label];
            }
        m[0] /= static_cast<double>(c[0]);
        m[1] /= static_cast<double>(c[1]);
        CHECK(std::abs(m[1] - m[0]) < 0.3);
    }
}

TEST_CASE("synthetic generator is deterministic under the seed") {
    auto [a, ta] = generate_synthetic(small_config(21));
    auto [b, tb] = generate_synthetic(small_config(21));
    CHECK(datasets_equal(a, b));
    CHECK(ta == tb);
    auto [c, tc] = generate_synthetic(small_config(22));
    CHECK_FALSE(datasets_equal(a, c));
}

TEST_CASE("generator rejects degenerate configs") {
    SynthConfig cfg = small_config();
    SECTION("evidence range above tile range") {
        cfg.evidence_max = cfg.tiles_min + 1;
        CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    }
    SECTION("inverted tile range") {
        cfg.tiles_min = 30;
        cfg.tiles_max = 20;
        CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    }
    SECTION("zero slides") {
        cfg.n_slides = 0;
        CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    }
    SECTION("negative separation") {
        cfg.evidence_separation = -1.0;
        CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    }
}

TEST_CASE("norm prefilter") {
    SECTION("keeps the top rows by descending norm") {
        Bag b = make_bag("b", 0, {{3.0}, {1.0}, {2.0}});
        std::vector<std::size_t> kept;
        Bag f = prefilter_topnorm(b, 2, &kept);
        REQUIRE(f.n_real == 2);
        CHECK(kept == std::vector<std::size_t>{0, 2});
        CHECK(f.features.at(0, 0) == 3.0);
        CHECK(f.features.at(1, 0) == 2.0);
        CHECK(f.coords.at(1, 0) == 2.0);
    }
    SECTION("large cap is the identity") {
        Bag b = make_bag("b", 1, {{3.0}, {1.0}, {2.0}});
        Bag f = prefilter_topnorm(b, 10);
        REQUIRE(f.n_real == 3);
        CHECK(f.features.at(0, 0) == 3.0);
        CHECK(f.features.at(1, 0) == 2.0);
        CHECK(f.features.at(2, 0) == 1.0);
    }
    SECTION("ties keep the smallest original indices") {
        Bag b = make_bag("b", 0, {{1.0}, {1.0}, {1.0}});
        std::vector<std::size_t> kept;
        prefilter_topnorm(b, 2, &kept);
        CHECK(kept == std::vector<std::size_t>{0, 1});
    }
    SECTION("truth indices are remapped into the filtered space") {
        Bag b = make_bag("b", 0, {{1.0}, {5.0}, {3.0}, {4.0}});
        std::vector<std::size_t> kept;
        prefilter_topnorm(b, 3, &kept);
        // kept order: norms 5,4,3 -> original rows 1,3,2
        CHECK(kept == std::vector<std::size_t>{1, 3, 2});
        CHECK(remap_indices({0, 2}, kept) == std::vector<std::size_t>{2});
        CHECK(remap_indices({1, 3}, kept) == std::vector<std::size_t>{0, 1});
    }
    SECTION("idempotence and cap monotonicity") {
        auto [ds, truth] = generate_synthetic(small_config(9));
        for (std::size_t cap : {4UL, 8UL, 12UL}) {
            const Bag& b = ds.bags[3];
            std::vector<std::size_t> kept_small, kept_large, kept_again;
            Bag once = prefilter_topnorm(b, cap, &kept_small);
            Bag twice = prefilter_topnorm(once, cap, &kept_again);
            CHECK(bit_equal(once.features, twice.features));
            CHECK(bit_equal(once.coords, twice.coords));

            prefilter_topnorm(b, cap + 5, &kept_large);
            std::set<std::size_t> large_set(kept_large.begin(), kept_large.end());
            for (std::size_t idx : kept_small) CHECK(large_set.count(idx) == 1);
        }
    }
}

TEST_CASE("adaptive instance budget") {
    CHECK(adaptive_k(1024, 0.03, 16) == 30);
    CHECK(adaptive_k(100, 0.03, 16) == 16);
    CHECK(adaptive_k(16, 1.0, 1) == 16);
    SECTION("monotone in n_real and bounded below") {
        std::size_t prev = 0;
        for (std::size_t n = 1; n <= 2048; n += 7) {
            const std::size_t k = adaptive_k(n, 0.03, 16);
            CHECK(k >= 16);
            CHECK(k >= prev);
            prev = k;
        }
    }
    SECTION("bad parameters are rejected") {
        CHECK_THROWS_AS(adaptive_k(100, 0.0, 16), ConfigError);
        CHECK_THROWS_AS(adaptive_k(100, 1.5, 16), ConfigError);
        CHECK_THROWS_AS(adaptive_k(100, 0.5, 0), ConfigError);
    }
}

TEST_CASE("bag file round-trips bit-exactly") {
    auto [ds, truth] = generate_synthetic(small_config(17));
    const auto path = temp_file("foci_test_bags.focb");
    save_bags(path.string(), ds);
    Dataset loaded = load_bags(path.string());
    CHECK(datasets_equal(ds, loaded));

    SECTION("saving the loaded dataset reproduces the file byte for byte") {
        const auto path2 = temp_file("foci_test_bags2.focb");
        save_bags(path2.string(), loaded);
        CHECK(slurp(path) == slurp(path2));
        fs::remove(path2);
    }
    fs::remove(path);
}

TEST_CASE("bag file byte layout is frozen") {
    Dataset ds;
    ds.num_classes = 2;
    ds.feature_dim = 1;
    ds.bags.push_back(make_bag("b0", 0, {{0.5}}, {{3.0, 4.0}}));
    const auto path = temp_file("foci_layout.focb");
    save_bags(path.string(), ds);

    const std::vector<unsigned char> expected = {
        'F', 'O', 'C', 'B',
        1, 0, 0, 0,              // version
        2, 0, 0, 0,              // num_classes
        1, 0, 0, 0,              // d
        2, 0, 0, 0, 'b', '0',    // id
        1, 0, 0, 0,              // n_real
        0, 0, 0, 0,              // label
        0x00, 0x00, 0x00, 0x3f,  // feature 0.5f
        0x00, 0x00, 0x40, 0x40,  // coord x 3.0f
        0x00, 0x00, 0x80, 0x40,  // coord y 4.0f
    };
    CHECK(slurp(path) == expected);

    Dataset loaded = load_bags(path.string());
    REQUIRE(loaded.bags.size() == 1);
    CHECK(loaded.bags[0].features.at(0, 0) == 0.5);
    CHECK(loaded.bags[0].coords.at(0, 1) == 4.0);
    fs::remove(path);
}

TEST_CASE("bag file error handling") {
    auto [ds, truth] = generate_synthetic(small_config(23));
    const auto path = temp_file("foci_err.focb");
    save_bags(path.string(), ds);
    auto bytes = slurp(path);

    SECTION("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()),
                   static_cast<std::streamsize>(bad.size()));
        CHECK_THROWS_WITH(load_bags(path.string()),
                          Catch::Matchers::ContainsSubstring("bad magic"));
    }
    SECTION("version mismatch") {
        auto bad = bytes;
        bad[4] = 9;
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()),
                   static_cast<std::streamsize>(bad.size()));
        CHECK_THROWS_WITH(load_bags(path.string()),
                          Catch::Matchers::ContainsSubstring("version"));
    }
    SECTION("truncated record") {
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bytes.data()),
                   static_cast<std::streamsize>(bytes.size() - 3));
        CHECK_THROWS_WITH(load_bags(path.string()),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("feature-dim mismatch on save") {
        Dataset bad = ds;
        bad.bags[1].features = Tensor(bad.bags[1].n_real, ds.feature_dim + 1);
        CHECK_THROWS_AS(save_bags(path.string(), bad), DataError);
    }
    fs::remove(path);
}

TEST_CASE("manifest and truth sidecars round-trip") {
    Splits s;
    s.train = {"a", "b"};
    s.val = {"c"};
    s.test = {"d", "e"};
    const auto mpath = temp_file("foci_manifest.json");
    save_manifest(mpath.string(), s);
    Splits r = load_manifest(mpath.string());
    CHECK(r.train == s.train);
    CHECK(r.val == s.val);
    CHECK(r.test == s.test);
    fs::remove(mpath);

    EvidenceTruth t;
    t["a"] = {0, 3, 7};
    t["b"] = {};
    const auto tpath = temp_file("foci_truth.json");
    save_truth(tpath.string(), t);
    CHECK(load_truth(tpath.string()) == t);
    fs::remove(tpath);

    SECTION("missing split key is an error") {
        std::ofstream(mpath) << "{\"train\": [], \"val\": []}";
        CHECK_THROWS_AS(load_manifest(mpath.string()), DataError);
        fs::remove(mpath);
    }
}
