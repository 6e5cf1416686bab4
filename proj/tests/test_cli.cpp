#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "foci/cli.hpp"

using namespace foci;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

bool files_equal(const std::string& a, const std::string& b) {
    return read_file(a) == read_file(b);
}

int run(std::vector<std::string> args) { return run_cli(std::move(args)); }

struct EnvGuard {
    std::string name;
    EnvGuard(const char* n, const char* v) : name(n) { setenv(n, v, 1); }
    ~EnvGuard() { unsetenv(name.c_str()); }
};

// One small dataset with a trained backbone and selector, produced through
// the command surface itself and shared by every case below.
struct CliFixture {
    fs::path root;
    std::string data, backbone, selector;

    CliFixture() {
        root = fs::temp_directory_path() / "foci-cli-fixture";
        fs::remove_all(root);
        fs::create_directories(root);
        data = (root / "data").string();
        backbone = (root / "bb.foci").string();
        selector = (root / "sel.foci").string();
        require(run({"gen", "--out", data, "--seed", "5", "--slides", "40",
                     "--tiles-min", "8", "--tiles-max", "12", "--dim", "8",
                     "--evidence-min", "2", "--evidence-max", "3"}),
                "gen");
        require(run({"train-backbone", "--data", data, "--out", backbone, "--arch",
                     "attnpool", "--hidden", "16", "--epochs", "6", "--seed", "7",
                     "--history", (root / "bb_hist.jsonl").string()}),
                "train-backbone");
        require(run({"train-selector", "--data", data, "--backbone", backbone,
                     "--out", selector, "--epochs", "2", "--warmup", "1", "--seed",
                     "9", "--history", (root / "sel_hist.jsonl").string()}),
                "train-selector");
    }

    static void require(int rc, const char* what) {
        if (rc != 0)
            throw std::runtime_error(std::string("fixture step failed: ") + what);
    }

    std::string dir(const std::string& name) const {
        return (root / name).string();
    }
};

const CliFixture& fixture() {
    static CliFixture f;
    return f;
}

} // namespace

TEST_CASE("dataset generation is deterministic") {
    const auto& f = fixture();
    const std::string a = f.dir("gen_a"), b = f.dir("gen_b"), c = f.dir("gen_c");
    const std::vector<std::string> base = {
        "gen",  "--seed",         "11", "--slides",       "12", "--tiles-min",
        "6",    "--tiles-max",    "9",  "--dim",          "4",  "--evidence-min",
        "2",    "--evidence-max", "3"};
    auto with_out = [&](const std::string& out) {
        auto args = base;
        args.push_back("--out");
        args.push_back(out);
        return args;
    };
    REQUIRE(run(with_out(a)) == 0);
    REQUIRE(run(with_out(b)) == 0);
    for (const char* name : {"/bags.focb", "/manifest.json", "/truth.json"})
        CHECK(files_equal(a + name, b + name));

    auto args = with_out(c);
    args[2] = "12";
    REQUIRE(run(args) == 0);
    CHECK_FALSE(files_equal(a + "/bags.focb", c + "/bags.focb"));

    const Dataset loaded = cli::load_dataset(a);
    CHECK(loaded.bags.size() == 12);
    CHECK(loaded.feature_dim == 4);
    CHECK_FALSE(loaded.splits.test.empty());
}

TEST_CASE("training histories are valid JSONL") {
    const auto& f = fixture();
    auto lines = [](const std::string& path) {
        std::ifstream is(path);
        REQUIRE(is.good());
        std::vector<Json> rows;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) rows.push_back(Json::parse(line));
        return rows;
    };
    const auto bb = lines((f.root / "bb_hist.jsonl").string());
    REQUIRE(bb.size() == 6);
    CHECK(bb.front().at("epoch").get<std::size_t>() == 0);
    CHECK(bb.back().contains("val_auc"));
    const auto sel = lines((f.root / "sel_hist.jsonl").string());
    REQUIRE(sel.size() == 2);
    CHECK(sel.front().contains("lr"));
    CHECK(sel.front().contains("total"));
    CHECK(sel.front().contains("full"));
}

TEST_CASE("a fully zeroed objective leaves the selector at initialization") {
    const auto& f = fixture();
    const std::string trained = f.dir("zero_sel.foci");
    REQUIRE(run({"train-selector", "--data", f.data, "--backbone", f.backbone,
                 "--out", trained, "--epochs", "2", "--warmup", "1", "--seed", "21",
                 "--lambda-suff", "0", "--lambda-hinge", "0", "--lambda-excl", "0",
                 "--lambda-contig", "0", "--lambda-budget", "0"}) == 0);

    const auto model = load_backbone(f.backbone);
    SelectorHead head(model->h(), 21);
    const std::string untouched = f.dir("zero_ref.foci");
    save_selector(untouched, *model, head);
    CHECK(files_equal(trained, untouched));
}

TEST_CASE("ablation flags mirror zeroed weights") {
    const auto& f = fixture();
    const std::string ablated_path = f.dir("ab_sel.foci");
    const std::string zeroed_path = f.dir("zc_sel.foci");
    REQUIRE(run({"train-selector", "--data", f.data, "--backbone", f.backbone,
                 "--out", ablated_path, "--epochs", "2", "--warmup", "1", "--seed",
                 "33", "--ablate", "contig"}) == 0);
    REQUIRE(run({"train-selector", "--data", f.data, "--backbone", f.backbone,
                 "--out", zeroed_path, "--epochs", "2", "--warmup", "1", "--seed",
                 "33", "--lambda-contig", "0"}) == 0);
    CHECK(files_equal(ablated_path, zeroed_path));

    CHECK(run({"train-selector", "--data", f.data, "--backbone", f.backbone, "--out",
               f.dir("bogus.foci"), "--ablate", "sparsity"}) == 2);
}

TEST_CASE("evaluation reruns are byte-identical") {
    const auto& f = fixture();
    const std::string e1 = f.dir("eval_a"), e2 = f.dir("eval_b");
    for (const auto& out : {e1, e2})
        REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
                     out, "--mode", "srp", "--ranking", "foci", "--kmax", "16"}) ==
                0);
    const Json r1 = read_json(e1 + "/report_srp_foci.json");
    const Json r2 = read_json(e2 + "/report_srp_foci.json");
    CHECK(report_core(r1) == report_core(r2));
    CHECK(files_equal(e1 + "/report_srp_foci.csv", e2 + "/report_srp_foci.csv"));
    CHECK(files_equal(e1 + "/report_srp_foci.svg", e2 + "/report_srp_foci.svg"));

    const auto& slides = r1.at("slides");
    REQUIRE(slides.size() == cli::load_dataset(f.data).splits.test.size());
    for (const auto& s : slides)
        for (const auto& k : s.at("curve").at("schedule"))
            CHECK(k.get<std::size_t>() <= 16);
}

TEST_CASE("a confidence threshold sweep reuses the same curves") {
    const auto& f = fixture();
    const std::string out = f.dir("eval_sweep");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out,
                 "--mode", "srp", "--ranking", "native", "--kmax", "16",
                 "--kappa-sweep"}) == 0);
    const Json r = read_json(out + "/report_srp_native.json");
    const auto& rows = r.at("aggregates");
    REQUIRE(rows.size() == 4);
    const std::vector<double> kappas = {0.7, 0.8, 0.9, 0.95};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(rows[i].at("kappa").get<double>() == kappas[i]);
        CHECK(rows[i].at("aukc_mean").get<double>() ==
              rows[0].at("aukc_mean").get<double>());
        CHECK(rows[i].at("aukc_std").get<double>() ==
              rows[0].at("aukc_std").get<double>());
        if (i > 0)
            CHECK(rows[i].at("reach").get<double>() <=
                  rows[i - 1].at("reach").get<double>());
    }
}

TEST_CASE("random-ranking seeds produce one aggregate row each") {
    const auto& f = fixture();
    const std::string out = f.dir("eval_seeds");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out,
                 "--mode", "srp", "--ranking", "random", "--kmax", "16", "--seeds",
                 "1,2,3"}) == 0);
    const Json r = read_json(out + "/report_srp_random.json");
    REQUIRE(r.at("aggregates").size() == 3);
    CHECK(r.at("aggregates")[0].at("seed").get<std::uint64_t>() == 1);
    CHECK(r.at("aggregates")[2].at("seed").get<std::uint64_t>() == 3);

    const std::string again = f.dir("eval_seeds_native");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", again,
                 "--mode", "srp", "--ranking", "native", "--kmax", "16", "--seeds",
                 "1,2,3"}) == 0);
    CHECK(read_json(again + "/report_srp_native.json").at("aggregates").size() == 1);
}

TEST_CASE("failures map to distinct exit codes") {
    const auto& f = fixture();
    CHECK(run({"train-backbone", "--data", f.dir("missing"), "--out",
               f.dir("x.foci")}) == 3);
    CHECK(run({"gen", "--bogus-flag", "1", "--out", f.dir("gx")}) == 2);
    CHECK(run({"frobnicate"}) == 2);
    CHECK(run({}) == 2);
    CHECK(run({"--help"}) == 0);
    CHECK(run({"evaluate", "--data", f.data, "--model", f.backbone, "--out",
               f.dir("efoci"), "--mode", "srp", "--ranking", "foci"}) == 3);
    CHECK(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
               f.dir("ek"), "--mode", "srp", "--kappa", "1.5"}) == 2);
    CHECK(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
               f.dir("em"), "--mode", "upside-down"}) == 2);
    CHECK(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
               f.dir("ea"), "--mode", "selected-only", "--adaptive-k", "abc"}) == 2);
    CHECK(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
               f.dir("ep"), "--mode", "deletion", "--predicted-class"}) == 2);
}

TEST_CASE("the thread budget is validated and clamped") {
    const auto& f = fixture();
    {
        EnvGuard guard("FOCI_THREADS", "abc");
        CHECK(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
                   f.dir("et_bad"), "--mode", "srp", "--kmax", "16"}) == 2);
    }
    {
        EnvGuard guard("FOCI_THREADS", "4");
        const std::string out = f.dir("et_ok");
        REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
                     out, "--mode", "srp", "--kmax", "16"}) == 0);
        const Json r = read_json(out + "/report_srp_native.json");
        CHECK(r.at("config").at("threads_requested").get<long>() == 4);
        CHECK(r.at("config").at("threads").get<long>() == 1);
    }
}

TEST_CASE("headroom reports carry the paired test") {
    const auto& f = fixture();
    const std::string out = f.dir("eval_shi");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out,
                 "--mode", "shi", "--kmax", "16"}) == 0);
    const Json r = read_json(out + "/report_shi.json");
    REQUIRE(r.contains("shi"));
    for (const char* key : {"msk_cond_base", "msk_cond_foci", "epsilon", "shi"})
        CHECK(r.at("shi").contains(key));
    REQUIRE(r.contains("wilcoxon"));
    CHECK(r.at("wilcoxon").contains("defined"));
    CHECK(r.at("wilcoxon").contains("p_two_sided"));
    const auto& rows = r.at("aggregates");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].at("ranking").get<std::string>() == "native");
    CHECK(rows[1].at("ranking").get<std::string>() == "foci");
    CHECK(r.at("slides")[0].contains("curve_native"));
    CHECK(r.at("slides")[0].contains("curve_foci"));
}

TEST_CASE("merging reports averages across seeds") {
    const auto& f = fixture();
    const fs::path dir = f.root / "merge_in";
    fs::create_directories(dir);
    std::vector<std::string> inputs;
    for (int i = 1; i <= 3; ++i) {
        Json row;
        row["ranking"] = "probe";
        row["seed"] = i;
        row["metric"] = static_cast<double>(i);
        Json rep;
        rep["aggregates"] = Json::array({row});
        const std::string path = (dir / ("r" + std::to_string(i) + ".json")).string();
        write_json(path, rep);
        inputs.push_back(path);
    }

    const std::string out3 = f.dir("merged3");
    auto args = std::vector<std::string>{"report"};
    args.insert(args.end(), inputs.begin(), inputs.end());
    args.insert(args.end(), {"--out", out3});
    REQUIRE(run(args) == 0);
    const Json m3 = read_json(out3 + "/merged.json");
    REQUIRE(m3.at("aggregates").size() == 1);
    const auto& row = m3.at("aggregates")[0];
    CHECK(row.at("ranking").get<std::string>() == "probe");
    CHECK(row.at("runs").get<std::size_t>() == 3);
    CHECK(row.at("metric_mean").get<double>() == 2.0);
    CHECK(row.at("metric_std").get<double>() == 1.0);
    CHECK_FALSE(row.contains("seed"));

    const std::string out1 = f.dir("merged1");
    REQUIRE(run({"report", inputs[0], "--out", out1}) == 0);
    const Json m1 = read_json(out1 + "/merged.json");
    const auto& solo = m1.at("aggregates")[0];
    CHECK(solo.at("metric_mean").get<double>() == 1.0);
    CHECK(solo.at("metric_std").get<double>() == 0.0);

    CHECK(run({"report", f.dir("does_not_exist.json"), "--out", f.dir("mx")}) == 3);
}

TEST_CASE("merging a real report keeps its aggregate values") {
    const auto& f = fixture();
    const std::string src = f.dir("eval_a") + "/report_srp_foci.json";
    if (!fs::exists(src)) {
        REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out",
                     f.dir("eval_a"), "--mode", "srp", "--ranking", "foci", "--kmax",
                     "16"}) == 0);
    }
    const std::string out = f.dir("merged_real");
    REQUIRE(run({"report", src, "--out", out}) == 0);
    const Json merged = read_json(out + "/merged.json");
    const Json source = read_json(src);
    REQUIRE(merged.at("aggregates").size() == 1);
    const auto& row = merged.at("aggregates")[0];
    const auto& orig = source.at("aggregates")[0];
    CHECK(row.at("reach_mean").get<double>() == orig.at("reach").get<double>());
    CHECK(row.at("aukc_mean_mean").get<double>() ==
          orig.at("aukc_mean").get<double>());
    CHECK(fs::exists(out + "/merged.svg"));
    CHECK(fs::exists(out + "/merged.csv"));
}

TEST_CASE("selected-only with a full budget matches the dataset AUC") {
    const auto& f = fixture();
    const std::string out = f.dir("eval_sel_only");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out,
                 "--mode", "selected-only", "--ranking", "foci", "--k", "100"}) ==
            0);
    const Json r = read_json(out + "/report_selected_only_foci.json");
    const Dataset data = cli::load_dataset(f.data);
    const auto model = load_backbone(f.selector);
    const double expect = dataset_auc(*model, data, data.splits.test);
    CHECK(r.at("aggregates")[0].at("auc").get<double>() == expect);
    for (const auto& s : r.at("slides"))
        CHECK(s.at("k_used").get<std::size_t>() <= 12);

    const std::string out2 = f.dir("eval_sel_adaptive");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out2,
                 "--mode", "selected-only", "--ranking", "foci", "--adaptive-k",
                 "0.25,2"}) == 0);
    const Json r2 = read_json(out2 + "/report_selected_only_foci.json");
    CHECK(r2.at("aggregates")[0].at("k").is_null());
    CHECK(r2.at("aggregates")[0].at("alpha").get<double>() == 0.25);
    for (const auto& s : r2.at("slides")) {
        const auto* bag = data.find(s.at("id").get<std::string>());
        REQUIRE(bag != nullptr);
        CHECK(s.at("k_used").get<std::size_t>() ==
              adaptive_k(bag->n_real, 0.25, 2));
    }
}

TEST_CASE("deletion reports flag truncated slides") {
    const auto& f = fixture();
    const std::string out = f.dir("eval_del");
    REQUIRE(run({"evaluate", "--data", f.data, "--model", f.selector, "--out", out,
                 "--mode", "deletion", "--ranking", "native"}) == 0);
    const Json r = read_json(out + "/report_deletion_native.json");
    const auto& row = r.at("aggregates")[0];
    CHECK(row.at("truncated_slides").get<std::size_t>() ==
          row.at("n_slides").get<std::size_t>());
    for (const auto& s : r.at("slides")) {
        CHECK(s.at("truncated").get<bool>());
        CHECK(s.at("grid").empty());
        CHECK(s.at("delta_p_at_0").get<double>() == 0.0);
    }
}

TEST_CASE("the installed binary behaves like the library entry point") {
    const char* cli = std::getenv("FOCI_CLI");
    REQUIRE(cli != nullptr);
    const auto& f = fixture();
    auto shell = [&](const std::string& tail) {
        const std::string cmd =
            std::string(cli) + " " + tail + " >/dev/null 2>&1";
        const int rc = std::system(cmd.c_str());
        REQUIRE(rc != -1);
        return WEXITSTATUS(rc);
    };
    CHECK(shell("--help") == 0);
    CHECK(shell("frobnicate") == 2);
    CHECK(shell("train-backbone --data " + f.dir("missing") + " --out " +
                f.dir("sub.foci")) == 3);
    CHECK(shell("gen --out " + f.dir("sub_gen") +
                " --slides 6 --tiles-min 4 --tiles-max 6 --dim 4 "
                "--evidence-min 1 --evidence-max 2") == 0);
    CHECK(cli::load_dataset(f.dir("sub_gen")).bags.size() == 6);
}
