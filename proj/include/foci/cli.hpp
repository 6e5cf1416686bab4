#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "foci/bag_io.hpp"
#include "foci/checkpoint.hpp"
#include "foci/report.hpp"
#include "foci/selector.hpp"
#include "foci/srp.hpp"
#include "foci/training.hpp"

namespace foci {
namespace cli {

namespace fs = std::filesystem;

struct Threads {
    long requested = 1;
    long effective = 1;
};

// FOCI_THREADS caps evaluation parallelism. This build evaluates bags
// sequentially, so the effective count is always 1; the variable is still
// validated and echoed into reports.
inline Threads thread_budget() {
    Threads t;
    const char* env = std::getenv("FOCI_THREADS");
    if (!env || !*env) return t;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0)
        throw ConfigError("FOCI_THREADS must be a positive integer");
    t.requested = v;
    return t;
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds = load_bags(dir + "/bags.focb");
    ds.splits = load_manifest(dir + "/manifest.json");
    return ds;
}

inline std::vector<std::string> sorted_ids(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ----- gen -----

struct GenArgs {
    std::string out;
    SynthConfig cfg;
};

inline int cmd_gen(const GenArgs& a) {
    auto [data, truth] = generate_synthetic(a.cfg);
    fs::create_directories(a.out);
    save_bags(a.out + "/bags.focb", data);
    save_manifest(a.out + "/manifest.json", data.splits);
    save_truth(a.out + "/truth.json", truth);
    std::printf("wrote %zu bags (d=%zu, train/val/test %zu/%zu/%zu) to %s\n",
                data.bags.size(), data.feature_dim, data.splits.train.size(),
                data.splits.val.size(), data.splits.test.size(), a.out.c_str());
    return 0;
}

// ----- train-backbone -----

struct TrainBackboneArgs {
    std::string data;
    std::string out;
    std::string history;
    std::string arch = "attnpool";
    std::size_t hidden = 64;
    std::size_t blocks = 2;
    std::size_t heads = 4;
    std::size_t pool_k = 8;
    BackboneTrainConfig cfg;
};

inline std::unique_ptr<Backbone> make_backbone(const std::string& arch, std::size_t d,
                                               std::size_t h, std::size_t C,
                                               std::size_t blocks, std::size_t heads,
                                               std::size_t pool_k, std::uint64_t seed) {
    if (arch == "attnpool") return std::make_unique<AttentionPoolModel>(d, h, C, seed);
    if (arch == "transformer")
        return std::make_unique<ClsTransformerModel>(d, h, C, blocks, heads, seed);
    if (arch == "hardtopk")
        return std::make_unique<HardTopKModel>(d, h, C, pool_k, seed);
    throw ConfigError("unknown architecture '" + arch + "'");
}

inline int cmd_train_backbone(const TrainBackboneArgs& a) {
    const Dataset data = load_dataset(a.data);
    auto model = make_backbone(a.arch, data.feature_dim, a.hidden, data.num_classes,
                               a.blocks, a.heads, a.pool_k, a.cfg.seed);
    const auto history = train_backbone(*model, data, a.cfg);
    if (!a.out.empty()) {
        if (const auto dir = fs::path(a.out).parent_path(); !dir.empty())
            fs::create_directories(dir);
    }
    save_backbone(a.out, *model);
    if (!a.history.empty()) {
        std::ofstream os(a.history, std::ios::binary);
        if (!os) throw DataError("history: cannot write " + a.history);
        for (const auto& e : history) {
            Json j;
            j["epoch"] = e.epoch;
            j["train_loss"] = e.train_loss;
            j["val_auc"] = e.val_auc;
            append_jsonl(os, j);
        }
    }
    if (history.empty())
        std::printf("trained %s for 0 epochs\n", a.arch.c_str());
    else
        std::printf("trained %s: final val AUC %.4f\n", a.arch.c_str(),
                    history.back().val_auc);
    return 0;
}

// ----- train-selector -----

struct TrainSelectorArgs {
    std::string data;
    std::string backbone;
    std::string out;
    std::string history;
    std::string gate = "ste";
    std::string ablate;
    TrainConfig cfg;
};

inline int cmd_train_selector(TrainSelectorArgs a) {
    a.cfg.gate.mode = a.gate == "soft" ? GateMode::Soft : GateMode::HardTopK;
    if (!a.ablate.empty()) a.cfg.weights = ablated(a.cfg.weights, a.ablate);
    const Dataset data = load_dataset(a.data);
    const auto model = load_backbone(a.backbone);
    SelectorHead head(model->h(), a.cfg.seed);
    const auto history = train_selector(*model, head, data, a.cfg);
    if (const auto dir = fs::path(a.out).parent_path(); !dir.empty())
        fs::create_directories(dir);
    save_selector(a.out, *model, head);
    if (!a.history.empty()) {
        std::ofstream os(a.history, std::ios::binary);
        if (!os) throw DataError("history: cannot write " + a.history);
        for (const auto& e : history) {
            Json j;
            j["epoch"] = e.epoch;
            j["lr"] = e.lr;
            j["full"] = e.mean.full;
            j["suff"] = e.mean.suff;
            j["hinge"] = e.mean.hinge;
            j["excl"] = e.mean.excl;
            j["contig"] = e.mean.contig;
            j["budget"] = e.mean.budget;
            j["entropy"] = e.mean.entropy;
            j["total"] = e.mean.total;
            j["drop_skipped"] = e.drop_skipped;
            j["contig_skipped"] = e.contig_skipped;
            append_jsonl(os, j);
        }
    }
    if (history.empty())
        std::printf("selector trained for 0 epochs\n");
    else
        std::printf("selector trained: final mean objective %.6f\n",
                    history.back().mean.total);
    return 0;
}

// ----- evaluate -----

struct EvalArgs {
    std::string data;
    std::string model;
    std::string out;
    std::string mode;
    std::string ranking = "native";
    double kappa = 0.9;
    std::size_t kmax = 256;
    std::size_t ncap = 1024;
    std::size_t k = 32;
    bool adaptive = false;
    double alpha = 0.03;
    std::size_t kmin = 16;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds;
    bool predicted_class = false;
    bool kappa_sweep = false;
    bool ncap_sweep = false;
};

inline std::vector<double> ranking_scores(const std::string& tag, const Backbone& model,
                                          const SelectorHead* head, const Bag& bag,
                                          std::uint64_t seed) {
    if (tag == "native") return native_ranking(model, bag);
    if (tag == "foci") {
        if (!head) throw ConfigError("foci ranking needs a selector checkpoint");
        return score_tiles(*head, model, bag);
    }
    if (tag == "random") return random_ranking(bag, seed);
    throw ConfigError("unknown ranking '" + tag + "'");
}

namespace detail {

struct SlideCurves {
    const Bag* bag = nullptr;
    std::size_t n_after = 0;
    KCurve curve;
    std::optional<KCurve> pred;
    std::size_t y_hat = 0;
};

inline std::vector<SlideCurves> srp_curves(const Backbone& model,
                                           const SelectorHead* head, const Dataset& data,
                                           const std::vector<std::string>& ids,
                                           const std::string& tag, std::uint64_t seed,
                                           std::size_t ncap, std::size_t kmax,
                                           bool predicted) {
    std::vector<SlideCurves> out;
    for (const auto& id : ids) {
        const Bag* raw = data.find(id);
        if (!raw) throw DataError("dataset: unknown bag id " + id);
        const Bag filtered =
            raw->n_real > ncap ? prefilter_topnorm(*raw, ncap) : *raw;
        const auto scores = ranking_scores(tag, model, head, filtered, seed);
        SlideCurves sc;
        sc.bag = raw;
        sc.n_after = filtered.n_real;
        sc.curve = reveal_curve(model, filtered, scores,
                                reveal_schedule(filtered.n_real, kmax), tag);
        if (predicted) {
            const auto full = forward(model, filtered);
            sc.y_hat = full.probs.at(0, 1) > full.probs.at(0, 0) ? 1 : 0;
            sc.pred = predicted_class_curve(sc.curve, sc.y_hat, raw->label);
        }
        out.push_back(std::move(sc));
    }
    return out;
}

inline Json srp_aggregate_row(const std::vector<SlideCurves>& slides,
                              const std::string& tag, std::uint64_t seed, double kappa,
                              std::size_t ncap, std::size_t kmax, bool predicted) {
    std::vector<SrpSlideSummary> base, pred;
    std::vector<double> aukcs, aukcs_pred;
    for (const auto& sc : slides) {
        base.push_back(summarize_slide(sc.curve, sc.bag->label, kappa));
        aukcs.push_back(base.back().aukc);
        if (predicted) {
            pred.push_back(summarize_slide(*sc.pred, sc.bag->label, kappa));
            aukcs_pred.push_back(pred.back().aukc);
        }
    }
    Json row;
    row["ranking"] = tag;
    row["seed"] = seed;
    row["kappa"] = kappa;
    row["ncap"] = ncap;
    row["kmax"] = kmax;
    row["n_slides"] = slides.size();
    row["reach"] = reach(base);
    const auto cond = msk_cond(base);
    row["msk_cond"] = cond ? Json(*cond) : Json(nullptr);
    row["aukc_mean"] = mean_of(aukcs);
    row["aukc_std"] = sample_std(aukcs);
    if (predicted) {
        row["reach_pred"] = reach(pred);
        const auto cond_pred = msk_cond(pred);
        row["msk_cond_pred"] = cond_pred ? Json(*cond_pred) : Json(nullptr);
        row["aukc_pred_mean"] = mean_of(aukcs_pred);
        row["aukc_pred_std"] = sample_std(aukcs_pred);
    }
    return row;
}

inline PlotSeries mean_reveal_series(const std::string& name, bool dashed,
                                     const std::vector<SlideCurves>& slides) {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const auto& sc : slides)
        for (std::size_t j = 0; j < sc.curve.schedule.size(); ++j) {
            auto& cell = acc[sc.curve.schedule[j]];
            cell.first += sc.curve.probs.at(j, sc.bag->label);
            cell.second += 1;
        }
    PlotSeries s;
    s.name = name;
    s.dashed = dashed;
    for (const auto& [k, cell] : acc) {
        s.xs.push_back(static_cast<double>(k));
        s.ys.push_back(cell.first / static_cast<double>(cell.second));
    }
    return s;
}

inline Json slide_row(const SlideCurves& sc, double kappa, bool predicted) {
    Json s;
    s["id"] = sc.bag->id;
    s["label"] = sc.bag->label;
    s["n_real"] = sc.n_after;
    s["ranking"] = sc.curve.ranking;
    s["curve"] = curve_json(sc.curve);
    s["summary"] = summary_json(summarize_slide(sc.curve, sc.bag->label, kappa));
    if (predicted) {
        s["y_hat"] = sc.y_hat;
        s["summary_pred"] =
            summary_json(summarize_slide(*sc.pred, sc.bag->label, kappa));
    }
    return s;
}

} // namespace detail

inline Json eval_config_json(const EvalArgs& a, const Threads& t) {
    Json c;
    c["command"] = "evaluate";
    c["mode"] = a.mode;
    c["data"] = a.data;
    c["model"] = a.model;
    c["ranking"] = a.ranking;
    c["kappa"] = a.kappa;
    c["kmax"] = a.kmax;
    c["ncap"] = a.ncap;
    if (a.adaptive) {
        c["k"] = nullptr;
        Json ad;
        ad["alpha"] = a.alpha;
        ad["k_min"] = a.kmin;
        c["adaptive"] = ad;
    } else {
        c["k"] = a.k;
        c["adaptive"] = nullptr;
    }
    c["seeds"] = a.seeds;
    c["predicted_class"] = a.predicted_class;
    c["kappa_sweep"] = a.kappa_sweep;
    c["ncap_sweep"] = a.ncap_sweep;
    c["threads_requested"] = t.requested;
    c["threads"] = t.effective;
    Json inputs;
    inputs["bags"] = file_checksum(a.data + "/bags.focb");
    inputs["manifest"] = file_checksum(a.data + "/manifest.json");
    inputs["model"] = file_checksum(a.model);
    c["inputs"] = inputs;
    return c;
}

inline void emit_report(const std::string& dir, const std::string& stem, Json report,
                        const Json& aggregates,
                        const std::vector<PlotSeries>& series,
                        std::optional<double> threshold, const std::string& title,
                        const std::string& x_label, const std::string& y_label) {
    fs::create_directories(dir);
    report["generated_at"] = timestamp_utc();
    write_json(dir + "/" + stem + ".json", report);
    write_text(dir + "/" + stem + ".csv", csv_flatten(aggregates));
    if (!series.empty())
        write_text(dir + "/" + stem + ".svg",
                   svg_plot(title, x_label, y_label, series, threshold));
    std::printf("wrote %s/%s.{json,csv%s}\n", dir.c_str(), stem.c_str(),
                series.empty() ? "" : ",svg");
}

inline int cmd_evaluate(EvalArgs a) {
    validate(SrpConfig{a.kappa, a.kmax, a.ncap});
    if (a.seeds.empty()) a.seeds = {a.seed};
    if (a.predicted_class && a.mode != "srp")
        throw ConfigError("predicted-class applies to reveal-curve mode only");
    if (a.kappa_sweep && a.mode != "srp")
        throw ConfigError("kappa sweep applies to reveal-curve mode only");
    if (a.ncap_sweep && a.mode != "srp" && a.mode != "deletion")
        throw ConfigError("ncap sweep applies to reveal and deletion modes only");
    const Threads threads = thread_budget();
    const Dataset data = load_dataset(a.data);
    const auto model = load_backbone(a.model);
    std::unique_ptr<SelectorHead> head;
    if (a.ranking == "foci" || a.mode == "shi") head = load_selector(a.model);
    const auto ids = sorted_ids(data.splits.test);
    if (ids.empty()) throw DataError("dataset: empty test split");
    // deterministic rankings do not vary with the control seed
    const std::vector<std::uint64_t> seeds =
        a.ranking == "random" ? a.seeds
                              : std::vector<std::uint64_t>{a.seeds.front()};
    const std::vector<double> kappas =
        a.kappa_sweep ? std::vector<double>{0.7, 0.8, 0.9, 0.95}
                      : std::vector<double>{a.kappa};
    const std::vector<std::size_t> ncaps =
        a.ncap_sweep ? std::vector<std::size_t>{256, 512, 1024, 2048}
                     : std::vector<std::size_t>{a.ncap};

    Json report;
    report["generated_at"] = "";
    report["config"] = eval_config_json(a, threads);

    if (a.mode == "srp") {
        Json slides = Json::array();
        Json aggregates = Json::array();
        std::vector<PlotSeries> series;
        for (std::size_t ncap : ncaps)
            for (std::uint64_t seed : seeds) {
                const auto curves =
                    detail::srp_curves(*model, head.get(), data, ids, a.ranking, seed,
                                       ncap, a.kmax, a.predicted_class);
                for (const auto& sc : curves) {
                    Json row = detail::slide_row(sc, a.kappa, a.predicted_class);
                    row["ncap"] = ncap;
                    row["seed"] = seed;
                    slides.push_back(std::move(row));
                }
                for (double kappa : kappas)
                    aggregates.push_back(detail::srp_aggregate_row(
                        curves, a.ranking, seed, kappa, ncap, a.kmax,
                        a.predicted_class));
                std::string name = a.ranking;
                if (seeds.size() > 1) name += " seed " + std::to_string(seed);
                if (ncaps.size() > 1) name += " ncap " + std::to_string(ncap);
                series.push_back(
                    detail::mean_reveal_series(name, a.ranking == "foci", curves));
            }
        report["slides"] = std::move(slides);
        report["aggregates"] = aggregates;
        emit_report(a.out, "report_srp_" + a.ranking, std::move(report), aggregates,
                    series, a.kappa, "reveal curves (" + a.ranking + ")",
                    "tiles revealed", "true-class probability");
        return 0;
    }

    if (a.mode == "deletion") {
        Json slides = Json::array();
        Json aggregates = Json::array();
        std::vector<PlotSeries> series;
        for (std::size_t ncap : ncaps)
            for (std::uint64_t seed : seeds) {
                std::vector<double> aucs;
                std::size_t truncated = 0;
                std::map<std::size_t, std::pair<double, std::size_t>> acc;
                for (const auto& id : ids) {
                    const Bag* raw = data.find(id);
                    const Bag filtered =
                        raw->n_real > ncap ? prefilter_topnorm(*raw, ncap) : *raw;
                    const auto scores =
                        ranking_scores(a.ranking, *model, head.get(), filtered, seed);
                    const auto curve = deletion_curve(*model, filtered, scores,
                                                      raw->label, a.ranking);
                    Json row = deletion_json(curve);
                    row["label"] = raw->label;
                    row["ncap"] = ncap;
                    row["seed"] = seed;
                    slides.push_back(std::move(row));
                    aucs.push_back(deletion_auc(curve));
                    truncated += curve.truncated ? 1 : 0;
                    for (std::size_t j = 0; j < curve.grid.size(); ++j) {
                        auto& cell = acc[curve.grid[j]];
                        cell.first += curve.delta_p[j];
                        cell.second += 1;
                    }
                }
                Json row;
                row["ranking"] = a.ranking;
                row["seed"] = seed;
                row["ncap"] = ncap;
                row["n_slides"] = ids.size();
                row["truncated_slides"] = truncated;
                row["deletion_auc_mean"] = mean_of(aucs);
                row["deletion_auc_std"] = sample_std(aucs);
                aggregates.push_back(std::move(row));
                PlotSeries s;
                s.name = a.ranking;
                s.dashed = a.ranking == "foci";
                for (const auto& [k, cell] : acc) {
                    s.xs.push_back(static_cast<double>(k));
                    s.ys.push_back(cell.first / static_cast<double>(cell.second));
                }
                if (!s.xs.empty()) series.push_back(std::move(s));
            }
        report["slides"] = std::move(slides);
        report["aggregates"] = aggregates;
        emit_report(a.out, "report_deletion_" + a.ranking, std::move(report),
                    aggregates, series, std::nullopt,
                    "deletion perturbation (" + a.ranking + ")", "tiles deleted",
                    "confidence drop");
        return 0;
    }

    if (a.mode == "selected-only") {
        Json slides = Json::array();
        Json aggregates = Json::array();
        std::vector<PlotSeries> series;
        for (std::uint64_t seed : seeds) {
            std::vector<double> probs;
            std::vector<std::size_t> labels;
            double mean_k = 0.0;
            for (const auto& id : ids) {
                const Bag* bag = data.find(id);
                const std::size_t budget =
                    a.adaptive ? adaptive_k(bag->n_real, a.alpha, a.kmin) : a.k;
                const auto scores =
                    ranking_scores(a.ranking, *model, head.get(), *bag, seed);
                const auto keep =
                    topk_indices(scores, std::min(budget, bag->n_real));
                PaddingMask mask;
                mask.excluded.assign(bag->n_real, 1);
                for (std::size_t i : keep) mask.excluded[i] = 0;
                const double p = forward(*model, *bag, mask).probs.at(0, 1);
                Json row;
                row["id"] = id;
                row["label"] = bag->label;
                row["k_used"] = keep.size();
                row["prob"] = p;
                row["seed"] = seed;
                slides.push_back(std::move(row));
                probs.push_back(p);
                labels.push_back(bag->label);
                mean_k += static_cast<double>(keep.size());
            }
            mean_k /= static_cast<double>(ids.size());
            Json row;
            row["ranking"] = a.ranking;
            row["seed"] = seed;
            row["k"] = a.adaptive ? Json(nullptr) : Json(a.k);
            row["alpha"] = a.adaptive ? Json(a.alpha) : Json(nullptr);
            row["k_min"] = a.adaptive ? Json(a.kmin) : Json(nullptr);
            row["n_slides"] = ids.size();
            row["auc"] = roc_auc(probs, labels);
            aggregates.push_back(std::move(row));
            PlotSeries s;
            s.name = a.ranking + " seed " + std::to_string(seed);
            s.xs = {mean_k};
            s.ys = {aggregates.back()["auc"].get<double>()};
            series.push_back(std::move(s));
        }
        report["slides"] = std::move(slides);
        report["aggregates"] = aggregates;
        emit_report(a.out, "report_selected_only_" + a.ranking, std::move(report),
                    aggregates, series, std::nullopt, "selected-only evaluation",
                    "mean tiles kept", "classification AUC");
        return 0;
    }

    if (a.mode == "shi") {
        const std::uint64_t seed = seeds.front();
        const auto base_curves = detail::srp_curves(
            *model, head.get(), data, ids, "native", seed, a.ncap, a.kmax, false);
        const auto foci_curves = detail::srp_curves(
            *model, head.get(), data, ids, "foci", seed, a.ncap, a.kmax, false);
        Json slides = Json::array();
        std::vector<SrpSlideSummary> base_sum, foci_sum;
        std::vector<double> paired;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Bag* bag = base_curves[i].bag;
            const auto sb = summarize_slide(base_curves[i].curve, bag->label, a.kappa);
            const auto sf = summarize_slide(foci_curves[i].curve, bag->label, a.kappa);
            Json row;
            row["id"] = bag->id;
            row["label"] = bag->label;
            row["n_real"] = base_curves[i].n_after;
            row["curve_native"] = curve_json(base_curves[i].curve);
            row["curve_foci"] = curve_json(foci_curves[i].curve);
            row["summary_native"] = summary_json(sb);
            row["summary_foci"] = summary_json(sf);
            slides.push_back(std::move(row));
            if (sb.msk && sf.msk)
                paired.push_back(static_cast<double>(*sb.msk) -
                                 static_cast<double>(*sf.msk));
            base_sum.push_back(sb);
            foci_sum.push_back(sf);
        }
        Json aggregates = Json::array();
        aggregates.push_back(detail::srp_aggregate_row(base_curves, "native", seed,
                                                       a.kappa, a.ncap, a.kmax, false));
        aggregates.push_back(detail::srp_aggregate_row(foci_curves, "foci", seed,
                                                       a.kappa, a.ncap, a.kmax, false));
        report["slides"] = std::move(slides);
        report["aggregates"] = aggregates;
        report["shi"] = shi_json(shi(msk_cond(base_sum), msk_cond(foci_sum)));
        report["wilcoxon"] = wilcoxon_json(wilcoxon_signed_rank(paired));
        const std::vector<PlotSeries> series = {
            detail::mean_reveal_series("native", false, base_curves),
            detail::mean_reveal_series("foci", true, foci_curves)};
        emit_report(a.out, "report_shi", std::move(report), aggregates, series,
                    a.kappa, "native vs rationale reveal", "tiles revealed",
                    "true-class probability");
        return 0;
    }

    throw ConfigError("unknown mode '" + a.mode + "'");
}

// ----- report merge -----

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

namespace detail {

inline bool is_identity_key(const std::string& key) {
    static const char* keys[] = {"ranking", "kappa", "ncap", "kmax", "k",
                                 "alpha", "k_min", "adaptive"};
    for (const char* k : keys)
        if (key == k) return true;
    return false;
}

// Per-report mean reveal curve (or deletion curve) keyed by ranking tag.
using MeanCurve = std::map<std::size_t, double>;

inline void accumulate_curve(std::map<std::string, MeanCurve>& sums,
                             std::map<std::string, std::map<std::size_t, std::size_t>>& counts,
                             const Json& curve, std::size_t label) {
    const std::string tag = curve.at("ranking").get<std::string>();
    const auto& schedule = curve.at("schedule");
    const auto& probs = curve.at("probs");
    for (std::size_t j = 0; j < schedule.size(); ++j) {
        const std::size_t k = schedule[j].get<std::size_t>();
        sums[tag][k] += probs[j][label].get<double>();
        counts[tag][k] += 1;
    }
}

inline std::map<std::string, MeanCurve> report_mean_curves(const Json& report) {
    std::map<std::string, MeanCurve> sums;
    std::map<std::string, std::map<std::size_t, std::size_t>> counts;
    if (!report.contains("slides")) return sums;
    for (const auto& slide : report.at("slides")) {
        if (slide.contains("curve"))
            accumulate_curve(sums, counts, slide.at("curve"),
                             slide.at("label").get<std::size_t>());
        if (slide.contains("curve_native"))
            accumulate_curve(sums, counts, slide.at("curve_native"),
                             slide.at("label").get<std::size_t>());
        if (slide.contains("curve_foci"))
            accumulate_curve(sums, counts, slide.at("curve_foci"),
                             slide.at("label").get<std::size_t>());
        if (slide.contains("grid")) {
            const std::string tag = slide.at("ranking").get<std::string>();
            const auto& grid = slide.at("grid");
            const auto& dp = slide.at("delta_p");
            for (std::size_t j = 0; j < grid.size(); ++j) {
                sums[tag][grid[j].get<std::size_t>()] += dp[j].get<double>();
                counts[tag][grid[j].get<std::size_t>()] += 1;
            }
        }
    }
    for (auto& [tag, curve] : sums)
        for (auto& [k, v] : curve) v /= static_cast<double>(counts[tag][k]);
    return sums;
}

} // namespace detail

inline int cmd_report(const ReportArgs& a) {
    if (a.inputs.empty()) throw ConfigError("report: no input reports");
    std::vector<Json> reports;
    Json inputs = Json::array();
    for (const auto& path : a.inputs) {
        reports.push_back(read_json(path));
        Json rec;
        rec["path"] = path;
        rec["checksum"] = file_checksum(path);
        inputs.push_back(std::move(rec));
    }

    // group aggregate rows across reports by their identity fields
    std::vector<std::string> group_order;
    std::map<std::string, Json> group_identity;
    std::map<std::string, std::vector<std::string>> group_fields;
    std::map<std::string, std::map<std::string, std::vector<double>>> group_values;
    std::map<std::string, std::size_t> group_rows;
    for (const auto& rep : reports) {
        if (!rep.contains("aggregates"))
            throw DataError("report: input lacks an aggregates section");
        for (const auto& row : rep.at("aggregates")) {
            Json identity;
            for (const auto& [key, value] : row.items())
                if (detail::is_identity_key(key)) identity[key] = value;
            const std::string gk = identity.dump();
            if (!group_identity.count(gk)) {
                group_order.push_back(gk);
                group_identity[gk] = identity;
            }
            group_rows[gk] += 1;
            for (const auto& [key, value] : row.items()) {
                if (detail::is_identity_key(key) || key == "seed") continue;
                if (!value.is_number() && !value.is_null()) continue;
                auto& fields = group_fields[gk];
                if (std::find(fields.begin(), fields.end(), key) == fields.end())
                    fields.push_back(key);
                if (value.is_number())
                    group_values[gk][key].push_back(value.get<double>());
            }
        }
    }

    Json merged_rows = Json::array();
    for (const auto& gk : group_order) {
        Json row = group_identity[gk];
        row["runs"] = group_rows[gk];
        for (const auto& field : group_fields[gk]) {
            const auto it = group_values[gk].find(field);
            if (it == group_values[gk].end() || it->second.empty()) {
                row[field + "_mean"] = nullptr;
                row[field + "_std"] = nullptr;
                continue;
            }
            const MeanStd m = merge_values(it->second);
            row[field + "_mean"] = m.mean;
            row[field + "_std"] = m.std;
        }
        merged_rows.push_back(std::move(row));
    }

    Json merged;
    merged["generated_at"] = "";
    Json cfg;
    cfg["command"] = "report";
    cfg["inputs"] = inputs;
    merged["config"] = std::move(cfg);
    merged["aggregates"] = merged_rows;

    std::vector<double> shi_values;
    for (const auto& rep : reports)
        if (rep.contains("shi") && rep.at("shi").at("shi").is_number())
            shi_values.push_back(rep.at("shi").at("shi").get<double>());
    if (!shi_values.empty()) {
        const MeanStd m = merge_values(shi_values);
        Json s;
        s["values"] = shi_values;
        s["mean"] = m.mean;
        s["std"] = m.std;
        merged["shi"] = std::move(s);
    }

    // one series per ranking: mean over each report's per-slide mean curve,
    // with a one-standard-deviation band when several reports contribute
    std::map<std::string, std::map<std::size_t, std::vector<double>>> by_tag;
    for (const auto& rep : reports)
        for (const auto& [tag, curve] : detail::report_mean_curves(rep))
            for (const auto& [k, v] : curve) by_tag[tag][k].push_back(v);
    std::vector<PlotSeries> series;
    for (const auto& [tag, points] : by_tag) {
        PlotSeries s;
        s.name = tag;
        s.dashed = tag == "foci";
        bool banded = false;
        for (const auto& [k, values] : points) {
            const MeanStd m = merge_values(values);
            s.xs.push_back(static_cast<double>(k));
            s.ys.push_back(m.mean);
            s.lo.push_back(m.mean - m.std);
            s.hi.push_back(m.mean + m.std);
            if (values.size() > 1) banded = true;
        }
        if (!banded) {
            s.lo.clear();
            s.hi.clear();
        }
        series.push_back(std::move(s));
    }
    std::optional<double> threshold;
    if (reports.front().contains("config") &&
        reports.front().at("config").contains("kappa"))
        threshold = reports.front().at("config").at("kappa").get<double>();

    fs::create_directories(a.out);
    merged["generated_at"] = timestamp_utc();
    write_json(a.out + "/merged.json", merged);
    write_text(a.out + "/merged.csv", csv_flatten(merged_rows));
    if (!series.empty())
        write_text(a.out + "/merged.svg",
                   svg_plot("merged evaluation", "tiles", "mean value", series,
                            threshold));
    std::printf("merged %zu reports into %s/merged.{json,csv%s}\n", reports.size(),
                a.out.c_str(), series.empty() ? "" : ",svg");
    return 0;
}

// ----- argument surface -----

inline int dispatch(std::vector<std::string> args) {
    CLI::App app{"audit toolkit for frozen bag-of-tiles classifiers"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* cgen = app.add_subcommand("gen", "generate a planted-evidence dataset");
    cgen->add_option("--out", gen.out, "output directory")->required();
    cgen->add_option("--seed", gen.cfg.seed, "generator seed");
    cgen->add_option("--slides", gen.cfg.n_slides, "number of bags");
    cgen->add_option("--tiles-min", gen.cfg.tiles_min, "minimum tiles per bag");
    cgen->add_option("--tiles-max", gen.cfg.tiles_max, "maximum tiles per bag");
    cgen->add_option("--dim", gen.cfg.d, "feature dimension");
    cgen->add_option("--evidence-min", gen.cfg.evidence_min, "minimum evidence tiles");
    cgen->add_option("--evidence-max", gen.cfg.evidence_max, "maximum evidence tiles");
    cgen->add_option("--separation", gen.cfg.evidence_separation,
                     "evidence mean separation");
    cgen->add_option("--noise", gen.cfg.noise_sigma, "feature noise sigma");

    TrainBackboneArgs tb;
    auto* ctb = app.add_subcommand("train-backbone", "train and freeze a backbone");
    ctb->add_option("--data", tb.data, "dataset directory")->required();
    ctb->add_option("--out", tb.out, "checkpoint path")->required();
    ctb->add_option("--arch", tb.arch, "backbone archetype")
        ->check(CLI::IsMember({"attnpool", "transformer", "hardtopk"}));
    ctb->add_option("--hidden", tb.hidden, "hidden width");
    ctb->add_option("--blocks", tb.blocks, "transformer blocks");
    ctb->add_option("--heads", tb.heads, "transformer heads");
    ctb->add_option("--pool-k", tb.pool_k, "hard-top-k pool size");
    ctb->add_option("--epochs", tb.cfg.epochs, "training epochs");
    ctb->add_option("--lr", tb.cfg.lr, "learning rate");
    ctb->add_option("--wd", tb.cfg.weight_decay, "weight decay");
    ctb->add_option("--seed", tb.cfg.seed, "training seed");
    ctb->add_option("--history", tb.history, "JSONL history path");

    TrainSelectorArgs ts;
    auto* cts = app.add_subcommand("train-selector",
                                   "train a rationale head over a frozen backbone");
    cts->add_option("--data", ts.data, "dataset directory")->required();
    cts->add_option("--backbone", ts.backbone, "frozen backbone checkpoint")->required();
    cts->add_option("--out", ts.out, "output checkpoint path")->required();
    cts->add_option("--gate", ts.gate, "gate mode")
        ->check(CLI::IsMember({"soft", "ste"}));
    cts->add_option("--k", ts.cfg.gate.k, "hard gate budget");
    cts->add_option("--temperature", ts.cfg.gate.temperature, "soft gate temperature");
    cts->add_option("--epochs", ts.cfg.epochs, "training epochs");
    cts->add_option("--warmup", ts.cfg.warmup_epochs, "warmup epochs");
    cts->add_option("--lr", ts.cfg.base_lr, "base learning rate");
    cts->add_option("--floor-lr", ts.cfg.floor_lr, "final learning rate");
    cts->add_option("--lr-mult", ts.cfg.lr_multiplier, "selector LR multiplier");
    cts->add_option("--wd", ts.cfg.weight_decay, "weight decay");
    cts->add_option("--batch", ts.cfg.batch_size, "bags per optimizer step");
    cts->add_option("--lambda-suff", ts.cfg.weights.suff, "keep-view CE weight");
    cts->add_option("--lambda-hinge", ts.cfg.weights.hinge, "keep-view hinge weight");
    cts->add_option("--lambda-excl", ts.cfg.weights.excl, "drop-view exclusion weight");
    cts->add_option("--lambda-contig", ts.cfg.weights.contig, "spatial spread weight");
    cts->add_option("--lambda-budget", ts.cfg.weights.budget, "mask budget weight");
    cts->add_option("--lambda-entropy", ts.cfg.weights.entropy,
                    "soft gate entropy weight");
    cts->add_option("--tau", ts.cfg.weights.tau, "keep-view confidence target");
    cts->add_option("--beta", ts.cfg.weights.beta, "drop-view confidence tolerance");
    cts->add_option("--ablate", ts.ablate, "zero one loss term")
        ->check(CLI::IsMember({"suff", "hinge", "excl", "contig", "budget", "entropy"}));
    cts->add_option("--seed", ts.cfg.seed, "training seed");
    cts->add_option("--history", ts.history, "JSONL history path");

    EvalArgs ev;
    std::string adaptive_spec;
    auto* cev = app.add_subcommand("evaluate", "run the audit protocol");
    cev->add_option("--data", ev.data, "dataset directory")->required();
    cev->add_option("--model", ev.model, "checkpoint path")->required();
    cev->add_option("--out", ev.out, "report directory")->required();
    cev->add_option("--mode", ev.mode, "evaluation mode")
        ->required()
        ->check(CLI::IsMember({"srp", "deletion", "selected-only", "shi"}));
    cev->add_option("--ranking", ev.ranking, "tile ranking source")
        ->check(CLI::IsMember({"native", "foci", "random"}));
    cev->add_option("--kappa", ev.kappa, "confidence threshold");
    cev->add_option("--kmax", ev.kmax, "reveal budget");
    cev->add_option("--ncap", ev.ncap, "pre-filter budget");
    cev->add_option("--k", ev.k, "selected-only budget");
    cev->add_option("--adaptive-k", adaptive_spec,
                    "selected-only adaptive rule alpha,kmin");
    cev->add_option("--seed", ev.seed, "random-ranking seed");
    cev->add_option("--seeds", ev.seeds, "random-ranking seed list")->delimiter(',');
    cev->add_flag("--predicted-class", ev.predicted_class,
                  "also track the full-bag predicted class");
    cev->add_flag("--kappa-sweep", ev.kappa_sweep, "sweep kappa over 0.7..0.95");
    cev->add_flag("--ncap-sweep", ev.ncap_sweep, "sweep ncap over 256..2048");

    ReportArgs rp;
    auto* crp = app.add_subcommand("report", "merge per-seed reports");
    crp->add_option("inputs", rp.inputs, "report JSON files")->required();
    crp->add_option("--out", rp.out, "output directory")->required();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (!adaptive_spec.empty()) {
        std::istringstream is(adaptive_spec);
        char comma = '\0';
        if (!(is >> ev.alpha >> comma) || comma != ',' || !(is >> ev.kmin) ||
            !is.eof() || !(ev.alpha > 0.0) || ev.kmin == 0)
            throw ConfigError("--adaptive-k expects alpha,kmin with alpha > 0");
        ev.adaptive = true;
    }

    if (app.got_subcommand(cgen)) return cmd_gen(gen);
    if (app.got_subcommand(ctb)) return cmd_train_backbone(tb);
    if (app.got_subcommand(cts)) return cmd_train_selector(ts);
    if (app.got_subcommand(cev)) return cmd_evaluate(ev);
    if (app.got_subcommand(crp)) return cmd_report(rp);
    return 2;
}

} // namespace cli

inline int run_cli(std::vector<std::string> args) {
    try {
        return cli::dispatch(std::move(args));
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

} // namespace foci
