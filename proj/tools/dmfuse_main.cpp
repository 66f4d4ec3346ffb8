#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmfuse/attribution.hpp"
#include "dmfuse/checkpoint.hpp"
#include "dmfuse/config.hpp"
#include "dmfuse/evaluation.hpp"
#include "dmfuse/model.hpp"
#include "dmfuse/synthdata.hpp"
#include "dmfuse/training.hpp"

namespace fs = std::filesystem;
using namespace dmfuse;

namespace {

// exit codes: 0 ok, 2 I/O, 3 config/argument, 4 missing prerequisite, 5 numeric
struct CliError : std::runtime_error {
    int code;
    CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

bool g_verbose = false;

void note(const std::string& msg) {
    if (g_verbose) std::cerr << msg << "\n";
}

RunConfig read_config(const std::string& path) {
    try {
        return load_run_config(path);
    } catch (const ConfigError& e) {
        throw CliError(3, e.what());
    }
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---- synth -----------------------------------------------------------------

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = read_config(config_path);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw CliError(2, "cannot create output directory " + out_dir);
    Dataset ds = generate_dataset(cfg.gen);
    try {
        save_dataset(ds, out_dir);
    } catch (const std::exception& e) {
        throw CliError(2, e.what());
    }
    std::cout << (fs::path(out_dir) / "manifest.csv").string() << "\n";
    return 0;
}

// ---- train -----------------------------------------------------------------

Dataset load_data_checked(const std::string& data_dir) {
    if (!fs::exists(fs::path(data_dir) / "manifest.csv"))
        throw CliError(4, "missing manifest.csv in " + data_dir);
    try {
        return load_dataset(data_dir);
    } catch (const std::exception& e) {
        throw CliError(2, e.what());
    }
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& stage) {
    RunConfig run = read_config(config_path);
    const TrainConfig& cfg = run.train;
    Dataset data = load_data_checked(data_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw CliError(2, "cannot create output directory " + out_dir);
    const fs::path out(out_dir);

    BranchConfig bc;
    bc.dropout = cfg.dropout;

    auto fresh = [&] {
        auto m = DualModel<float>::init(bc, cfg.seed);
        m.meta_stats = data.meta_stats;
        return m;
    };
    auto run_branch = [&](DualModel<float>& model, BranchId id, const std::string& name) {
        note("training " + name + " branch");
        History h;
        try {
            h = train_branch(model, data, cfg, id);
        } catch (const DivergedError& e) {
            throw CliError(5, e.what());
        }
        save_checkpoint(out / (name + ".ckpt"), model, name, cfg.seed);
        save_history_csv(h, out / (name + "_history.csv"));
    };
    auto run_fuse = [&](DualModel<float>& model) {
        note("training fusion stage");
        History h;
        try {
            h = train_fusion(model, data, cfg);
        } catch (const DivergedError& e) {
            throw CliError(5, e.what());
        }
        save_checkpoint(out / "fused.ckpt", model, "fused", cfg.seed);
        save_history_csv(h, out / "fused_history.csv");
    };

    if (stage == "ct") {
        auto m = fresh();
        run_branch(m, BranchId::ct, "ct");
    } else if (stage == "he") {
        auto m = fresh();
        run_branch(m, BranchId::he, "he");
    } else if (stage == "fusion") {
        if (!fs::exists(out / "ct.ckpt") || !fs::exists(out / "he.ckpt"))
            throw CliError(4, "fusion stage requires ct.ckpt and he.ckpt in " + out_dir);
        auto m = fresh();
        auto ct = load_checkpoint<float>(out / "ct.ckpt");
        auto he = load_checkpoint<float>(out / "he.ckpt");
        for (auto& [name, tensor] : m.params) {
            if (name.rfind("ct.", 0) == 0) tensor = ct.params.at(name);
            if (name.rfind("he.", 0) == 0) tensor = he.params.at(name);
        }
        run_fuse(m);
    } else if (stage == "all") {
        auto m = fresh();
        run_branch(m, BranchId::ct, "ct");
        run_branch(m, BranchId::he, "he");
        run_fuse(m);
    } else {
        throw CliError(3, "unknown stage '" + stage + "' (expected ct, he, fusion or all)");
    }
    return 0;
}

// ---- eval ------------------------------------------------------------------

Head head_of(const std::string& name) {
    if (name == "ct") return Head::ct;
    if (name == "he") return Head::he;
    if (name == "fused") return Head::fused;
    throw CliError(2, "checkpoint sidecar has unknown head '" + name + "'");
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
             const std::vector<std::string>& baselines) {
    if (!fs::exists(ckpt)) throw CliError(4, "missing checkpoint " + ckpt);
    for (const auto& b : baselines)
        if (!fs::exists(b)) throw CliError(4, "missing baseline checkpoint " + b);
    Dataset data = load_data_checked(data_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw CliError(2, "cannot create output directory " + out_dir);

    std::string head_name;
    std::uint64_t seed = 0;
    auto model = load_checkpoint<float>(ckpt, &head_name, &seed);
    std::vector<int> labels;
    auto probs = predict_split(model, data, Split::test, head_of(head_name), &labels);
    if (labels.empty()) throw CliError(4, "test split is empty");

    std::vector<std::pair<std::string, std::vector<std::vector<double>>>> base_probs;
    for (const auto& b : baselines) {
        std::string bh;
        auto bm = load_checkpoint<float>(b, &bh);
        base_probs.emplace_back(bh, predict_split(bm, data, Split::test, head_of(bh)));
    }

    Provenance prov;
    prov.checkpoint_hash = hash_file(ckpt);
    prov.seed = seed;
    prov.split_id = hash_file((fs::path(data_dir) / "manifest.csv").string());
    MetricsReport report = assemble_report(probs, labels, prov, base_probs);

    std::ofstream js(fs::path(out_dir) / "report.json");
    if (!js) throw CliError(2, "cannot write report.json");
    js << report_to_json(report).dump(2) << "\n";
    std::ofstream cs(fs::path(out_dir) / "confusion.csv");
    if (!cs) throw CliError(2, "cannot write confusion.csv");
    cs << confusion_to_csv(report.classification);
    std::cout << (fs::path(out_dir) / "report.json").string() << "\n";
    return 0;
}

// ---- explain ---------------------------------------------------------------

const std::vector<std::string> kMethods = {"saliency",  "smoothgrad", "integrated_gradients",
                                           "occlusion", "gradcam",    "gradcampp"};

struct ExplainAccum {
    std::vector<double> insertion, iou;
};

Heatmap run_method(const std::string& method, const ExplainTarget<double>& tgt, bool ct_branch,
                   std::size_t tile_idx, int cls, const Tensor<double>& input,
                   const AttributionConfig& ac, std::uint64_t sg_seed) {
    const std::size_t h = input.shape[1], w = input.shape[2];
    if (method == "saliency")
        return to_heatmap(saliency(input_scorer(tgt, ct_branch, tile_idx, cls), input), cls,
                          method);
    if (method == "smoothgrad")
        return to_heatmap(smoothgrad(input_scorer(tgt, ct_branch, tile_idx, cls), input,
                                     ac.smoothgrad_samples, ac.smoothgrad_sigma, sg_seed),
                          cls, method);
    if (method == "integrated_gradients") {
        // zero baseline for CT; blurred tile for H&E (black is out-of-distribution)
        Tensor<double> base =
            ct_branch ? Tensor<double>(input.shape) : gaussian_blur(input, ac.insertion_blur_sigma);
        return to_heatmap(
            integrated_gradients(input_scorer(tgt, ct_branch, tile_idx, cls), input, base,
                                 ac.ig_steps),
            cls, method);
    }
    if (method == "occlusion") {
        double mean = 0.0;
        for (double v : input.values) mean += v;
        mean /= (double)input.size();
        auto hm = occlusion(fast_score_fn(tgt, ct_branch, tile_idx, cls), input, cls,
                            ac.occlusion_patch, ac.occlusion_stride, mean);
        return hm;
    }
    const std::size_t last = tgt.model->cfg.conv_channels.size() - 1;
    if (method == "gradcam")
        return gradcam(layer_grad_fn(tgt, ct_branch, tile_idx, cls, last), input, cls, h, w);
    if (method == "gradcampp")
        return gradcampp(layer_grad_fn(tgt, ct_branch, tile_idx, cls, last), input, cls, h, w);
    throw CliError(3, "unknown method '" + method + "'");
}

int cmd_explain(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
                std::vector<std::string> methods, const std::string& patient_id,
                const std::string& split_name, std::size_t limit,
                const std::string& config_path) {
    if (methods.empty()) methods = kMethods;
    for (const auto& m : methods)
        if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end())
            throw CliError(3, "unknown method '" + m + "'");
    AttributionConfig ac;
    std::uint64_t cfg_seed = 1234;
    if (!config_path.empty()) {
        RunConfig run = read_config(config_path);
        ac = run.attr;
        cfg_seed = run.train.seed;
    }
    if (!fs::exists(ckpt)) throw CliError(4, "missing checkpoint " + ckpt);
    Dataset data = load_data_checked(data_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw CliError(2, "cannot create output directory " + out_dir);
    const fs::path out(out_dir);

    std::string head_name;
    auto model = load_checkpoint<double>(ckpt, &head_name);
    const bool fused = head_name == "fused";

    // patient selection: explicit id, or the first `limit` of a split
    std::vector<std::size_t> selected;
    if (!patient_id.empty()) {
        for (std::size_t i = 0; i < data.records.size(); ++i)
            if (data.records[i].patient_id == patient_id) selected.push_back(i);
        if (selected.empty()) throw CliError(4, "patient id not found: " + patient_id);
    } else {
        Split want = Split::test;
        if (split_name == "train") want = Split::train;
        else if (split_name == "val") want = Split::val;
        else if (split_name != "test") throw CliError(3, "unknown split '" + split_name + "'");
        for (std::size_t i = 0; i < data.records.size() && selected.size() < limit; ++i)
            if (data.split.at(data.records[i].patient_id) == want) selected.push_back(i);
    }

    const StainReference ref = StainReference::standard();
    std::map<std::string, ExplainAccum> accum[2];  // [0] ct, [1] he
    std::ofstream iou_csv(out / "iou.csv");
    if (!iou_csv) throw CliError(2, "cannot write iou.csv");
    iou_csv << "patient_id,modality,method,iou\n";

    for (std::size_t si = 0; si < selected.size(); ++si) {
        const auto& rec = data.records[selected[si]];
        note("explaining " + rec.patient_id);
        ExplainTarget<double> tgt;
        tgt.model = &model;
        const std::size_t h = rec.ct.pixels.shape[0], w = rec.ct.pixels.shape[1];
        tgt.ct = Tensor<double>({1, h, w});
        for (std::size_t i = 0; i < h * w; ++i) tgt.ct[i] = (double)rec.ct.pixels[i];
        tgt.tiles = train_detail::prepared_tiles<double>(rec, ref);
        tgt.meta = apply_metadata_stats(rec.meta, model.meta_stats);
        tgt.fused = fused;
        const int cls = rec.label;

        // the H&E heatmap targets the highest-attention tile (bags are
        // reported per tile, weighted by MIL attention)
        std::size_t top_tile = 0;
        {
            Tape<double> tape;
            auto L = model.leaves(tape, false);
            Rng rng = make_rng(0, "unused");
            std::vector<Var<double>> tiles;
            for (const auto& t : tgt.tiles) tiles.push_back(tape.leaf(t, false));
            auto he = he_forward(tape, L, model.cfg, tiles, false, rng);
            top_tile = (std::size_t)argmax_class(he.attention->value);
        }
        const Tensor<double>& tile = tgt.tiles[top_tile];

        for (int modality = 0; modality < 2; ++modality) {
            const bool is_ct = modality == 0;
            const Tensor<double>& input = is_ct ? tgt.ct : tile;
            const std::string mod_name = is_ct ? "ct" : "he";
            const Tensor<double> blur = gaussian_blur(input, ac.insertion_blur_sigma);
            const Tensor<std::uint8_t>* mask = nullptr;
            if (is_ct) {
                mask = &rec.ct.lesion_mask;
            } else if (top_tile < rec.tile_masks.size()) {
                mask = &rec.tile_masks[top_tile];
            }
            bool mask_nonempty = false;
            if (mask)
                for (auto v : mask->values)
                    if (v) { mask_nonempty = true; break; }

            auto prob = fast_prob_fn(tgt, is_ct, top_tile, cls);
            for (const auto& method : methods) {
                const std::uint64_t sg_seed =
                    derive_seed(cfg_seed, "smoothgrad_" + mod_name, selected[si]);
                Heatmap hm = run_method(method, tgt, is_ct, top_tile, cls, input, ac, sg_seed);
                const std::string stem = rec.patient_id + "_" + mod_name + "_" + method;
                write_pgm(out / (stem + ".pgm"), heatmap_to_gray(hm));
                write_png(out / (stem + ".png"),
                          heatmap_overlay(input.cast<float>(), hm));
                auto curve = insertion_auc(prob, input, hm, ac.insertion_steps, blur);
                save_insertion_csv(curve, out / (stem + "_insertion.csv"));
                accum[modality][method].insertion.push_back(curve.auc);
                if (mask_nonempty) {
                    const double iou = localization_iou(hm, *mask);
                    accum[modality][method].iou.push_back(iou);
                    iou_csv << rec.patient_id << "," << mod_name << "," << method << ","
                            << fmt(iou) << "\n";
                } else {
                    iou_csv << rec.patient_id << "," << mod_name << "," << method << ",n/a\n";
                }
            }
        }
    }

    std::ofstream sum(out / "summary.csv");
    if (!sum) throw CliError(2, "cannot write summary.csv");
    sum << "method,ct_insertion_auc,ct_iou,he_insertion_auc,he_iou\n";
    auto mean_or_na = [](const std::vector<double>& v) -> std::string {
        if (v.empty()) return "n/a";
        double s = 0.0;
        for (double x : v) s += x;
        return fmt(s / (double)v.size());
    };
    for (const auto& method : methods) {
        sum << method << "," << mean_or_na(accum[0][method].insertion) << ","
            << mean_or_na(accum[0][method].iou) << "," << mean_or_na(accum[1][method].insertion)
            << "," << mean_or_na(accum[1][method].iou) << "\n";
    }
    std::cout << (out / "summary.csv").string() << "\n";
    return 0;
}

// ---- report ----------------------------------------------------------------

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const fs::path report_json = dir / "report.json";
    const fs::path summary_csv = dir / "summary.csv";
    if (!fs::exists(report_json) || !fs::exists(summary_csv))
        throw CliError(4, "run directory must contain report.json and summary.csv");

    nlohmann::json rep;
    {
        std::ifstream is(report_json);
        rep = nlohmann::json::parse(is);
    }
    // parse summary.csv into rows
    struct MethodRow {
        std::string method;
        std::vector<std::string> cols;  // ct_auc, ct_iou, he_auc, he_iou
        double rank_auc = -1.0;         // mean of the available insertion AUCs
    };
    std::vector<MethodRow> rows;
    {
        std::ifstream is(summary_csv);
        std::string line;
        std::getline(is, line);  // header
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            MethodRow row;
            std::size_t pos = 0;
            std::vector<std::string> fields;
            while (pos != std::string::npos) {
                auto next = line.find(',', pos);
                fields.push_back(line.substr(pos, next == std::string::npos ? next : next - pos));
                pos = next == std::string::npos ? next : next + 1;
            }
            if (fields.size() != 5) throw CliError(2, "malformed summary.csv row: " + line);
            row.method = fields[0];
            row.cols.assign(fields.begin() + 1, fields.end());
            double s = 0.0;
            int n = 0;
            for (std::size_t i : {0u, 2u})
                if (row.cols[i] != "n/a") {
                    s += std::stod(row.cols[i]);
                    ++n;
                }
            if (n) row.rank_auc = s / n;
            rows.push_back(std::move(row));
        }
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const MethodRow& a, const MethodRow& b) { return a.rank_auc > b.rank_auc; });

    std::ofstream md(dir / "report.md");
    if (!md) throw CliError(2, "cannot write report.md");
    md << "# Run summary\n\n## Classification (test split)\n\n";
    md << "| metric | value |\n|---|---|\n";
    md << "| accuracy | " << fmt(rep.at("accuracy").get<double>()) << " |\n";
    md << "| macro F1 | " << fmt(rep.at("macro_f1").get<double>()) << " |\n";
    md << "| AUROC (macro OvR) | " << fmt(rep.at("auroc_macro_ovr").get<double>()) << " |\n";
    md << "| Brier | " << fmt(rep.at("brier").get<double>()) << " |\n\n";
    md << "## Per-class\n\n| class | precision | recall | f1 |\n|---|---|---|---|\n";
    const auto& per_class = rep.at("per_class");
    for (std::size_t i = 0; i < per_class.size(); ++i) {
        const auto& pc = per_class[i];
        md << "| " << kClassNames[i] << " | " << fmt(pc.at("precision").get<double>()) << " | "
           << fmt(pc.at("recall").get<double>()) << " | " << fmt(pc.at("f1").get<double>())
           << " |\n";
    }
    if (rep.contains("delong") && !rep.at("delong").empty()) {
        md << "\n## AUC comparisons (DeLong)\n\n| baseline | macro AUC (model) | macro AUC "
              "(baseline) | classes p < 0.05 |\n|---|---|---|---|\n";
        for (const auto& d : rep.at("delong"))
            md << "| " << d.at("baseline").get<std::string>() << " | "
               << fmt(d.at("macro_auc_model").get<double>()) << " | "
               << fmt(d.at("macro_auc_baseline").get<double>()) << " | "
               << d.at("significant_classes").get<std::size_t>() << " |\n";
    }
    md << "\n## Attribution methods (ranked by mean insertion AUC)\n\n"
          "| rank | method | ct insertion AUC | ct IoU | he insertion AUC | he IoU |\n"
          "|---|---|---|---|---|---|\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
        md << "| " << i + 1 << " | " << rows[i].method << " | " << rows[i].cols[0] << " | "
           << rows[i].cols[1] << " | " << rows[i].cols[2] << " | " << rows[i].cols[3] << " |\n";

    nlohmann::ordered_json outj;
    outj["classification"] = rep;
    auto& mj = outj["methods"] = nlohmann::ordered_json::array();
    for (const auto& row : rows) {
        nlohmann::ordered_json r;
        r["method"] = row.method;
        r["ct_insertion_auc"] = row.cols[0];
        r["ct_iou"] = row.cols[1];
        r["he_insertion_auc"] = row.cols[2];
        r["he_iou"] = row.cols[3];
        mj.push_back(std::move(r));
    }
    std::ofstream js(dir / "summary.json");
    if (!js) throw CliError(2, "cannot write summary.json");
    js << outj.dump(2) << "\n";
    std::cout << (dir / "report.md").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-modal lung classification pipeline"};
    app.require_subcommand(1);
    app.add_flag("-v,--verbose", g_verbose, "progress output on stderr");

    std::string config_path, data_dir, out_dir, stage = "all", ckpt, patient_id;
    std::string split_name = "test";
    std::size_t limit = 20;
    std::vector<std::string> baselines, methods;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset")->fallthrough();
    synth->add_option("--config", config_path, "run config file")->required();
    synth->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "train model stages")->fallthrough();
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "checkpoint directory")->required();
    train->add_option("--stage", stage, "ct, he, fusion or all");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split")->fallthrough();
    eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_dir, "output directory")->required();
    eval->add_option("--baseline", baselines, "baseline checkpoint(s) for DeLong comparison");

    auto* explain = app.add_subcommand("explain", "attribution heatmaps and quality metrics")->fallthrough();
    explain->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    explain->add_option("--data", data_dir, "dataset directory")->required();
    explain->add_option("--out", out_dir, "output directory")->required();
    explain->add_option("--method", methods, "method ids (default: all six)");
    explain->add_option("--patient", patient_id, "explain a single patient id");
    explain->add_option("--split", split_name, "split to draw patients from (default test)");
    explain->add_option("--limit", limit, "max patients when using --split");
    explain->add_option("--config", config_path, "run config for attribution settings");

    auto* report = app.add_subcommand("report", "consolidated markdown + JSON summary")->fallthrough();
    report->add_option("run_dir", out_dir, "directory with eval + explain outputs")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 3;
    }

    try {
        if (synth->parsed()) return cmd_synth(config_path, out_dir);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir, stage);
        if (eval->parsed()) return cmd_eval(ckpt, data_dir, out_dir, baselines);
        if (explain->parsed())
            return cmd_explain(ckpt, data_dir, out_dir, methods, patient_id, split_name, limit,
                               config_path);
        if (report->parsed()) return cmd_report(out_dir);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const DivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
