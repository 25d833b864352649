// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Command-line experiment runner: dataset generation, training, benchmark and
// convergence sweeps, and the invariant verification suite.

#include "thzce/harness.hpp"
#include "thzce/svg_plot.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace thzce;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string preset = "desk";
    std::uint64_t seed = 0; // 0 = keep the config's data seed
    std::string out_dir = "out";
};

ExperimentConfig resolve_config(const CommonOpts& c) {
    ExperimentConfig cfg =
        c.config_path.empty() ? preset_by_name(c.preset) : ExperimentConfig::from_file(c.config_path);
    if (c.seed) cfg.data.seed = c.seed;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "Experiment config JSON");
    cmd->add_option("--preset", c.preset, "Built-in preset when no config is given")
        ->check(CLI::IsMember({"desk", "table1"}));
    cmd->add_option("--seed", c.seed, "Override the dataset seed");
    cmd->add_option("--out", c.out_dir, "Output directory");
}

MeasurementEnsemble ensemble_for(const ExperimentConfig& cfg) {
    return MeasurementEnsemble::build(cfg.geometry, cfg.slots, cfg.measurement_seed);
}

nn::DenoiserWeights<float> load_regime_weights(const std::string& path,
                                               const std::string& regime) {
    nn::LoadedWeights lw = nn::load_weights(path);
    const std::string tag = regime + "_snr";
    if (!lw.meta.regime.empty() && lw.meta.regime != tag)
        throw config_error("weight file " + path + " is tagged '" + lw.meta.regime +
                           "', expected '" + tag + "'");
    return std::move(lw.weights);
}

int run(int argc, char** argv) {
    CLI::App app{"thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed"};
    app.require_subcommand(1);

    // ---- generate
    auto* gen = app.add_subcommand("generate", "Synthesize a dataset shard");
    CommonOpts gen_c;
    add_common(gen, gen_c);
    std::string gen_split = "train";
    std::string gen_regime = "low";
    int gen_count = -1;
    double gen_snr = std::numeric_limits<double>::quiet_NaN();
    gen->add_option("--split", gen_split, "train | val | test (names the seed stream)");
    gen->add_option("--regime", gen_regime, "SNR regime")->check(CLI::IsMember({"low", "high"}));
    gen->add_option("--count", gen_count, "Sample count (default: from config per split)");
    gen->add_option("--snr", gen_snr, "Fixed SNR in dB instead of the regime range");

    // ---- train
    auto* tr = app.add_subcommand("train", "Train the fixed-point denoiser");
    CommonOpts tr_c;
    add_common(tr, tr_c);
    std::string tr_train_shard, tr_val_shard, tr_resume;
    std::string tr_regime = "low";
    tr->add_option("--train-shard", tr_train_shard, "Training shard")->required();
    tr->add_option("--val-shard", tr_val_shard, "Validation shard")->required();
    tr->add_option("--regime", tr_regime, "SNR regime")->check(CLI::IsMember({"low", "high"}));
    tr->add_option("--resume", tr_resume, "Weight file to resume from");

    // ---- benchmark
    auto* bm = app.add_subcommand("benchmark", "NMSE versus SNR for all methods");
    CommonOpts bm_c;
    add_common(bm, bm_c);
    std::string bm_weights_low, bm_weights_high, bm_test_shard;
    bool bm_svg = false;
    bm->add_option("--weights-low", bm_weights_low, "Low-SNR weight file")->required();
    bm->add_option("--weights-high", bm_weights_high, "High-SNR weight file");
    bm->add_option("--test-shard", bm_test_shard, "Test shard")->required();
    bm->add_flag("--svg", bm_svg, "Also emit an SVG plot");

    // ---- convergence
    auto* cv = app.add_subcommand("convergence", "Per-iteration NMSE and fixed-point gap");
    CommonOpts cv_c;
    add_common(cv, cv_c);
    std::string cv_weights_low, cv_weights_high, cv_test_shard;
    std::vector<double> cv_snrs = {0.0, 5.0, 10.0};
    double cv_pi_snr = 5.0;
    bool cv_svg = false;
    cv->add_option("--weights-low", cv_weights_low, "Low-SNR weight file")->required();
    cv->add_option("--weights-high", cv_weights_high, "High-SNR weight file");
    cv->add_option("--test-shard", cv_test_shard, "Test shard")->required();
    cv->add_option("--snr-list", cv_snrs, "SNRs for the gap curves")->delimiter(',');
    cv->add_option("--per-iter-snr", cv_pi_snr, "SNR for the per-iteration NMSE curve");
    cv->add_flag("--svg", cv_svg, "Also emit SVG plots");

    // ---- verify
    auto* vf = app.add_subcommand("verify", "Run the invariant suite");
    CommonOpts vf_c;
    add_common(vf, vf_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        const ExperimentConfig cfg = resolve_config(gen_c);
        const MeasurementEnsemble ens = ensemble_for(cfg);
        int count = gen_count;
        if (count < 0) {
            if (gen_split == "train") count = cfg.data.train_count;
            else if (gen_split == "val") count = cfg.data.val_count;
            else if (gen_split == "test") count = cfg.data.test_count;
            else throw config_error("--count is required for custom splits");
        }
        double lo, hi;
        std::string regime, name;
        if (std::isfinite(gen_snr)) {
            lo = hi = gen_snr;
            regime = "fixed";
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_snr%g", gen_split.c_str(), gen_snr);
            name = buf;
        } else {
            const auto range = cfg.regime_range(gen_regime);
            lo = range[0];
            hi = range[1];
            regime = gen_regime;
            name = gen_split + "_" + gen_regime;
        }
        const DatasetShard shard =
            generate_shard(cfg, ens, gen_split, count, lo, hi, regime, gen_c.seed);
        std::filesystem::create_directories(gen_c.out_dir);
        const std::string shard_path = gen_c.out_dir + "/" + name + ".shard";
        shard.save(shard_path);
        const std::string ens_path = gen_c.out_dir + "/ensemble.bin";
        if (!std::filesystem::exists(ens_path)) ens.save(ens_path);
        cfg.save(gen_c.out_dir + "/config_used.json");
        std::printf("wrote %s (%d samples)\n", shard_path.c_str(), count);
        return 0;
    }

    if (tr->parsed()) {
        const ExperimentConfig cfg = resolve_config(tr_c);
        const MeasurementEnsemble ens = ensemble_for(cfg);
        const DatasetShard train_shard = DatasetShard::load(tr_train_shard);
        const DatasetShard val_shard = DatasetShard::load(tr_val_shard);
        const TrainingOutput out = run_training(cfg, ens, train_shard, val_shard,
                                                tr_regime, tr_c.out_dir, tr_resume,
                                                &std::cerr);
        std::printf("wrote %s and %s\n", out.weights_path.c_str(), out.log_path.c_str());
        return 0;
    }

    if (bm->parsed()) {
        const ExperimentConfig cfg = resolve_config(bm_c);
        const MeasurementEnsemble ens = ensemble_for(cfg);
        const DatasetShard test_shard = DatasetShard::load(bm_test_shard);
        const nn::DenoiserWeights<float> wl = load_regime_weights(bm_weights_low, "low");
        std::optional<nn::DenoiserWeights<float>> wh;
        if (!bm_weights_high.empty()) wh = load_regime_weights(bm_weights_high, "high");
        const BenchmarkResult result =
            run_benchmark(cfg, ens, wl, wh ? &*wh : nullptr, test_shard);
        const std::string csv = bm_c.out_dir + "/nmse_vs_snr.csv";
        write_benchmark_csv(csv, result);
        write_benchmark_meta(bm_c.out_dir + "/nmse_vs_snr.meta.json", cfg, result);
        if (bm_svg) {
            std::vector<PlotSeries> series;
            for (const auto& m : cfg.sweep_methods) {
                PlotSeries s;
                s.label = m;
                for (const auto& r : result.records)
                    if (r.method == m) {
                        s.x.push_back(r.snr_db);
                        s.y.push_back(r.nmse_db);
                    }
                series.push_back(std::move(s));
            }
            write_svg_plot(bm_c.out_dir + "/nmse_vs_snr.svg", "NMSE vs SNR", "SNR (dB)",
                           "NMSE (dB)", series);
        }
        std::printf("wrote %s\n", csv.c_str());
        return 0;
    }

    if (cv->parsed()) {
        const ExperimentConfig cfg = resolve_config(cv_c);
        const MeasurementEnsemble ens = ensemble_for(cfg);
        const DatasetShard test_shard = DatasetShard::load(cv_test_shard);
        const nn::DenoiserWeights<float> wl = load_regime_weights(cv_weights_low, "low");
        std::optional<nn::DenoiserWeights<float>> wh;
        if (!cv_weights_high.empty()) wh = load_regime_weights(cv_weights_high, "high");
        const ConvergenceCurves curves = run_convergence(
            cfg, ens, wl, wh ? &*wh : nullptr, test_shard, cv_snrs, cv_pi_snr);
        write_per_iteration_csv(cv_c.out_dir + "/per_iteration.csv", curves);
        write_gap_csv(cv_c.out_dir + "/gap.csv", curves);
        if (cv_svg) {
            std::vector<PlotSeries> s1;
            for (std::size_t m = 0; m < curves.methods.size(); ++m) {
                PlotSeries s;
                s.label = curves.methods[m];
                for (std::size_t t = 0; t < curves.nmse_db[m].size(); ++t) {
                    s.x.push_back(double(t));
                    s.y.push_back(curves.nmse_db[m][t]);
                }
                s1.push_back(std::move(s));
            }
            write_svg_plot(cv_c.out_dir + "/per_iteration.svg", "NMSE vs iteration",
                           "iteration t", "NMSE (dB)", s1);
            std::vector<PlotSeries> s2;
            for (std::size_t k = 0; k < curves.gap_snrs.size(); ++k) {
                PlotSeries s;
                char lab[32];
                std::snprintf(lab, sizeof(lab), "SNR %g dB", curves.gap_snrs[k]);
                s.label = lab;
                for (std::size_t t = 0; t < curves.log10_gap[k].size(); ++t) {
                    s.x.push_back(double(t));
                    s.y.push_back(curves.log10_gap[k][t]);
                }
                s2.push_back(std::move(s));
            }
            write_svg_plot(cv_c.out_dir + "/gap.svg", "Fixed-point gap", "iteration t",
                           "log10 gap", s2);
        }
        std::printf("wrote %s/per_iteration.csv and %s/gap.csv\n", cv_c.out_dir.c_str(),
                    cv_c.out_dir.c_str());
        return 0;
    }

    if (vf->parsed()) {
        const ExperimentConfig cfg = resolve_config(vf_c);
        const bool ok = run_verify(cfg, std::cout);
        if (!ok) throw numerical_error("invariant suite failed");
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const io_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return 3;
    } catch (const numerical_error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
