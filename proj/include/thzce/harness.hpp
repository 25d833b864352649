// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Experiment orchestration: config schema with presets, dataset shards,
// training/benchmark/convergence runners and the invariant verification
// suite backing the `verify` CLI subcommand.

#pragma once

#include "thzce/baselines.hpp"
#include "thzce/channel_model.hpp"
#include "thzce/common.hpp"
#include "thzce/fpn_oamp.hpp"
#include "thzce/measurement.hpp"
#include "thzce/nn.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace thzce {

struct SolverConfigs {
    OmpOptions omp;
    FistaOptions fista;
    OampOptions oamp;
    double fpn_epsilon = 0.01;
    int fpn_max_iter = 15;
};

struct DataConfig {
    int train_count = 80000;
    int val_count = 5000;
    int test_count = 5000;
    std::uint64_t seed = 12345;
};

struct ExperimentConfig {
    std::string preset = "table1";
    ArrayGeometry geometry;
    MaterialModel material;
    SamplingConfig sampling;
    int slots = 128;                     // Q
    std::uint64_t measurement_seed = 7001;
    SolverConfigs solvers;
    TrainConfig train;
    std::uint64_t train_seed = 9001;
    std::array<double, 2> regime_low = {0.0, 10.0};
    std::array<double, 2> regime_high = {10.0, 20.0};
    std::vector<double> sweep_snr = {0.0, 5.0, 10.0};
    std::vector<std::string> sweep_methods = {"ls", "omp", "fista", "oamp", "fpn-oamp"};
    DataConfig data;

    std::string to_json_text() const; // canonical (sorted keys)
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    void save(const std::string& path) const;
    std::string digest() const { return fnv1a_hex(to_json_text()); }
    void validate() const;

    std::array<double, 2> regime_range(const std::string& regime) const;
    // SNR <= 10 dB uses the low-SNR weights, above uses high-SNR.
    std::string regime_for_snr(double snr_db) const;
};

// Table 1 parameters, full scale (long-running).
ExperimentConfig table1_preset();
// Reduced geometry sized for minutes-level CPU runs.
ExperimentConfig desk_preset();
ExperimentConfig preset_by_name(const std::string& name);

// ---------------------------------------------------------------------------
// Dataset shards

struct ShardHeader {
    int version = 1;
    ArrayGeometry geometry;
    MaterialModel material;
    SamplingConfig sampling;
    int slots = 0;
    std::uint64_t ensemble_seed = 0;
    double snr_lo = 0.0, snr_hi = 0.0; // equal means fixed SNR
    std::uint64_t sample_seed_base = 0;
    int count = 0;
    std::string split;  // train | val | test | custom
    std::string regime; // low | high | fixed
};

struct DatasetShard {
    ShardHeader header;
    Dataset samples;

    void save(const std::string& path) const;
    static DatasetShard load(const std::string& path);
};

// Per-sample derived seeds: channel split_seed(base, 3i), noise 3i+1,
// SNR draw 3i+2, with base = split_seed(config.data.seed, fnv(split)).
DatasetShard generate_shard(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                            const std::string& split, int count, double snr_lo,
                            double snr_hi, const std::string& regime,
                            std::uint64_t seed_override = 0);

// Noise / channel seeds for sample i of a shard.
std::uint64_t shard_channel_seed(const ShardHeader& h, int i);
std::uint64_t shard_noise_seed(const ShardHeader& h, int i);

// ---------------------------------------------------------------------------
// Runners

struct MetricsRecord {
    std::string method;
    double snr_db = 0.0;
    double nmse_db = 0.0;
    double iterations = 0.0;   // mean iterations used
    double wall_time_ms = 0.0; // total per (method, snr)
    std::string config_digest;
};

struct BenchmarkResult {
    std::vector<MetricsRecord> records;
};

// Re-observes the shard channels at each sweep SNR and runs every method.
// weights_high may be null when the sweep stays at or below 10 dB.
BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                              const nn::DenoiserWeights<float>& weights_low,
                              const nn::DenoiserWeights<float>* weights_high,
                              const DatasetShard& test_shard);

void write_benchmark_csv(const std::string& path, const BenchmarkResult& result);
void write_benchmark_meta(const std::string& path, const ExperimentConfig& cfg,
                          const BenchmarkResult& result);

struct ConvergenceCurves {
    // per-iteration NMSE at a single SNR for the iterative methods
    double per_iteration_snr_db = 5.0;
    std::vector<std::string> methods;          // row blocks
    std::vector<std::vector<double>> nmse_db;  // [method][t]
    // mean log10 normalized gap per sweep SNR for the fixed-point estimator
    std::vector<double> gap_snrs;
    std::vector<std::vector<double>> log10_gap; // [snr][t]
    // per-sample linear-fit quality of log10 gap vs t, per SNR
    std::vector<double> fit_r2_fraction_above_099; // [snr]
};

ConvergenceCurves run_convergence(const ExperimentConfig& cfg,
                                  const MeasurementEnsemble& ens,
                                  const nn::DenoiserWeights<float>& weights_low,
                                  const nn::DenoiserWeights<float>* weights_high,
                                  const DatasetShard& test_shard,
                                  const std::vector<double>& snr_list,
                                  double per_iteration_snr_db = 5.0);

void write_per_iteration_csv(const std::string& path, const ConvergenceCurves& curves);
void write_gap_csv(const std::string& path, const ConvergenceCurves& curves);

// Training orchestration: returns the per-epoch log and writes the weight
// file (with Adam state for resuming) plus the CSV log.
struct TrainingOutput {
    std::vector<EpochLog> log;
    std::string weights_path;
    std::string log_path;
};

TrainingOutput run_training(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                            const DatasetShard& train_shard, const DatasetShard& val_shard,
                            const std::string& regime, const std::string& out_dir,
                            const std::string& resume_path = "",
                            std::ostream* progress = nullptr);

void write_training_csv(const std::string& path, const std::vector<EpochLog>& log);

// ---------------------------------------------------------------------------
// Diagnostics

// Least-squares fit of y against x; returns R^2 (1 for a perfect line).
double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y);

// Max empirical ratio ||f(h1)-f(h2)||/||h1-h2|| over pairs built from random
// convex combinations of inference iterates plus Gaussian jitter.
double max_contraction_ratio(const MeasurementEnsemble& ens,
                             const nn::DenoiserWeights<float>& weights,
                             const Dataset& samples, int num_pairs, double epsilon,
                             int max_iter, std::uint64_t seed);

// Runs the module invariants at the configured geometry; prints one line per
// check to `out`. Returns true when all pass.
bool run_verify(const ExperimentConfig& cfg, std::ostream& out);

} // namespace thzce
