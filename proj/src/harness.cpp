// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>

namespace thzce {

using nlohmann::json;

namespace {

std::string fmt_csv_double(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                     t0)
        .count();
}

void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

} // namespace

// ---------------------------------------------------------------------------
// Config

json geometry_to_json(const ArrayGeometry& g) {
    return {{"num_subarrays", g.num_subarrays},
            {"aes_per_subarray", g.aes_per_subarray},
            {"ae_spacing", g.ae_spacing},
            {"sa_spacing", g.sa_spacing},
            {"carrier_freq", g.carrier_freq}};
}

ArrayGeometry geometry_from_json(const json& j, ArrayGeometry base) {
    base.num_subarrays = j.value("num_subarrays", base.num_subarrays);
    base.aes_per_subarray = j.value("aes_per_subarray", base.aes_per_subarray);
    base.ae_spacing = j.value("ae_spacing", base.ae_spacing);
    base.sa_spacing = j.value("sa_spacing", base.sa_spacing);
    base.carrier_freq = j.value("carrier_freq", base.carrier_freq);
    return base;
}

json material_to_json(const MaterialModel& m) {
    return {{"absorption", m.absorption},
            {"refractive_index", {m.refractive_index.real(), m.refractive_index.imag()}},
            {"roughness", m.roughness}};
}

MaterialModel material_from_json(const json& j, MaterialModel base) {
    base.absorption = j.value("absorption", base.absorption);
    if (j.contains("refractive_index")) {
        const auto& r = j["refractive_index"];
        base.refractive_index = {r.at(0).get<double>(), r.at(1).get<double>()};
    }
    base.roughness = j.value("roughness", base.roughness);
    return base;
}

json sampling_to_json(const SamplingConfig& s) {
    return {{"num_paths", s.num_paths},
            {"los_distance", s.los_distance},
            {"los_delay", s.los_delay},
            {"nlos_distance", {s.nlos_distance[0], s.nlos_distance[1]}},
            {"nlos_delay", {s.nlos_delay[0], s.nlos_delay[1]}},
            {"elevation", {s.elevation[0], s.elevation[1]}},
            {"azimuth", {s.azimuth[0], s.azimuth[1]}},
            {"incidence", {s.incidence[0], s.incidence[1]}}};
}

SamplingConfig sampling_from_json(const json& j, SamplingConfig base) {
    base.num_paths = j.value("num_paths", base.num_paths);
    base.los_distance = j.value("los_distance", base.los_distance);
    base.los_delay = j.value("los_delay", base.los_delay);
    auto pair = [&](const char* key, std::array<double, 2>& out) {
        if (j.contains(key)) out = {j[key].at(0).get<double>(), j[key].at(1).get<double>()};
    };
    pair("nlos_distance", base.nlos_distance);
    pair("nlos_delay", base.nlos_delay);
    pair("elevation", base.elevation);
    pair("azimuth", base.azimuth);
    pair("incidence", base.incidence);
    return base;
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["version"] = 1;
    j["preset"] = preset;
    j["geometry"] = geometry_to_json(geometry);
    j["material"] = material_to_json(material);
    j["sampling"] = sampling_to_json(sampling);
    j["measurement"] = {{"slots", slots}, {"seed", measurement_seed}};
    j["solvers"] = {
        {"omp", {{"sparsity", solvers.omp.sparsity}, {"residual_tol", solvers.omp.residual_tol}}},
        {"fista",
         {{"lambda_rel", solvers.fista.lambda_rel},
          {"max_iter", solvers.fista.max_iter},
          {"tol", solvers.fista.tol}}},
        {"oamp",
         {{"kappa", solvers.oamp.kappa},
          {"max_iter", solvers.oamp.max_iter},
          {"tol", solvers.oamp.tol}}},
        {"fpn", {{"epsilon", solvers.fpn_epsilon}, {"max_iter", solvers.fpn_max_iter}}}};
    j["train"] = {{"epochs", train.epochs},
                  {"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"lr_halving_period", train.lr_halving_period},
                  {"eps_train", train.eps_train},
                  {"max_iter_train", train.max_iter_train},
                  {"beta", train.beta},
                  {"lipschitz_perturb", train.lipschitz_perturb},
                  {"seed", train_seed}};
    j["snr_regimes"] = {{"low", {regime_low[0], regime_low[1]}},
                        {"high", {regime_high[0], regime_high[1]}}};
    j["sweep"] = {{"snr_list", sweep_snr}, {"methods", sweep_methods}};
    j["data"] = {{"train_count", data.train_count},
                 {"val_count", data.val_count},
                 {"test_count", data.test_count},
                 {"seed", data.seed}};
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("config is not valid JSON");
    ExperimentConfig cfg = preset_by_name(j.value("preset", "desk"));
    if (j.contains("geometry")) cfg.geometry = geometry_from_json(j["geometry"], cfg.geometry);
    if (j.contains("material")) cfg.material = material_from_json(j["material"], cfg.material);
    if (j.contains("sampling")) cfg.sampling = sampling_from_json(j["sampling"], cfg.sampling);
    if (j.contains("measurement")) {
        cfg.slots = j["measurement"].value("slots", cfg.slots);
        cfg.measurement_seed = j["measurement"].value("seed", cfg.measurement_seed);
    }
    if (j.contains("solvers")) {
        const json& s = j["solvers"];
        if (s.contains("omp")) {
            cfg.solvers.omp.sparsity = s["omp"].value("sparsity", cfg.solvers.omp.sparsity);
            cfg.solvers.omp.residual_tol =
                s["omp"].value("residual_tol", cfg.solvers.omp.residual_tol);
        }
        if (s.contains("fista")) {
            cfg.solvers.fista.lambda_rel =
                s["fista"].value("lambda_rel", cfg.solvers.fista.lambda_rel);
            cfg.solvers.fista.max_iter = s["fista"].value("max_iter", cfg.solvers.fista.max_iter);
            cfg.solvers.fista.tol = s["fista"].value("tol", cfg.solvers.fista.tol);
        }
        if (s.contains("oamp")) {
            cfg.solvers.oamp.kappa = s["oamp"].value("kappa", cfg.solvers.oamp.kappa);
            cfg.solvers.oamp.max_iter = s["oamp"].value("max_iter", cfg.solvers.oamp.max_iter);
            cfg.solvers.oamp.tol = s["oamp"].value("tol", cfg.solvers.oamp.tol);
        }
        if (s.contains("fpn")) {
            cfg.solvers.fpn_epsilon = s["fpn"].value("epsilon", cfg.solvers.fpn_epsilon);
            cfg.solvers.fpn_max_iter = s["fpn"].value("max_iter", cfg.solvers.fpn_max_iter);
        }
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lr_halving_period = t.value("lr_halving_period", cfg.train.lr_halving_period);
        cfg.train.eps_train = t.value("eps_train", cfg.train.eps_train);
        cfg.train.max_iter_train = t.value("max_iter_train", cfg.train.max_iter_train);
        cfg.train.beta = t.value("beta", cfg.train.beta);
        cfg.train.lipschitz_perturb = t.value("lipschitz_perturb", cfg.train.lipschitz_perturb);
        cfg.train_seed = t.value("seed", cfg.train_seed);
    }
    if (j.contains("snr_regimes")) {
        const json& r = j["snr_regimes"];
        if (r.contains("low"))
            cfg.regime_low = {r["low"].at(0).get<double>(), r["low"].at(1).get<double>()};
        if (r.contains("high"))
            cfg.regime_high = {r["high"].at(0).get<double>(), r["high"].at(1).get<double>()};
    }
    if (j.contains("sweep")) {
        if (j["sweep"].contains("snr_list"))
            cfg.sweep_snr = j["sweep"]["snr_list"].get<std::vector<double>>();
        if (j["sweep"].contains("methods"))
            cfg.sweep_methods = j["sweep"]["methods"].get<std::vector<std::string>>();
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        cfg.data.train_count = d.value("train_count", cfg.data.train_count);
        cfg.data.val_count = d.value("val_count", cfg.data.val_count);
        cfg.data.test_count = d.value("test_count", cfg.data.test_count);
        cfg.data.seed = d.value("seed", cfg.data.seed);
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

void ExperimentConfig::save(const std::string& path) const {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write config: " + path);
    f << to_json_text() << "\n";
}

void ExperimentConfig::validate() const {
    geometry.validate();
    material.validate();
    sampling.validate();
    if (slots < 1) throw config_error("config: measurement.slots must be >= 1");
    train.validate();
    if (data.train_count < 0 || data.val_count < 0 || data.test_count < 0)
        throw config_error("config: negative sample count");
    if (sweep_methods.empty()) throw config_error("config: sweep.methods is empty");
    for (const auto& m : sweep_methods)
        if (m != "ls" && m != "omp" && m != "fista" && m != "oamp" && m != "fpn-oamp")
            throw config_error("config: unknown method '" + m + "'");
}

std::array<double, 2> ExperimentConfig::regime_range(const std::string& regime) const {
    if (regime == "low") return regime_low;
    if (regime == "high") return regime_high;
    throw config_error("unknown SNR regime '" + regime + "'");
}

std::string ExperimentConfig::regime_for_snr(double snr_db) const {
    return snr_db <= regime_low[1] ? "low" : "high";
}

ExperimentConfig table1_preset() {
    ExperimentConfig cfg;
    cfg.preset = "table1";
    cfg.geometry = ArrayGeometry{4, 256, 5.0e-4, 5.6e-2, 3.0e11};
    cfg.slots = 128;
    cfg.train.epochs = 150;
    cfg.data = DataConfig{80000, 5000, 5000, 12345};
    cfg.sweep_snr = {0.0, 5.0, 10.0, 15.0, 20.0};
    cfg.solvers.oamp.kappa = 2.0; // validation-tuned on the reduced geometry
    return cfg;
}

ExperimentConfig desk_preset() {
    ExperimentConfig cfg = table1_preset();
    cfg.preset = "desk";
    cfg.geometry.aes_per_subarray = 64;
    cfg.slots = 32;
    cfg.train.epochs = 20;
    cfg.data = DataConfig{8000, 500, 500, 12345};
    cfg.sweep_snr = {0.0, 5.0, 10.0};
    return cfg;
}

ExperimentConfig preset_by_name(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "table1") return table1_preset();
    throw config_error("unknown preset '" + name + "' (expected desk or table1)");
}

// ---------------------------------------------------------------------------
// Dataset shards

std::uint64_t shard_channel_seed(const ShardHeader& h, int i) {
    return split_seed(h.sample_seed_base, 3ull * i);
}
std::uint64_t shard_noise_seed(const ShardHeader& h, int i) {
    return split_seed(h.sample_seed_base, 3ull * i + 1);
}
static std::uint64_t shard_snr_seed(const ShardHeader& h, int i) {
    return split_seed(h.sample_seed_base, 3ull * i + 2);
}

DatasetShard generate_shard(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                            const std::string& split, int count, double snr_lo,
                            double snr_hi, const std::string& regime,
                            std::uint64_t seed_override) {
    if (count < 0) throw config_error("generate_shard: negative count");
    if (snr_hi < snr_lo) throw config_error("generate_shard: bad SNR range");

    DatasetShard shard;
    ShardHeader& hd = shard.header;
    hd.geometry = cfg.geometry;
    hd.material = cfg.material;
    hd.sampling = cfg.sampling;
    hd.slots = ens.slots();
    hd.ensemble_seed = ens.seed();
    hd.snr_lo = snr_lo;
    hd.snr_hi = snr_hi;
    const std::uint64_t base_seed = seed_override ? seed_override : cfg.data.seed;
    hd.sample_seed_base =
        split_seed(base_seed, std::stoull(fnv1a_hex(split), nullptr, 16) & 0xFFFFFFFFull);
    hd.count = count;
    hd.split = split;
    hd.regime = regime;

    shard.samples.resize(count);
    std::string error;
#pragma omp parallel for schedule(dynamic, 8)
    for (int i = 0; i < count; ++i) {
        try {
            const ChannelRealization chan = synthesize_channel(
                cfg.geometry, cfg.material, cfg.sampling, shard_channel_seed(hd, i));
            Rng snr_rng(shard_snr_seed(hd, i));
            const double snr =
                (snr_hi > snr_lo) ? snr_rng.uniform(snr_lo, snr_hi) : snr_lo;
            const ReceivedSignal sig = ens.observe(chan, snr, shard_noise_seed(hd, i));
            TrainSample& smp = shard.samples[i];
            smp.h = real_embed(chan.angular).cast<float>();
            smp.y = sig.y.cast<float>();
            smp.snr_db = static_cast<float>(snr);
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) error = e.what();
        }
    }
    if (!error.empty()) throw numerical_error("generate_shard: " + error);
    return shard;
}

void DatasetShard::save(const std::string& path) const {
    json j;
    j["kind"] = "shard";
    j["version"] = header.version;
    j["geometry"] = geometry_to_json(header.geometry);
    j["material"] = material_to_json(header.material);
    j["sampling"] = sampling_to_json(header.sampling);
    j["slots"] = header.slots;
    j["ensemble_seed"] = header.ensemble_seed;
    j["snr"] = {{"lo", header.snr_lo}, {"hi", header.snr_hi}};
    j["sample_seed_base"] = header.sample_seed_base;
    j["count"] = header.count;
    j["split"] = header.split;
    j["regime"] = header.regime;

    std::vector<float> blob;
    const std::size_t rec =
        samples.empty() ? 0 : samples[0].h.size() + samples[0].y.size() + 1;
    blob.reserve(rec * samples.size());
    for (const auto& s : samples) {
        blob.insert(blob.end(), s.h.data(), s.h.data() + s.h.size());
        blob.insert(blob.end(), s.y.data(), s.y.data() + s.y.size());
        blob.push_back(s.snr_db);
    }
    ensure_parent_dir(path);
    write_container(path, j.dump(), blob);
}

DatasetShard DatasetShard::load(const std::string& path) {
    auto [text, blob] = read_container(path);
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || j.value("kind", "") != "shard")
        throw io_error("not a dataset shard: " + path);
    if (j.value("version", 0) != 1) throw io_error("unsupported shard version: " + path);

    DatasetShard shard;
    ShardHeader& hd = shard.header;
    hd.geometry = geometry_from_json(j.at("geometry"), ArrayGeometry{});
    hd.material = material_from_json(j.at("material"), MaterialModel{});
    hd.sampling = sampling_from_json(j.at("sampling"), SamplingConfig{});
    hd.slots = j.at("slots").get<int>();
    hd.ensemble_seed = j.at("ensemble_seed").get<std::uint64_t>();
    hd.snr_lo = j["snr"].at("lo").get<double>();
    hd.snr_hi = j["snr"].at("hi").get<double>();
    hd.sample_seed_base = j.at("sample_seed_base").get<std::uint64_t>();
    hd.count = j.at("count").get<int>();
    hd.split = j.value("split", "");
    hd.regime = j.value("regime", "");

    const int dim_h = 2 * hd.geometry.num_antennas();
    const int dim_y = 2 * hd.geometry.num_subarrays * hd.slots;
    const std::size_t rec = static_cast<std::size_t>(dim_h) + dim_y + 1;
    if (blob.size() != rec * hd.count)
        throw io_error("shard record count does not match header: " + path);

    shard.samples.resize(hd.count);
    const float* p = blob.data();
    for (int i = 0; i < hd.count; ++i) {
        TrainSample& s = shard.samples[i];
        s.h = Eigen::Map<const Eigen::VectorXf>(p, dim_h);
        p += dim_h;
        s.y = Eigen::Map<const Eigen::VectorXf>(p, dim_y);
        p += dim_y;
        s.snr_db = *p++;
    }
    return shard;
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

// Re-observe every shard channel at a fixed SNR, reusing the per-sample noise
// seeds recorded in the header.
std::vector<Vec> reobserve_at_snr(const MeasurementEnsemble& ens, const DatasetShard& shard,
                                  double snr_db) {
    const int n = static_cast<int>(shard.samples.size());
    std::vector<Vec> ys(n);
#pragma omp parallel for schedule(dynamic, 8)
    for (int i = 0; i < n; ++i) {
        const Vec h = shard.samples[i].h.cast<double>();
        ys[i] = ens.observe_angular(h, snr_db, shard_noise_seed(shard.header, i)).y;
    }
    return ys;
}

struct MethodEval {
    double nmse_db = 0.0;
    double mean_iterations = 0.0;
};

MethodEval eval_method(const std::string& method, const ExperimentConfig& cfg,
                       const MeasurementEnsemble& ens,
                       const nn::DenoiserWeights<float>* weights,
                       const DatasetShard& shard, const std::vector<Vec>& ys,
                       double snr_db) {
    const int n = static_cast<int>(shard.samples.size());
    std::vector<double> ratios(n), iters(n);
    const double noise_var = std::pow(10.0, -snr_db / 10.0);
    std::string error;
#pragma omp parallel
    {
        nn::Workspace<float> ws;
#pragma omp for schedule(dynamic, 4)
        for (int i = 0; i < n; ++i) {
            try {
                const Vec h = shard.samples[i].h.cast<double>();
                Vec est;
                double used = 0.0;
                if (method == "ls") {
                    est = solve_ls(ens, ys[i]).estimate;
                } else if (method == "omp") {
                    const SolverReport r = solve_omp(ens, ys[i], cfg.solvers.omp);
                    est = r.estimate;
                    used = r.iterations_used;
                } else if (method == "fista") {
                    const SolverReport r = solve_fista(ens, ys[i], cfg.solvers.fista);
                    est = r.estimate;
                    used = r.iterations_used;
                } else if (method == "oamp") {
                    const SolverReport r =
                        solve_oamp(ens, ys[i], noise_var, cfg.solvers.oamp);
                    est = r.estimate;
                    used = r.iterations_used;
                } else if (method == "fpn-oamp") {
                    const FixedPointTrace tr = fpn_infer_f(
                        ens, *weights, ys[i].cast<float>(), cfg.solvers.fpn_epsilon,
                        cfg.solvers.fpn_max_iter, false, ws);
                    est = tr.estimate;
                    used = tr.iterations_used;
                } else {
                    throw config_error("unknown method: " + method);
                }
                ratios[i] = nmse(est, h);
                iters[i] = used;
            } catch (const std::exception& e) {
#pragma omp critical
                if (error.empty()) error = e.what();
            }
        }
    }
    if (!error.empty()) throw numerical_error("benchmark " + method + ": " + error);
    double acc = 0.0, it = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += ratios[i];
        it += iters[i];
    }
    return {to_db(acc / n), it / n};
}

} // namespace

BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                              const nn::DenoiserWeights<float>& weights_low,
                              const nn::DenoiserWeights<float>* weights_high,
                              const DatasetShard& test_shard) {
    const bool needs_fpn =
        std::count(cfg.sweep_methods.begin(), cfg.sweep_methods.end(), "fpn-oamp") > 0;
    for (double snr : cfg.sweep_snr)
        if (needs_fpn && cfg.regime_for_snr(snr) == "high" && !weights_high)
            throw config_error("benchmark: sweep crosses 10 dB but no high-SNR weights given");
    if (test_shard.samples.empty()) throw config_error("benchmark: empty test shard");

    BenchmarkResult result;
    const std::string digest = cfg.digest();
    for (double snr : cfg.sweep_snr) {
        const std::vector<Vec> ys = reobserve_at_snr(ens, test_shard, snr);
        const nn::DenoiserWeights<float>* w =
            (cfg.regime_for_snr(snr) == "low") ? &weights_low : weights_high;
        for (const std::string& method : cfg.sweep_methods) {
            const auto t0 = std::chrono::steady_clock::now();
            const MethodEval ev =
                eval_method(method, cfg, ens, w, test_shard, ys, snr);
            MetricsRecord rec;
            rec.method = method;
            rec.snr_db = snr;
            rec.nmse_db = ev.nmse_db;
            rec.iterations = ev.mean_iterations;
            rec.wall_time_ms = elapsed_ms(t0);
            rec.config_digest = digest;
            result.records.push_back(rec);
        }
    }
    return result;
}

void write_benchmark_csv(const std::string& path, const BenchmarkResult& result) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write: " + path);
    f << "snr_db,method,nmse_db\n";
    for (const auto& r : result.records)
        f << fmt_csv_double(r.snr_db, "%g") << "," << r.method << ","
          << fmt_csv_double(r.nmse_db) << "\n";
}

void write_benchmark_meta(const std::string& path, const ExperimentConfig& cfg,
                          const BenchmarkResult& result) {
    json rows = json::array();
    for (const auto& r : result.records)
        rows.push_back({{"method", r.method},
                        {"snr_db", r.snr_db},
                        {"nmse_db", r.nmse_db},
                        {"mean_iterations", r.iterations},
                        {"wall_time_ms", r.wall_time_ms}});
    json meta = {{"config_digest", cfg.digest()},
                 {"config", json::parse(cfg.to_json_text())},
                 {"records", rows}};
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write: " + path);
    f << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Convergence curves

double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n != y.size() || n < 2) throw std::invalid_argument("linear_fit_r2: need >= 2 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
        syy += y[i] * y[i];
    }
    const double den_x = n * sxx - sx * sx;
    const double den_y = n * syy - sy * sy;
    if (den_y <= 0) return 1.0; // constant y: perfectly fit by a flat line
    if (den_x <= 0) return 0.0;
    const double num = n * sxy - sx * sy;
    return (num * num) / (den_x * den_y);
}

ConvergenceCurves run_convergence(const ExperimentConfig& cfg,
                                  const MeasurementEnsemble& ens,
                                  const nn::DenoiserWeights<float>& weights_low,
                                  const nn::DenoiserWeights<float>* weights_high,
                                  const DatasetShard& test_shard,
                                  const std::vector<double>& snr_list,
                                  double per_iteration_snr_db) {
    if (test_shard.samples.empty()) throw config_error("convergence: empty test shard");
    const int n = static_cast<int>(test_shard.samples.size());

    ConvergenceCurves out;
    out.per_iteration_snr_db = per_iteration_snr_db;

    // ---- per-iteration NMSE at one SNR (iterative methods only)
    {
        const std::vector<Vec> ys = reobserve_at_snr(ens, test_shard, per_iteration_snr_db);
        const nn::DenoiserWeights<float>* w =
            (cfg.regime_for_snr(per_iteration_snr_db) == "low") ? &weights_low : weights_high;
        if (!w) throw config_error("convergence: missing weights for the requested SNR");
        const double noise_var = std::pow(10.0, -per_iteration_snr_db / 10.0);

        struct Curve {
            std::string name;
            int horizon;
        };
        const std::vector<Curve> curves = {
            {"fpn-oamp", cfg.solvers.fpn_max_iter},
            {"oamp", cfg.solvers.oamp.max_iter},
            {"fista", std::min(cfg.solvers.fista.max_iter, 40)}};

        for (const Curve& cv : curves) {
            if (!std::count(cfg.sweep_methods.begin(), cfg.sweep_methods.end(), cv.name))
                continue;
            std::vector<std::vector<double>> per_sample(n);
            std::string error;
#pragma omp parallel
            {
                nn::Workspace<float> ws;
#pragma omp for schedule(dynamic, 4)
                for (int i = 0; i < n; ++i) {
                    try {
                        const Vec h = test_shard.samples[i].h.cast<double>();
                        std::vector<Vec> its; // estimates at t = 1..T
                        if (cv.name == "fpn-oamp") {
                            const FixedPointTrace tr =
                                fpn_infer_f(ens, *w, ys[i].cast<float>(),
                                            cfg.solvers.fpn_epsilon, cv.horizon, true, ws);
                            its.assign(tr.iterates.begin() + 1, tr.iterates.end());
                        } else if (cv.name == "oamp") {
                            OampOptions o = cfg.solvers.oamp;
                            o.record_iterates = true;
                            o.max_iter = cv.horizon;
                            its = solve_oamp(ens, ys[i], noise_var, o).iterates;
                        } else {
                            FistaOptions o = cfg.solvers.fista;
                            o.record_iterates = true;
                            o.max_iter = cv.horizon;
                            its = solve_fista(ens, ys[i], o).iterates;
                        }
                        std::vector<double> r(cv.horizon + 1);
                        r[0] = 1.0; // h^(0) = 0
                        for (int t = 1; t <= cv.horizon; ++t) {
                            const Vec& est =
                                its.empty()
                                    ? Vec(Vec::Zero(h.size()))
                                    : its[std::min<std::size_t>(t - 1, its.size() - 1)];
                            r[t] = nmse(est, h);
                        }
                        per_sample[i] = std::move(r);
                    } catch (const std::exception& e) {
#pragma omp critical
                        if (error.empty()) error = e.what();
                    }
                }
            }
            if (!error.empty()) throw numerical_error("convergence: " + error);
            std::vector<double> mean_db(cv.horizon + 1, 0.0);
            for (int t = 0; t <= cv.horizon; ++t) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += per_sample[i][t];
                mean_db[t] = to_db(acc / n);
            }
            out.methods.push_back(cv.name);
            out.nmse_db.push_back(std::move(mean_db));
        }
    }

    // ---- normalized gap to the fixed point per SNR
    for (double snr : snr_list) {
        const std::vector<Vec> ys = reobserve_at_snr(ens, test_shard, snr);
        const nn::DenoiserWeights<float>* w =
            (cfg.regime_for_snr(snr) == "low") ? &weights_low : weights_high;
        if (!w) throw config_error("convergence: missing weights for SNR sweep");

        std::vector<std::vector<double>> log_gaps(n);
        std::vector<double> r2(n, 1.0);
        std::string error;
#pragma omp parallel
        {
            nn::Workspace<float> ws;
#pragma omp for schedule(dynamic, 4)
            for (int i = 0; i < n; ++i) {
                try {
                    const FixedPointTrace tr =
                        fpn_infer_f(ens, *w, ys[i].cast<float>(), cfg.solvers.fpn_epsilon,
                                    cfg.solvers.fpn_max_iter, true, ws);
                    const double ref = tr.estimate.norm();
                    std::vector<double> lg;
                    std::vector<double> ts;
                    for (int t = 0; t < tr.iterations_used; ++t) {
                        const double gap = (tr.iterates[t] - tr.estimate).norm() / ref;
                        if (gap <= 0) break;
                        lg.push_back(std::log10(gap));
                        ts.push_back(t);
                    }
                    if (lg.size() >= 3) r2[i] = linear_fit_r2(ts, lg);
                    log_gaps[i] = std::move(lg);
                } catch (const std::exception& e) {
#pragma omp critical
                    if (error.empty()) error = e.what();
                }
            }
        }
        if (!error.empty()) throw numerical_error("convergence gap: " + error);

        std::size_t horizon = 0;
        for (const auto& lg : log_gaps) horizon = std::max(horizon, lg.size());
        std::vector<double> mean(horizon, 0.0);
        for (std::size_t t = 0; t < horizon; ++t) {
            double acc = 0.0;
            int cnt = 0;
            for (const auto& lg : log_gaps)
                if (t < lg.size()) {
                    acc += lg[t];
                    ++cnt;
                }
            mean[t] = cnt ? acc / cnt : 0.0;
        }
        int good = 0;
        for (double v : r2)
            if (v > 0.99) ++good;
        out.gap_snrs.push_back(snr);
        out.log10_gap.push_back(std::move(mean));
        out.fit_r2_fraction_above_099.push_back(static_cast<double>(good) / n);
    }
    return out;
}

void write_per_iteration_csv(const std::string& path, const ConvergenceCurves& curves) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write: " + path);
    f << "t,method,nmse_db\n";
    for (std::size_t m = 0; m < curves.methods.size(); ++m)
        for (std::size_t t = 0; t < curves.nmse_db[m].size(); ++t)
            f << t << "," << curves.methods[m] << ","
              << fmt_csv_double(curves.nmse_db[m][t]) << "\n";
}

void write_gap_csv(const std::string& path, const ConvergenceCurves& curves) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write: " + path);
    f << "t,snr_db,log10_normalized_gap\n";
    for (std::size_t s = 0; s < curves.gap_snrs.size(); ++s)
        for (std::size_t t = 0; t < curves.log10_gap[s].size(); ++t)
            f << t << "," << fmt_csv_double(curves.gap_snrs[s], "%g") << ","
              << fmt_csv_double(curves.log10_gap[s][t]) << "\n";
}

// ---------------------------------------------------------------------------
// Training orchestration

TrainingOutput run_training(const ExperimentConfig& cfg, const MeasurementEnsemble& ens,
                            const DatasetShard& train_shard, const DatasetShard& val_shard,
                            const std::string& regime, const std::string& out_dir,
                            const std::string& resume_path, std::ostream* progress) {
    if (train_shard.header.regime != regime)
        throw config_error("train: shard regime '" + train_shard.header.regime +
                           "' does not match requested regime '" + regime + "'");
    TrainConfig tc = cfg.train;
    tc.snr_regime = regime;

    TrainInit init;
    const TrainInit* init_ptr = nullptr;
    if (!resume_path.empty()) {
        nn::LoadedWeights lw = nn::load_weights(resume_path);
        const std::string tag = regime + "_snr";
        if (lw.meta.regime != tag)
            throw config_error("train: resume weight regime mismatch");
        if (!lw.adam)
            throw config_error("train: resume file has no optimizer state");
        init.weights = std::move(lw.weights);
        init.adam = std::move(*lw.adam);
        init.epochs_completed = lw.meta.epochs_completed;
        init_ptr = &init;
    }

    TrainResult res = train(ens, train_shard.samples, val_shard.samples, tc,
                            cfg.train_seed, init_ptr, progress);

    std::filesystem::create_directories(out_dir);
    TrainingOutput out;
    out.log = res.log;
    out.weights_path = out_dir + "/weights_" + regime + ".bin";
    out.log_path = out_dir + "/train_log_" + regime + ".csv";

    nn::WeightFileMeta meta;
    meta.regime = regime + "_snr";
    meta.epochs_completed = res.log.empty()
                                ? (init_ptr ? init.epochs_completed : 0)
                                : res.log.back().epoch;
    meta.lr_next =
        tc.lr * std::pow(0.5, meta.epochs_completed / tc.lr_halving_period);
    meta.train_seed = cfg.train_seed;
    json extra = {{"config_digest", cfg.digest()},
                  {"epochs", tc.epochs},
                  {"batch_size", tc.batch_size},
                  {"final_val_nmse_db", res.log.empty() ? 0.0 : res.log.back().val_nmse_db},
                  {"final_train_nmse_db",
                   res.log.empty() ? 0.0 : res.log.back().train_nmse_db}};
    meta.extra_json = extra.dump();
    save_weights(out.weights_path, res.weights, meta, &res.adam);
    write_training_csv(out.log_path, res.log);
    return out;
}

void write_training_csv(const std::string& path, const std::vector<EpochLog>& log) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write: " + path);
    f << "epoch,train_nmse_db,val_nmse_db,lipschitz_estimate,lr\n";
    for (const auto& e : log)
        f << e.epoch << "," << fmt_csv_double(e.train_nmse_db) << ","
          << fmt_csv_double(e.val_nmse_db) << "," << fmt_csv_double(e.lipschitz_estimate)
          << "," << fmt_csv_double(e.lr, "%.8g") << "\n";
}

// ---------------------------------------------------------------------------
// Contraction diagnostics

double max_contraction_ratio(const MeasurementEnsemble& ens,
                             const nn::DenoiserWeights<float>& weights,
                             const Dataset& samples, int num_pairs, double epsilon,
                             int max_iter, std::uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("max_contraction_ratio: no samples");
    Rng rng(seed);
    nn::Workspace<float> ws;

    // Cache iterate traces per sample index.
    std::map<int, FixedPointTrace> traces;
    auto trace_for = [&](int idx) -> const FixedPointTrace& {
        auto it = traces.find(idx);
        if (it == traces.end())
            it = traces
                     .emplace(idx, fpn_infer_f(ens, weights, samples[idx].y, epsilon,
                                               max_iter, true, ws))
                     .first;
        return it->second;
    };

    double worst = 0.0;
    for (int p = 0; p < num_pairs; ++p) {
        const int idx = static_cast<int>(rng.below(samples.size()));
        const FixedPointTrace& tr = trace_for(idx);
        const std::size_t m = tr.iterates.size();
        const double scale = tr.estimate.norm() / std::sqrt(double(ens.dim_h()));

        auto draw_point = [&]() {
            const Vec& a = tr.iterates[rng.below(m)];
            const Vec& b = tr.iterates[rng.below(m)];
            const double lam = rng.uniform();
            Vec v = lam * a + (1.0 - lam) * b;
            for (Eigen::Index j = 0; j < v.size(); ++j)
                v[j] += 1e-2 * scale * rng.normal(); // jitter around the orbit
            return v;
        };
        const Vec h1 = draw_point();
        const Vec h2 = draw_point();
        const std::vector<std::pair<Vec, Vec>> pair = {{h1, h2}};
        worst = std::max(worst,
                         contraction_check(ens, weights, pair,
                                           samples[idx].y.cast<double>()));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Invariant suite

namespace {

struct CheckReporter {
    std::ostream& out;
    bool all_ok = true;
    void operator()(const std::string& name, bool ok, const std::string& detail) {
        out << (ok ? "[PASS] " : "[FAIL] ") << name << ": " << detail << "\n";
        all_ok = all_ok && ok;
    }
};

} // namespace

bool run_verify(const ExperimentConfig& cfg, std::ostream& out) {
    CheckReporter check{out};
    char buf[256];

    const ArrayGeometry& g = cfg.geometry;
    const AngularTransform transform(g);

    // Unit modulus of array responses.
    {
        Rng rng(1);
        double worst = 0.0;
        for (int k = 0; k < 8; ++k) {
            const CVec a = array_response(g, rng.uniform(-M_PI, M_PI),
                                          rng.uniform(-M_PI / 2, M_PI / 2),
                                          rng.uniform(1.0, 50.0));
            for (Eigen::Index i = 0; i < a.size(); ++i)
                worst = std::max(worst, std::abs(std::abs(a[i]) - 1.0));
        }
        std::snprintf(buf, sizeof(buf), "max | |a_i| - 1 | = %.3e", worst);
        check("array response unit modulus", worst < 1e-12, buf);
    }

    // Far/near consistency: aligned phase gap shrinks as r grows.
    {
        const double dray = rayleigh_distance(g);
        const CVec far = array_response_far(g, 0.7, 1.0);
        std::vector<double> gaps;
        for (double mult : {2.0, 10.0, 100.0}) {
            CVec near = array_response_near(g, 0.7, 1.0, mult * dray);
            near /= near[0]; // global phase alignment to the origin AE
            double worst = 0.0;
            for (Eigen::Index i = 0; i < near.size(); ++i)
                worst = std::max(worst, std::abs(std::arg(near[i] * std::conj(far[i]))));
            gaps.push_back(worst);
        }
        const bool ok = gaps[0] > gaps[1] && gaps[1] > gaps[2];
        std::snprintf(buf, sizeof(buf), "phase gap %.3e -> %.3e -> %.3e at r = {2,10,100} D_R",
                      gaps[0], gaps[1], gaps[2]);
        check("far/near field consistency", ok, buf);
    }

    // Channel normalization and angular identity.
    {
        double worst_norm = 0.0, worst_ang = 0.0;
        for (int k = 0; k < 10; ++k) {
            const ChannelRealization ch =
                synthesize_channel(g, cfg.material, cfg.sampling, 100 + k);
            worst_norm = std::max(worst_norm,
                                  std::abs(ch.spatial.squaredNorm() - g.num_antennas()) /
                                      g.num_antennas());
            worst_ang = std::max(worst_ang, (ch.angular - transform.apply(ch.spatial)).norm() /
                                                ch.angular.norm());
        }
        std::snprintf(buf, sizeof(buf), "max rel norm error %.3e, transform error %.3e",
                      worst_norm, worst_ang);
        check("channel normalization", worst_norm < 1e-9 && worst_ang < 1e-10, buf);
    }

    // Transform unitarity.
    {
        Rng rng(7);
        double worst = 0.0, worst_norm = 0.0;
        for (int k = 0; k < 5; ++k) {
            CVec v(g.num_antennas());
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.cnormal(1.0);
            const CVec w = transform.apply(v);
            worst_norm = std::max(worst_norm, std::abs(w.norm() - v.norm()) / v.norm());
            worst = std::max(worst, (transform.inverse(w) - v).norm() / v.norm());
        }
        std::snprintf(buf, sizeof(buf), "round-trip error %.3e, norm drift %.3e", worst,
                      worst_norm);
        check("angular transform unitarity", worst < 1e-10 && worst_norm < 1e-10, buf);
    }

    // Determinism.
    {
        const ChannelRealization a = synthesize_channel(g, cfg.material, cfg.sampling, 42);
        const ChannelRealization b = synthesize_channel(g, cfg.material, cfg.sampling, 42);
        const bool same_chan = a.spatial == b.spatial && a.angular == b.angular;
        const MeasurementEnsemble e1 = MeasurementEnsemble::build(g, cfg.slots, 5);
        const MeasurementEnsemble e2 = MeasurementEnsemble::build(g, cfg.slots, 5);
        const bool same_ens = e1.real_operator() == e2.real_operator();
        check("determinism (seeded rebuild)", same_chan && same_ens,
              same_chan ? (same_ens ? "channel and ensemble bit-identical"
                                    : "ensemble differs")
                        : "channel differs");
    }

    const MeasurementEnsemble ens =
        MeasurementEnsemble::build(g, cfg.slots, cfg.measurement_seed);

    // De-correlation trace.
    {
        const Mat wm = ens.le_matrix() * ens.real_operator();
        const double tr = static_cast<double>(ens.dim_h()) - wm.trace();
        const double rel = std::abs(tr) / ens.dim_h();
        std::snprintf(buf, sizeof(buf), "|tr(I - WM)| / 2SS_bar = %.3e", rel);
        check("LE de-correlation tr(I-WM)=0", rel < 1e-6, buf);
    }

    // Projector spectrum and Lip(f_LE).
    {
        const Mat p = ens.pseudo_inverse() * ens.real_operator();
        const Mat sym = 0.5 * (p + p.transpose());
        Eigen::SelfAdjointEigenSolver<Mat> eig(sym);
        double worst = 0.0;
        for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
            const double l = eig.eigenvalues()[i];
            worst = std::max(worst, std::min(std::abs(l), std::abs(l - 1.0)));
        }
        std::snprintf(buf, sizeof(buf), "max distance of eig(pinv(M)M) from {0,1} = %.3e",
                      worst);
        check("projector spectrum", worst < 1e-8, buf);

        const Mat ident = Mat::Identity(ens.dim_h(), ens.dim_h());
        const double lip = operator_norm(ident - ens.le_matrix() * ens.real_operator());
        std::snprintf(buf, sizeof(buf), "||I - eta pinv(M) M||_2 = %.9f", lip);
        check("Lip(f_LE) = 1", std::abs(lip - 1.0) < 1e-6, buf);
    }

    // Real/complex forward equivalence.
    {
        double worst = 0.0;
        for (int k = 0; k < 10; ++k) {
            const ChannelRealization ch =
                synthesize_channel(g, cfg.material, cfg.sampling, 500 + k);
            const double snr = 5.0;
            const ReceivedSignal sig = ens.observe(ch, snr, 900 + k);
            const CVec n = ens.combined_noise(sig.noise_var, 900 + k);
            const Vec via_real =
                ens.real_operator() * real_embed(ch.angular) + real_embed(n);
            worst = std::max(worst, (sig.y - via_real).norm() / sig.y.norm());
        }
        std::snprintf(buf, sizeof(buf), "max relative gap = %.3e", worst);
        check("complex/real forward equivalence", worst < 1e-10, buf);
    }

    // Combined noise energy: E ||W_RF^H n||^2 per slot-entry = sigma_n^2 / S.
    {
        const double noise_var = 0.25;
        const int draws = 200;
        double acc = 0.0;
        for (int k = 0; k < draws; ++k)
            acc += ens.combined_noise(noise_var, 40000 + k).squaredNorm();
        const double per_entry = acc / (double(draws) * ens.slots() * g.num_subarrays);
        const double expected = noise_var / g.num_subarrays;
        const double rel = std::abs(per_entry - expected) / expected;
        std::snprintf(buf, sizeof(buf), "measured %.5f vs expected %.5f (rel %.3f)",
                      per_entry, expected, rel);
        check("combined noise energy", rel < 0.05, buf);
    }

    // LE fixed point on consistent data.
    {
        Rng rng(11);
        Vec h(ens.dim_h());
        for (Eigen::Index i = 0; i < h.size(); ++i) h[i] = rng.normal();
        // Project h onto the row space so that Mh = y determines h exactly.
        const Vec hp = ens.pseudo_inverse() * (ens.real_operator() * h);
        const Vec y = ens.real_operator() * hp;
        const double err = (ens.le_apply(hp, y) - hp).norm() / hp.norm();
        std::snprintf(buf, sizeof(buf), "||f_LE(h;Mh) - h|| / ||h|| = %.3e", err);
        check("LE zero-residual fixed point", err < 1e-9, buf);
    }

    return check.all_ok;
}

} // namespace thzce
