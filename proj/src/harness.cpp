#include "apcnet/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>

#include <nlohmann/json.hpp>

#include "apcnet/parallel.hpp"
#include "apcnet/rng.hpp"

namespace apcnet::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr int kFormatVersion = 1;
}  // namespace

// ===========================================================================
// Presets, config serialization, hashing
// ===========================================================================

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  if (name == "forward_poisson") {
    c.problem = "forward_poisson";
    c.sigma = 1.0;
    c.lc = 0.5;
    c.n_k_sensors = 0;
    c.n_u_sensors = 2;
    c.n_f_sensors = 13;
    c.apc_order = 1;
    c.energy_threshold = 0.99;
    c.l2_lambda = 1e-3;
    c.learning_rate = 1e-3;
    c.epochs = 20000;
  } else if (name == "inverse_elliptic") {
    c.problem = "inverse_elliptic";
    c.sigma = 0.1;
    c.lc = 1.0;
    c.n_k_sensors = 4;
    c.n_u_sensors = 7;
    c.n_f_sensors = 21;
    c.apc_order = 1;
    // The benchmark keeps every numerically nonzero component so all four
    // sensor modes are represented.
    c.energy_threshold = 1.0;
    c.l2_lambda = 5e-4;
    c.learning_rate = 1e-3;
    c.epochs = 50000;
  } else if (name == "dropout_deterministic") {
    c.problem = "deterministic_elliptic";
    c.n_k_sensors = 5;
    c.n_u_sensors = 7;
    c.n_f_sensors = 21;
    c.n_snapshots = 1;
    c.n_test_snapshots = 0;
    c.k_mean_shape = {6, 100};
    c.u_mean_shape = {2, 4};
    c.dropout_p = 0.01;
    c.dropout_on = "k";
    c.l2_lambda = 1e-6;
    c.learning_rate = 1e-3;
    c.epochs = 30000;
    c.use_patience = false;
  } else if (name == "active_stochastic") {
    c.problem = "inverse_elliptic";
    c.sigma = 0.1;
    c.lc = 0.5;
    c.n_k_sensors = 3;
    c.n_u_sensors = 7;
    c.n_f_sensors = 21;
    c.apc_order = 1;
    c.energy_threshold = 0.99;
    c.k_modes_shape = {4, 128};
    c.dropout_p = 0.01;
    c.dropout_on = "k";
    c.l2_lambda = 1e-6;
    c.learning_rate = 5e-4;
    c.epochs = 50000;
    c.use_patience = true;
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"forward_poisson", "inverse_elliptic", "dropout_deterministic",
          "active_stochastic"};
}

namespace {

json config_to_json_impl(const ExperimentConfig& c, bool include_run_fields) {
  json j;
  j["format_version"] = kFormatVersion;
  j["preset"] = c.preset;
  j["problem"] = c.problem;
  j["sigma"] = c.sigma;
  j["lc"] = c.lc;
  j["n_k_sensors"] = c.n_k_sensors;
  j["n_u_sensors"] = c.n_u_sensors;
  j["n_f_sensors"] = c.n_f_sensors;
  j["n_snapshots"] = c.n_snapshots;
  j["n_test_snapshots"] = c.n_test_snapshots;
  j["apc_order"] = c.apc_order;
  j["energy_threshold"] = c.energy_threshold;
  j["k_mean_shape"] = c.k_mean_shape;
  j["k_modes_shape"] = c.k_modes_shape;
  j["u_mean_shape"] = c.u_mean_shape;
  j["u_modes_shape"] = c.u_modes_shape;
  j["dropout_p"] = c.dropout_p;
  j["dropout_on"] = c.dropout_on;
  j["l2_lambda"] = c.l2_lambda;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["epoch_scale"] = c.epoch_scale;
  j["generation_points"] = c.generation_points;
  j["eval_points"] = c.eval_points;
  j["rho"] = c.rho;
  j["mc_passes"] = c.mc_passes;
  j["max_steps"] = c.max_steps;
  j["patience"] = c.patience;
  j["use_patience"] = c.use_patience;
  j["query_points"] = c.query_points;
  j["sweep_parameter"] = c.sweep_parameter;
  j["sweep_values"] = c.sweep_values;
  if (include_run_fields) {
    j["workers"] = c.workers;
    j["out_dir"] = c.out_dir;
  }
  return j;
}

}  // namespace

std::string to_config_json(const ExperimentConfig& c) {
  return config_to_json_impl(c, true).dump(2);
}

ExperimentConfig from_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
  ExperimentConfig c;
  if (j.contains("preset") && !j.at("preset").get<std::string>().empty()) {
    c = preset_config(j.at("preset").get<std::string>());
  }
  static const std::vector<std::string> known = {
      "format_version", "preset", "problem", "sigma", "lc", "n_k_sensors",
      "n_u_sensors", "n_f_sensors", "n_snapshots", "n_test_snapshots",
      "apc_order", "energy_threshold", "k_mean_shape", "k_modes_shape",
      "u_mean_shape", "u_modes_shape", "dropout_p", "dropout_on", "l2_lambda",
      "learning_rate", "epochs", "seed", "epoch_scale", "generation_points",
      "eval_points", "rho", "mc_passes", "max_steps", "patience", "use_patience",
      "query_points", "sweep_parameter", "sweep_values", "workers", "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key: " + key);
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("problem", c.problem);
    get("sigma", c.sigma);
    get("lc", c.lc);
    get("n_k_sensors", c.n_k_sensors);
    get("n_u_sensors", c.n_u_sensors);
    get("n_f_sensors", c.n_f_sensors);
    get("n_snapshots", c.n_snapshots);
    get("n_test_snapshots", c.n_test_snapshots);
    get("apc_order", c.apc_order);
    get("energy_threshold", c.energy_threshold);
    get("k_mean_shape", c.k_mean_shape);
    get("k_modes_shape", c.k_modes_shape);
    get("u_mean_shape", c.u_mean_shape);
    get("u_modes_shape", c.u_modes_shape);
    get("dropout_p", c.dropout_p);
    get("dropout_on", c.dropout_on);
    get("l2_lambda", c.l2_lambda);
    get("learning_rate", c.learning_rate);
    get("epochs", c.epochs);
    get("seed", c.seed);
    get("epoch_scale", c.epoch_scale);
    get("generation_points", c.generation_points);
    get("eval_points", c.eval_points);
    get("rho", c.rho);
    get("mc_passes", c.mc_passes);
    get("max_steps", c.max_steps);
    get("patience", c.patience);
    get("use_patience", c.use_patience);
    get("query_points", c.query_points);
    get("sweep_parameter", c.sweep_parameter);
    get("sweep_values", c.sweep_values);
    get("workers", c.workers);
    get("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_config_json(ss.str());
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string canonical = config_to_json_impl(c, false).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

model::ProblemKind problem_kind(const ExperimentConfig& c) {
  if (c.problem == "forward_poisson") return model::ProblemKind::kForwardPoisson;
  if (c.problem == "inverse_elliptic") return model::ProblemKind::kInverseElliptic;
  if (c.problem == "deterministic_poisson") {
    return model::ProblemKind::kDeterministicPoisson;
  }
  if (c.problem == "deterministic_elliptic") {
    return model::ProblemKind::kDeterministicElliptic;
  }
  throw ConfigError("unknown problem kind: " + c.problem);
}

// ===========================================================================
// Data generation
// ===========================================================================

namespace {

std::vector<double> equidistant(int n) {
  if (n < 1) throw ConfigError("sensor counts must be positive");
  if (n == 1) return {0.0};
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) xs[i] = -1.0 + 2.0 * i / (n - 1);
  xs.front() = -1.0;
  xs.back() = 1.0;
  return xs;
}

/// Snaps positions onto the generation grid so sensor readings are exact
/// trajectory values.
std::vector<double> snap_to_grid(std::span<const double> grid,
                                 std::span<const double> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(grid[fields::nearest_grid_index(grid, x)]);
  return out;
}

std::vector<std::size_t> grid_indices(std::span<const double> grid,
                                      std::span<const double> snapped) {
  std::vector<std::size_t> idx;
  idx.reserve(snapped.size());
  for (double x : snapped) idx.push_back(fields::nearest_grid_index(grid, x));
  return idx;
}

RowMat readings_at(const RowMat& rows, std::span<const std::size_t> cols) {
  RowMat out(rows.rows(), cols.size());
  for (std::size_t s = 0; s < rows.rows(); ++s) {
    for (std::size_t i = 0; i < cols.size(); ++i) out(s, i) = rows(s, cols[i]);
  }
  return out;
}

double forward_mean_forcing(double x) { return 10.0 * std::sin(kPi * x); }
double log_k_mean(double x) { return std::sin(1.5 * kPi * x) / 5.0; }

}  // namespace

Dataset generate_dataset(const ExperimentConfig& c) {
  const auto kind = problem_kind(c);
  Dataset d;
  d.grid = fields::uniform_grid(c.generation_points);
  const fields::KernelSpec kernel{c.sigma, c.lc};
  const std::uint64_t train_seed = derive_seed(c.seed, {stream::kTrainData});
  const std::uint64_t test_seed = derive_seed(c.seed, {stream::kTestData});

  auto& t = d.train;
  switch (kind) {
    case model::ProblemKind::kForwardPoisson: {
      if (c.n_u_sensors != 2) {
        throw ConfigError("the forward problem keeps u sensors at the two boundaries");
      }
      d.field_truth = fields::sample_gp(forward_mean_forcing, kernel, d.grid,
                                        c.n_snapshots, train_seed);
      d.u_truth = fields::solve_poisson_rows(d.field_truth);
      d.test_field = fields::sample_gp(forward_mean_forcing, kernel, d.grid,
                                       std::max(1, c.n_test_snapshots), test_seed);
      d.test_u = fields::solve_poisson_rows(d.test_field);

      t.k_sensor_xs = snap_to_grid(d.grid, equidistant(c.n_f_sensors));
      t.u_sensor_xs = {-1.0, 1.0};
      t.collocation_xs = t.k_sensor_xs;
      const auto f_idx = grid_indices(d.grid, t.k_sensor_xs);
      const auto u_idx = grid_indices(d.grid, t.u_sensor_xs);
      t.k_snapshots = readings_at(d.field_truth.trajectories, f_idx);
      t.u_snapshots = readings_at(d.u_truth, u_idx);
      break;
    }
    case model::ProblemKind::kInverseElliptic: {
      d.field_truth = fields::sample_gp(log_k_mean, kernel, d.grid, c.n_snapshots,
                                        train_seed, /*log_normal=*/true);
      d.u_truth = fields::solve_elliptic_rows(d.field_truth, 10.0);
      d.test_field = fields::sample_gp(log_k_mean, kernel, d.grid,
                                       std::max(1, c.n_test_snapshots), test_seed,
                                       /*log_normal=*/true);
      d.test_u = fields::solve_elliptic_rows(d.test_field, 10.0);

      t.k_sensor_xs = snap_to_grid(d.grid, equidistant(c.n_k_sensors));
      t.u_sensor_xs = snap_to_grid(d.grid, equidistant(c.n_u_sensors));
      t.collocation_xs = snap_to_grid(d.grid, equidistant(c.n_f_sensors));
      const auto k_idx = grid_indices(d.grid, t.k_sensor_xs);
      const auto u_idx = grid_indices(d.grid, t.u_sensor_xs);
      t.k_snapshots = readings_at(d.field_truth.trajectories, k_idx);
      t.u_snapshots = readings_at(d.u_truth, u_idx);
      break;
    }
    case model::ProblemKind::kDeterministicElliptic: {
      fields::GridField k_true{d.grid, {}};
      k_true.values.reserve(d.grid.size());
      for (double x : d.grid) k_true.values.push_back(model::deterministic_elliptic_k(x));
      fields::GridField f{d.grid, std::vector<double>(d.grid.size(), 10.0)};
      fields::GridField u_true = fields::solve_elliptic_fd(k_true, f);

      d.field_truth.grid = d.grid;
      d.field_truth.trajectories = RowMat(1, d.grid.size());
      std::copy(k_true.values.begin(), k_true.values.end(),
                d.field_truth.trajectories.row(0).begin());
      d.u_truth = RowMat(1, d.grid.size());
      std::copy(u_true.values.begin(), u_true.values.end(), d.u_truth.row(0).begin());

      t.k_sensor_xs = snap_to_grid(d.grid, equidistant(c.n_k_sensors));
      t.u_sensor_xs = snap_to_grid(d.grid, equidistant(c.n_u_sensors));
      t.collocation_xs = snap_to_grid(d.grid, equidistant(c.n_f_sensors));
      t.k_snapshots = readings_at(d.field_truth.trajectories,
                                  grid_indices(d.grid, t.k_sensor_xs));
      t.u_snapshots = readings_at(d.u_truth, grid_indices(d.grid, t.u_sensor_xs));
      break;
    }
    case model::ProblemKind::kDeterministicPoisson: {
      model::ProblemSpec spec;
      spec.kind = model::ProblemKind::kDeterministicPoisson;
      fields::GridField f{d.grid, {}};
      f.values.reserve(d.grid.size());
      for (double x : d.grid) f.values.push_back(model::deterministic_forcing(spec, x));
      fields::GridField u_true = fields::solve_poisson_fd(f);
      d.u_truth = RowMat(1, d.grid.size());
      std::copy(u_true.values.begin(), u_true.values.end(), d.u_truth.row(0).begin());

      t.u_sensor_xs = {-1.0, 1.0};
      t.collocation_xs = snap_to_grid(d.grid, equidistant(c.n_f_sensors));
      t.k_snapshots = RowMat(1, 0);
      t.u_snapshots = readings_at(d.u_truth, grid_indices(d.grid, t.u_sensor_xs));
      break;
    }
  }
  return d;
}

// ===========================================================================
// Metrics and evaluation
// ===========================================================================

double relative_l2(std::span<const double> pred, std::span<const double> ref) {
  if (pred.size() != ref.size()) {
    throw ConfigError("relative_l2: prediction and reference must share a grid");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - ref[i];
    num += d * d;
    den += ref[i] * ref[i];
  }
  if (den <= 0.0) throw NumericError("relative_l2: zero-norm reference");
  return std::sqrt(num) / std::sqrt(den);
}

double relative_l2(const fields::GridField& pred, const fields::GridField& ref) {
  if (pred.grid != ref.grid) {
    throw ConfigError("relative_l2: prediction and reference must share a grid");
  }
  return relative_l2(std::span<const double>(pred.values),
                     std::span<const double>(ref.values));
}

double EvalReport::mean_trajectory_error() const {
  double acc = 0.0;
  int n = 0;
  if (k_pred_err) {
    acc += *k_pred_err;
    ++n;
  }
  if (u_pred_err) {
    acc += *u_pred_err;
    ++n;
  }
  if (n == 0) throw ConfigError("report has no trajectory errors");
  return acc / n;
}

namespace {

/// Rows of a gridded trajectory matrix interpolated onto the evaluation grid.
RowMat interp_rows(std::span<const double> grid, const RowMat& rows,
                   std::span<const double> eval_xs) {
  RowMat out(rows.rows(), eval_xs.size());
  for (std::size_t s = 0; s < rows.rows(); ++s) {
    auto src = rows.row(s);
    for (std::size_t i = 0; i < eval_xs.size(); ++i) {
      out(s, i) = fields::interp_linear(grid, src, eval_xs[i]);
    }
  }
  return out;
}

void column_moments(const RowMat& rows, std::vector<double>& mean,
                    std::vector<double>& stddev) {
  const std::size_t n = rows.rows(), m = rows.cols();
  mean.assign(m, 0.0);
  stddev.assign(m, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    auto r = rows.row(s);
    for (std::size_t i = 0; i < m; ++i) mean[i] += r[i];
  }
  for (double& v : mean) v /= static_cast<double>(n);
  for (std::size_t s = 0; s < n; ++s) {
    auto r = rows.row(s);
    for (std::size_t i = 0; i < m; ++i) {
      const double d = r[i] - mean[i];
      stddev[i] += d * d;
    }
  }
  // Population normalization, matching the 1/N discrete-measure convention.
  for (double& v : stddev) v = std::sqrt(v / static_cast<double>(n));
}

/// Relative L2 with the arbitrary mode sign resolved toward the reference.
double mode_error_aligned(std::span<const double> pred, std::span<const double> ref,
                          int& flipped) {
  std::vector<double> neg(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) neg[i] = -pred[i];
  const double direct = relative_l2(pred, ref);
  const double reversed = relative_l2(neg, ref);
  flipped = reversed < direct ? 1 : 0;
  return std::min(direct, reversed);
}

/// u mode curves of the surrogate at the given points, one row per alpha.
RowMat u_mode_curves(const model::SurrogateModel& surrogate,
                     std::span<const double> xs) {
  RowMat out(surrogate.stochastic() ? surrogate.u_output_count() : 1, xs.size());
  std::size_t alpha = 0;
  for (const auto& net : surrogate.u_group_nets) {
    const auto vals = nn::forward_values(net, xs);
    const int n_out = net.spec().output_dim;
    for (int o = 0; o < n_out; ++o) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        out(alpha + o, i) = vals[i * n_out + o];
      }
    }
    alpha += static_cast<std::size_t>(n_out);
  }
  return out;
}

}  // namespace

EvalReport evaluate_model(const ExperimentConfig& config,
                          const model::SurrogateModel& surrogate,
                          const Dataset& dataset) {
  return evaluate_model(config, surrogate, dataset, dataset.train.k_sensor_xs);
}

EvalReport evaluate_model(const ExperimentConfig& config,
                          const model::SurrogateModel& surrogate,
                          const Dataset& dataset,
                          std::span<const double> field_sensor_xs) {
  EvalReport report;
  report.config_hash = config_hash(config);
  const auto eval_xs = fields::uniform_grid(config.eval_points);
  const auto kind = surrogate.problem.kind;
  const bool stochastic = surrogate.stochastic();
  const bool has_k = kind == model::ProblemKind::kInverseElliptic ||
                     kind == model::ProblemKind::kDeterministicElliptic;

  const auto stats = model::statistics(surrogate, eval_xs);

  if (!stochastic) {
    // Deterministic problems: curve errors against the truth.
    const auto u_ref = interp_rows(dataset.grid, dataset.u_truth, eval_xs);
    report.u_mean_err = relative_l2(stats.u_mean, u_ref.row(0));
    report.u_pred_err = report.u_mean_err;
    if (has_k) {
      const auto k_ref = interp_rows(dataset.grid, dataset.field_truth.trajectories,
                                     eval_xs);
      report.k_mean_err = relative_l2(stats.k_mean, k_ref.row(0));
      report.k_pred_err = report.k_mean_err;
    }
    return report;
  }

  // Ensemble references on the evaluation grid.
  const auto u_rows = interp_rows(dataset.grid, dataset.u_truth, eval_xs);
  std::vector<double> u_mean_ref, u_std_ref;
  column_moments(u_rows, u_mean_ref, u_std_ref);
  report.u_mean_err = relative_l2(stats.u_mean, u_mean_ref);
  report.u_std_err = relative_l2(stats.u_std, u_std_ref);

  RowMat k_rows;
  if (has_k) {
    k_rows = interp_rows(dataset.grid, dataset.field_truth.trajectories, eval_xs);
    std::vector<double> k_mean_ref, k_std_ref;
    column_moments(k_rows, k_mean_ref, k_std_ref);
    report.k_mean_err = relative_l2(stats.k_mean, k_mean_ref);
    report.k_std_err = relative_l2(stats.k_std, k_std_ref);
  }

  // Mode errors: predictions from the networks, references from the
  // discrete projection of the solved trajectories.
  const RowMat xi = pc::extract_xi_rows(surrogate.pca, dataset.train.k_snapshots);
  const std::size_t n = xi.rows();
  const std::size_t p1 = surrogate.basis.indices.size();
  const auto u_modes_pred = u_mode_curves(surrogate, eval_xs);
  for (std::size_t alpha = 1; alpha < p1; ++alpha) {
    std::vector<double> ref(eval_xs.size(), 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      const double psi = surrogate.basis.sample_psi(s, alpha);
      auto row = u_rows.row(s);
      for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += psi * row[i];
    }
    for (double& v : ref) v /= static_cast<double>(n);
    int flipped = 0;
    report.u_mode_errs.push_back(
        mode_error_aligned(u_modes_pred.row(alpha), ref, flipped));
    report.u_mode_sign_flips.push_back(flipped);
  }

  if (has_k && surrogate.k_modes_net) {
    const int m = surrogate.pca.retained;
    const auto mode_vals = nn::forward_values(*surrogate.k_modes_net, eval_xs);
    for (int l = 0; l < m; ++l) {
      // Reference: E[k(x) xi_l] = sqrt(lambda_l) k_l(x) under the training
      // measure (xi has exact zero mean by construction).
      std::vector<double> ref(eval_xs.size(), 0.0);
      for (std::size_t s = 0; s < n; ++s) {
        const double w = xi(s, l);
        auto row = k_rows.row(s);
        for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += w * row[i];
      }
      for (double& v : ref) v /= static_cast<double>(n);
      std::vector<double> pred(eval_xs.size());
      const double sq = std::sqrt(surrogate.pca.eigenvalues[l]);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        pred[i] = sq * mode_vals[i * m + l];
      }
      int flipped = 0;
      report.k_mode_errs.push_back(mode_error_aligned(pred, ref, flipped));
      report.k_mode_sign_flips.push_back(flipped);
    }
  }

  // Trajectory predictions over the held-out snapshots.
  if (config.n_test_snapshots > 0) {
    const auto sensor_idx = grid_indices(dataset.grid, field_sensor_xs);
    const auto test_readings = readings_at(dataset.test_field.trajectories, sensor_idx);
    const auto test_u = interp_rows(dataset.grid, dataset.test_u, eval_xs);
    RowMat test_k;
    if (has_k) test_k = interp_rows(dataset.grid, dataset.test_field.trajectories, eval_xs);

    // Mode curves once; per-snapshot combination is a small matrix product.
    RowMat k_mode_vals;
    std::vector<double> k_mean_curve;
    if (has_k) {
      k_mean_curve = nn::forward_values(*surrogate.k_mean_net, eval_xs);
      if (surrogate.k_modes_net) {
        const int m = surrogate.pca.retained;
        const auto vals = nn::forward_values(*surrogate.k_modes_net, eval_xs);
        k_mode_vals = RowMat(m, eval_xs.size());
        for (int l = 0; l < m; ++l) {
          for (std::size_t i = 0; i < eval_xs.size(); ++i) {
            k_mode_vals(l, i) = vals[i * m + l];
          }
        }
      }
    }

    const std::size_t ns = test_readings.rows();
    double u_err = 0.0, k_err = 0.0;
    std::vector<double> psi(p1), curve(eval_xs.size());
    for (std::size_t s = 0; s < ns; ++s) {
      const auto xi_new = pc::extract_xi(surrogate.pca, test_readings.row(s));
      pc::evaluate_basis(surrogate.basis, xi_new, psi);
      std::fill(curve.begin(), curve.end(), 0.0);
      for (std::size_t alpha = 0; alpha < p1; ++alpha) {
        auto mode = u_modes_pred.row(alpha);
        for (std::size_t i = 0; i < curve.size(); ++i) curve[i] += psi[alpha] * mode[i];
      }
      u_err += relative_l2(curve, test_u.row(s));
      if (has_k) {
        std::copy(k_mean_curve.begin(), k_mean_curve.end(), curve.begin());
        for (int l = 0; l < surrogate.pca.retained; ++l) {
          const double scale = std::sqrt(surrogate.pca.eigenvalues[l]) * xi_new[l];
          auto mode = k_mode_vals.row(l);
          for (std::size_t i = 0; i < curve.size(); ++i) curve[i] += scale * mode[i];
        }
        k_err += relative_l2(curve, test_k.row(s));
      }
    }
    report.u_pred_err = u_err / static_cast<double>(ns);
    if (has_k) report.k_pred_err = k_err / static_cast<double>(ns);
  }

  return report;
}

// ===========================================================================
// Report serialization
// ===========================================================================

std::string to_report_json(const EvalReport& r) {
  json j;
  j["format_version"] = kFormatVersion;
  j["config_hash"] = r.config_hash;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("k_mean_err", r.k_mean_err);
  put("k_std_err", r.k_std_err);
  put("k_pred_err", r.k_pred_err);
  put("u_mean_err", r.u_mean_err);
  put("u_std_err", r.u_std_err);
  put("u_pred_err", r.u_pred_err);
  if (!r.k_mode_errs.empty()) {
    j["k_mode_errs"] = r.k_mode_errs;
    j["k_mode_sign_flips"] = r.k_mode_sign_flips;
  }
  if (!r.u_mode_errs.empty()) {
    j["u_mode_errs"] = r.u_mode_errs;
    j["u_mode_sign_flips"] = r.u_mode_sign_flips;
  }
  j["runtime_seconds"] = r.runtime_seconds;
  return j.dump(2);
}

EvalReport from_report_json(const std::string& json_text) {
  json j = json::parse(json_text);
  EvalReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  auto get = [&](const char* key, std::optional<double>& v) {
    if (j.contains(key)) v = j.at(key).get<double>();
  };
  get("k_mean_err", r.k_mean_err);
  get("k_std_err", r.k_std_err);
  get("k_pred_err", r.k_pred_err);
  get("u_mean_err", r.u_mean_err);
  get("u_std_err", r.u_std_err);
  get("u_pred_err", r.u_pred_err);
  if (j.contains("k_mode_errs")) {
    r.k_mode_errs = j.at("k_mode_errs").get<std::vector<double>>();
    r.k_mode_sign_flips = j.at("k_mode_sign_flips").get<std::vector<int>>();
  }
  if (j.contains("u_mode_errs")) {
    r.u_mode_errs = j.at("u_mode_errs").get<std::vector<double>>();
    r.u_mode_sign_flips = j.at("u_mode_sign_flips").get<std::vector<int>>();
  }
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  return r;
}

void write_report_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "quantity,metric,value\n";
  auto row = [&](const char* q, const std::string& m, double v) {
    out << q << "," << m << "," << v << "\n";
  };
  auto opt_row = [&](const char* q, const char* m, const std::optional<double>& v) {
    if (v) row(q, m, *v);
  };
  opt_row("k", "mean", r.k_mean_err);
  opt_row("k", "std", r.k_std_err);
  opt_row("k", "prediction", r.k_pred_err);
  for (std::size_t i = 0; i < r.k_mode_errs.size(); ++i) {
    row("k", "mode_" + std::to_string(i + 1), r.k_mode_errs[i]);
  }
  opt_row("u", "mean", r.u_mean_err);
  opt_row("u", "std", r.u_std_err);
  opt_row("u", "prediction", r.u_pred_err);
  for (std::size_t i = 0; i < r.u_mode_errs.size(); ++i) {
    row("u", "mode_" + std::to_string(i + 1), r.u_mode_errs[i]);
  }
}

// ===========================================================================
// Bundles, runs, sweeps
// ===========================================================================

namespace {

model::ProblemSpec make_problem_spec(const ExperimentConfig& c) {
  model::ProblemSpec spec;
  spec.kind = problem_kind(c);
  spec.constant_forcing = 10.0;
  return spec;
}

model::NetShapes make_shapes(const ExperimentConfig& c) {
  model::NetShapes shapes;
  auto fill = [&](nn::MlpSpec& spec, const std::vector<int>& shape, bool dropout) {
    if (shape.size() != 2) throw ConfigError("net shapes are {hidden_layers, width}");
    spec.hidden_layers = shape[0];
    spec.width = shape[1];
    spec.l2_lambda = c.l2_lambda;
    spec.dropout_p = dropout ? c.dropout_p : 0.0;
  };
  const bool det = c.problem == "deterministic_poisson" ||
                   c.problem == "deterministic_elliptic";
  const bool drop_k = c.dropout_on == "k";
  const bool drop_u = c.dropout_on == "u";
  if (c.dropout_on != "none" && !drop_k && !drop_u) {
    throw ConfigError("dropout_on must be none, k, or u");
  }
  // For deterministic problems the single k network lives in the k_mean slot
  // and the single u network in the u_mean slot.
  fill(shapes.k_mean, c.k_mean_shape, drop_k && det);
  fill(shapes.k_modes, c.k_modes_shape, drop_k && !det);
  fill(shapes.u_mean, c.u_mean_shape, drop_u && det);
  fill(shapes.u_modes, c.u_modes_shape, drop_u && !det);
  return shapes;
}

model::TrainSchedule make_schedule(const ExperimentConfig& c) {
  model::TrainSchedule s;
  s.learning_rate = c.learning_rate;
  s.epochs = c.epochs;
  s.seed = c.seed;
  s.epoch_scale = c.epoch_scale;
  return s;
}

void format_double(std::string& out, double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

}  // namespace

void save_bundle(const ExperimentConfig& config, const model::SurrogateModel& surrogate,
                 const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = json::parse(to_config_json(config));
  manifest["config_hash"] = config_hash(config);
  manifest["retained_modes"] = surrogate.pca.retained;
  manifest["basis_size"] = surrogate.basis.indices.size();
  manifest["apc_order"] = surrogate.apc_order;
  {
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw DataError("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
  }
  if (surrogate.stochastic()) {
    pc::write_pca_csv(surrogate.pca, dir + "/pca.csv");
    pc::write_basis_csv(surrogate.basis, dir + "/basis.csv");
  }
  if (surrogate.k_mean_net) nn::save_checkpoint(*surrogate.k_mean_net, dir + "/k_mean.ckpt");
  if (surrogate.k_modes_net) {
    nn::save_checkpoint(*surrogate.k_modes_net, dir + "/k_modes.ckpt");
  }
  for (std::size_t g = 0; g < surrogate.u_group_nets.size(); ++g) {
    nn::save_checkpoint(surrogate.u_group_nets[g],
                        dir + "/u_group_" + std::to_string(g) + ".ckpt");
  }
}

model::SurrogateModel load_bundle(const ExperimentConfig& config, const Dataset& dataset,
                                  const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw DataError("no manifest in bundle: " + dir);
  json manifest = json::parse(in);
  const std::string stored_hash = manifest.at("config_hash").get<std::string>();
  if (stored_hash != config_hash(config)) {
    throw ConfigError("bundle config hash " + stored_hash +
                      " does not match the requested config " + config_hash(config) +
                      "; artifacts from mismatched configurations do not combine");
  }
  model::SurrogateModel surrogate;
  surrogate.problem = make_problem_spec(config);
  surrogate.apc_order = manifest.at("apc_order").get<int>();
  if (surrogate.stochastic()) {
    surrogate.pca = pc::read_pca_csv(dir + "/pca.csv");
    surrogate.basis = pc::read_basis_csv(dir + "/basis.csv", surrogate.pca.retained);
    pc::rebind_samples(surrogate.basis,
                       pc::extract_xi_rows(surrogate.pca, dataset.train.k_snapshots));
  }
  if (fs::exists(dir + "/k_mean.ckpt")) {
    surrogate.k_mean_net = nn::load_checkpoint(dir + "/k_mean.ckpt");
  }
  if (fs::exists(dir + "/k_modes.ckpt")) {
    surrogate.k_modes_net = nn::load_checkpoint(dir + "/k_modes.ckpt");
  }
  for (std::size_t g = 0;; ++g) {
    const std::string path = dir + "/u_group_" + std::to_string(g) + ".ckpt";
    if (!fs::exists(path)) break;
    surrogate.u_group_nets.push_back(nn::load_checkpoint(path));
  }
  if (surrogate.u_group_nets.empty()) {
    throw DataError("bundle has no u networks: " + dir);
  }
  return surrogate;
}

namespace {

void write_plot_data(const ExperimentConfig& config,
                     const model::SurrogateModel& surrogate, const Dataset& dataset,
                     const std::string& dir) {
  const auto eval_xs = fields::uniform_grid(config.eval_points);
  const auto stats = model::statistics(surrogate, eval_xs);
  const bool stochastic = surrogate.stochastic();

  // Mean/std curves with references.
  {
    std::ofstream out(dir + "/curves.csv");
    if (!out) throw DataError("cannot write curves.csv");
    RowMat u_rows = interp_rows(dataset.grid, dataset.u_truth, eval_xs);
    std::vector<double> u_mean_ref, u_std_ref, k_mean_ref, k_std_ref;
    column_moments(u_rows, u_mean_ref, u_std_ref);
    const bool has_k = !stats.k_mean.empty();
    RowMat k_rows;
    if (has_k) {
      k_rows = interp_rows(dataset.grid, dataset.field_truth.trajectories, eval_xs);
      column_moments(k_rows, k_mean_ref, k_std_ref);
    }
    out << "x,u_mean,u_mean_ref,u_std,u_std_ref";
    if (has_k) out << ",k_mean,k_mean_ref,k_std,k_std_ref";
    out << "\n";
    for (std::size_t i = 0; i < eval_xs.size(); ++i) {
      std::string line;
      format_double(line, eval_xs[i]);
      for (double v : {stats.u_mean[i], u_mean_ref[i], stats.u_std[i], u_std_ref[i]}) {
        line += ",";
        format_double(line, v);
      }
      if (has_k) {
        for (double v : {stats.k_mean[i], k_mean_ref[i], stats.k_std[i], k_std_ref[i]}) {
          line += ",";
          format_double(line, v);
        }
      }
      out << line << "\n";
    }
  }

  if (!stochastic) return;

  // u mode curves with projected references.
  {
    std::ofstream out(dir + "/modes_u.csv");
    const auto u_modes_pred = u_mode_curves(surrogate, eval_xs);
    RowMat u_rows = interp_rows(dataset.grid, dataset.u_truth, eval_xs);
    const std::size_t n = u_rows.rows();
    const std::size_t p1 = surrogate.basis.indices.size();
    out << "x";
    for (std::size_t a = 1; a < p1; ++a) {
      out << ",mode" << a << "_pred,mode" << a << "_ref";
    }
    out << "\n";
    RowMat refs(p1, eval_xs.size());
    for (std::size_t a = 1; a < p1; ++a) {
      for (std::size_t s = 0; s < n; ++s) {
        const double psi = surrogate.basis.sample_psi(s, a);
        auto row = u_rows.row(s);
        for (std::size_t i = 0; i < eval_xs.size(); ++i) refs(a, i) += psi * row[i];
      }
      for (std::size_t i = 0; i < eval_xs.size(); ++i) {
        refs(a, i) /= static_cast<double>(n);
      }
    }
    for (std::size_t i = 0; i < eval_xs.size(); ++i) {
      std::string line;
      format_double(line, eval_xs[i]);
      for (std::size_t a = 1; a < p1; ++a) {
        line += ",";
        format_double(line, u_modes_pred(a, i));
        line += ",";
        format_double(line, refs(a, i));
      }
      out << line << "\n";
    }
  }

  // Prediction overlays for the first test snapshots.
  if (config.n_test_snapshots > 0) {
    std::ofstream out(dir + "/predictions.csv");
    const auto sensor_idx = grid_indices(dataset.grid, dataset.train.k_sensor_xs);
    const auto readings = readings_at(dataset.test_field.trajectories, sensor_idx);
    const auto test_u = interp_rows(dataset.grid, dataset.test_u, eval_xs);
    const std::size_t shown = std::min<std::size_t>(3, readings.rows());
    out << "x";
    for (std::size_t s = 0; s < shown; ++s) {
      out << ",u_pred_" << s << ",u_true_" << s;
    }
    out << "\n";
    std::vector<std::vector<double>> curves;
    for (std::size_t s = 0; s < shown; ++s) {
      curves.push_back(model::predict_snapshot(surrogate, readings.row(s), eval_xs).u);
    }
    for (std::size_t i = 0; i < eval_xs.size(); ++i) {
      std::string line;
      format_double(line, eval_xs[i]);
      for (std::size_t s = 0; s < shown; ++s) {
        line += ",";
        format_double(line, curves[s][i]);
        line += ",";
        format_double(line, test_u(s, i));
      }
      out << line << "\n";
    }
  }
}

}  // namespace

RunOutcome run_preset(const ExperimentConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(config.out_dir);

  Dataset dataset = generate_dataset(config);
  auto surrogate = model::build_surrogate(make_problem_spec(config), dataset.train,
                                          make_shapes(config), config.apc_order,
                                          config.energy_threshold, config.seed);
  RunOutcome outcome;
  outcome.training = model::train(surrogate, dataset.train, make_schedule(config));
  outcome.report = evaluate_model(config, surrogate, dataset);
  outcome.report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  save_bundle(config, surrogate, config.out_dir + "/model");
  {
    std::ofstream out(config.out_dir + "/report.json");
    out << to_report_json(outcome.report) << "\n";
  }
  write_report_csv(outcome.report, config.out_dir + "/report.csv");
  write_plot_data(config, surrogate, dataset, config.out_dir);
  {
    std::ofstream out(config.out_dir + "/loss_history.csv");
    out << "epoch,mse_u,mse_k,mse_f,l2,total\n";
    for (const auto& [epoch, loss] : outcome.training.history) {
      out << epoch << "," << loss.mse_u << "," << loss.mse_k << "," << loss.mse_f
          << "," << loss.l2 << "," << loss.total << "\n";
    }
  }
  outcome.surrogate = std::move(surrogate);
  return outcome;
}

std::vector<SweepCell> sweep(const ExperimentConfig& base) {
  if (base.sweep_values.empty()) throw ConfigError("sweep: no values given");
  const auto& param = base.sweep_parameter;
  if (param != "n_f_sensors" && param != "lambda" && param != "net_shape") {
    throw ConfigError("sweep parameter must be n_f_sensors, lambda, or net_shape");
  }

  auto cell_config = [&](const std::string& value) {
    ExperimentConfig c = base;
    c.sweep_parameter.clear();
    c.sweep_values.clear();
    if (param == "n_f_sensors") {
      c.n_f_sensors = std::stoi(value);
    } else if (param == "lambda") {
      c.l2_lambda = std::stod(value);
    } else {
      const auto xpos = value.find('x');
      if (xpos == std::string::npos) {
        throw ConfigError("net_shape values look like '4x32'");
      }
      const int layers = std::stoi(value.substr(0, xpos));
      const int width = std::stoi(value.substr(xpos + 1));
      c.k_modes_shape = {layers, width};
      c.u_modes_shape = {layers, width};
    }
    c.out_dir = base.out_dir + "/sweep_" + param + "_" + value;
    return c;
  };

  std::vector<SweepCell> cells(base.sweep_values.size());
  auto run_cell = [&](std::size_t i) {
    cells[i].value = base.sweep_values[i];
    try {
      cells[i].report = run_preset(cell_config(base.sweep_values[i])).report;
    } catch (const std::exception& e) {
      cells[i].failed = true;
      cells[i].error = e.what();
    }
  };

  const int workers = std::max(1, base.workers);
  if (workers == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::vector<std::future<void>> futures;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      futures.push_back(std::async(std::launch::async, run_cell, i));
      if (futures.size() == static_cast<std::size_t>(workers)) {
        for (auto& f : futures) f.get();
        futures.clear();
      }
    }
    for (auto& f : futures) f.get();
  }
  return cells;
}

void write_sweep_csv(const ExperimentConfig& base, const std::vector<SweepCell>& cells,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "parameter,value,status,u_pred_err,k_pred_err,mean_traj_err\n";
  for (const auto& cell : cells) {
    out << base.sweep_parameter << "," << cell.value << ",";
    if (cell.failed) {
      out << "failed,,,\n";
      continue;
    }
    out << "ok,";
    if (cell.report.u_pred_err) out << *cell.report.u_pred_err;
    out << ",";
    if (cell.report.k_pred_err) out << *cell.report.k_pred_err;
    out << "," << cell.report.mean_trajectory_error() << "\n";
  }
}

active::ActiveLearningLog run_active_learning(const ExperimentConfig& config) {
  const auto kind = problem_kind(config);
  if (kind != model::ProblemKind::kInverseElliptic &&
      kind != model::ProblemKind::kDeterministicElliptic) {
    throw ConfigError("active learning runs on the elliptic problem kinds");
  }
  fs::create_directories(config.out_dir);
  Dataset dataset = generate_dataset(config);

  active::ActiveProblem prob;
  prob.problem = make_problem_spec(config);
  prob.shapes = make_shapes(config);
  prob.apc_order = config.apc_order;
  prob.energy_threshold = config.energy_threshold;
  prob.schedule = make_schedule(config);
  prob.initial_data = dataset.train;
  prob.k_truth = dataset.field_truth;

  prob.evaluate = [&](const model::SurrogateModel& surrogate,
                      active::StepRecord& rec) {
    // The sensor set grows step by step; predictions read the current book.
    EvalReport r = evaluate_model(config, surrogate, dataset, rec.sensors.locations);
    rec.k_mean_err = r.k_mean_err.value_or(0.0);
    rec.k_std_err = r.k_std_err.value_or(0.0);
    rec.k_pred_err = r.k_pred_err.value_or(0.0);
    rec.u_mean_err = r.u_mean_err.value_or(0.0);
    rec.u_std_err = r.u_std_err.value_or(0.0);
    rec.u_pred_err = r.u_pred_err.value_or(0.0);
  };

  active::ActiveLoopConfig loop;
  loop.rho = config.rho;
  loop.mc_passes = config.mc_passes;
  loop.max_steps = config.max_steps;
  loop.patience = config.patience;
  loop.use_patience = config.use_patience;
  loop.query_points = config.query_points;
  loop.seed = config.seed;

  auto log = active::active_learning_loop(prob, loop);
  active::write_log_csv(log, config.out_dir + "/active_log.csv");
  active::write_log_json(log, config.out_dir + "/active_log.json");
  return log;
}

}  // namespace apcnet::harness
