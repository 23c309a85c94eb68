#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apcnet/active.hpp"
#include "apcnet/fields.hpp"
#include "apcnet/surrogate.hpp"

namespace apcnet::harness {

/// Full experiment description.  Presets fill every field; explicit config
/// values override them.  Serializes losslessly: unknown JSON keys are
/// rejected.
struct ExperimentConfig {
  std::string preset;  ///< name the defaults came from, if any
  std::string problem = "inverse_elliptic";
  double sigma = 0.1;
  double lc = 1.0;
  int n_k_sensors = 4;
  int n_u_sensors = 7;
  int n_f_sensors = 21;  ///< collocation sites; field sensors for the forward kind
  int n_snapshots = 1000;
  int n_test_snapshots = 500;
  int apc_order = 1;
  double energy_threshold = 1.0;
  std::vector<int> k_mean_shape{2, 4};   ///< {hidden layers, width}
  std::vector<int> k_modes_shape{4, 32};
  std::vector<int> u_mean_shape{2, 4};
  std::vector<int> u_modes_shape{4, 32};
  double dropout_p = 0.0;
  std::string dropout_on = "none";  ///< "none" | "k" | "u"
  double l2_lambda = 5e-4;
  double learning_rate = 1e-3;
  long epochs = 50000;
  std::uint64_t seed = 20240101;
  double epoch_scale = 1.0;
  int generation_points = 257;
  int eval_points = 101;
  // Active learning.
  double rho = 0.03;
  int mc_passes = 10000;
  int max_steps = 15;
  int patience = 2;
  bool use_patience = false;
  int query_points = 201;
  // Sweep.
  std::string sweep_parameter;          ///< n_f_sensors | lambda | net_shape
  std::vector<std::string> sweep_values;
  int workers = 1;
  std::string out_dir = "out";
};

ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

/// JSON round trip.  from_config_json starts from the preset named in the
/// document (when present) and applies the remaining keys on top.
std::string to_config_json(const ExperimentConfig& config);
ExperimentConfig from_config_json(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

/// FNV-1a hash of the canonical config serialization, excluding fields that
/// cannot change results (output directory, worker count).
std::string config_hash(const ExperimentConfig& config);

model::ProblemKind problem_kind(const ExperimentConfig& config);

/// Everything one experiment run needs: the training set, the generating
/// ensembles, and the held-out test trajectories (disjoint RNG stream).
struct Dataset {
  std::vector<double> grid;
  model::TrainingSet train;
  fields::FieldEnsemble field_truth;  ///< training field trajectories (k or f)
  RowMat u_truth;                     ///< training u trajectories on the grid
  fields::FieldEnsemble test_field;
  RowMat test_u;
};

Dataset generate_dataset(const ExperimentConfig& config);

/// sqrt(sum (pred-ref)^2) / sqrt(sum ref^2) on a shared grid.
double relative_l2(const fields::GridField& pred, const fields::GridField& ref);
double relative_l2(std::span<const double> pred, std::span<const double> ref);

struct EvalReport {
  std::string config_hash;
  std::optional<double> k_mean_err, k_std_err, k_pred_err;
  std::optional<double> u_mean_err, u_std_err, u_pred_err;
  std::vector<double> k_mode_errs;  ///< modes 1..M
  std::vector<double> u_mode_errs;  ///< modes 1..P
  std::vector<int> k_mode_sign_flips, u_mode_sign_flips;
  double runtime_seconds = 0.0;

  /// Mean trajectory-prediction error: average of the available pred errors.
  double mean_trajectory_error() const;
};

std::string to_report_json(const EvalReport& report);
EvalReport from_report_json(const std::string& json_text);
void write_report_csv(const EvalReport& report, const std::string& path);

/// Errors of a trained model against the dataset's references on the
/// evaluation grid.  field_sensor_xs names the sensors whose readings feed
/// the test-snapshot predictions; it defaults to the dataset's training
/// sensors but grows during active learning.
EvalReport evaluate_model(const ExperimentConfig& config,
                          const model::SurrogateModel& surrogate,
                          const Dataset& dataset);
EvalReport evaluate_model(const ExperimentConfig& config,
                          const model::SurrogateModel& surrogate,
                          const Dataset& dataset,
                          std::span<const double> field_sensor_xs);

struct RunOutcome {
  EvalReport report;
  model::SurrogateModel surrogate;
  model::TrainResult training;
};

/// generate -> train -> predict -> evaluate, writing the model bundle, the
/// report (JSON and CSV) and plot-data CSVs under out_dir.
RunOutcome run_preset(const ExperimentConfig& config);

/// Model bundle round trip (manifest.json, pca.csv, basis.csv, checkpoints).
void save_bundle(const ExperimentConfig& config, const model::SurrogateModel& surrogate,
                 const std::string& dir);
model::SurrogateModel load_bundle(const ExperimentConfig& config, const Dataset& dataset,
                                  const std::string& dir);

struct SweepCell {
  std::string value;
  EvalReport report;
  bool failed = false;
  std::string error;
};

/// One full run per value (fixed seed), tabulated; failed cells are marked
/// and the sweep continues.
std::vector<SweepCell> sweep(const ExperimentConfig& base);
void write_sweep_csv(const ExperimentConfig& base, const std::vector<SweepCell>& cells,
                     const std::string& path);

/// Active-learning driver: assembles the loop inputs from the config and
/// dataset and runs it, writing the log CSV/JSON under out_dir.
active::ActiveLearningLog run_active_learning(const ExperimentConfig& config);

/// CLI entry point (subcommands generate/train/predict/evaluate/active-learn/
/// sweep/report).  Returns the process exit code: 0 success, 2 configuration
/// error, 3 numerical divergence.
int run_cli(int argc, const char* const* argv);

}  // namespace apcnet::harness
