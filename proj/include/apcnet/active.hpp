#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apcnet/fields.hpp"
#include "apcnet/networks.hpp"
#include "apcnet/surrogate.hpp"

namespace apcnet::active {

/// Pointwise Monte Carlo dropout statistics over a query grid.
struct DropoutStats {
  std::vector<double> query_xs;
  std::vector<double> mean;
  std::vector<double> stddev;  ///< population standard deviation over passes
  int passes = 0;              ///< T
};

/// Mean/std of one network output over T independent dropout masks.  Each
/// pass draws one mask and evaluates the whole curve under it.  Accumulation
/// is block-deterministic, so results do not depend on thread count.
DropoutStats mc_dropout_stats(const nn::Mlp& net, std::span<const double> query_xs,
                              int passes, std::uint64_t seed, int output_index = 0);

/// Sensor locations with positive integer multiplicities.  Weight w means the
/// sensor's data rows enter the loss w times.
struct SensorBook {
  std::vector<double> locations;
  std::vector<int> weights;

  /// Index of the location nearest to x (ties to the leftmost location).
  std::size_t nearest(double x) const;
};

enum class PlacementDecision { kNewSensor, kDuplicate };

struct Proposal {
  double x_star = 0.0;           ///< argmax of the std curve (ties: smallest x)
  PlacementDecision decision = PlacementDecision::kNewSensor;
  std::size_t sensor_index = 0;  ///< appended or incremented entry
};

/// Places a sensor at the uncertainty peak, or counts the nearest existing
/// sensor once more when the peak is within distance rho of it.
Proposal propose_sensor(const DropoutStats& stats, SensorBook& book, double rho);

struct StepRecord {
  int step = 0;
  SensorBook sensors;
  double k_mean_err = 0.0, k_std_err = 0.0, k_pred_err = 0.0;
  double u_mean_err = 0.0, u_std_err = 0.0, u_pred_err = 0.0;
  std::optional<Proposal> proposal;  ///< absent on the final evaluation-only step
};

struct ActiveLearningLog {
  std::vector<StepRecord> steps;
  int new_sensor_count() const;
};

/// CSV: one row per step with the sensor count, decision, peak location and
/// the six error columns.  JSON carries the full sensor books.
void write_log_csv(const ActiveLearningLog& log, const std::string& path);
void write_log_json(const ActiveLearningLog& log, const std::string& path);

/// Everything the loop needs to know about one problem instance.  The ground
/// truth ensemble provides readings for newly placed sensors (snapped to its
/// grid) and the references for error reporting; the evaluate callback is
/// supplied by the harness so error definitions stay in one place.
struct ActiveLoopConfig {
  double rho = 0.03;
  int mc_passes = 10000;
  int max_steps = 15;
  int patience = 2;      ///< stop after this many consecutive non-improvements
  bool use_patience = false;  ///< deterministic runs go the full budget
  int query_points = 201;
  std::uint64_t seed = 0;
};

struct ActiveProblem {
  model::ProblemSpec problem;
  model::NetShapes shapes;
  int apc_order = 1;
  double energy_threshold = 0.99;
  model::TrainSchedule schedule;   ///< per-step training (seed re-derived per step)
  model::TrainingSet initial_data;
  /// Ground-truth field trajectories on the generation grid; readings for a
  /// newly placed sensor are taken at the nearest grid point.
  fields::FieldEnsemble k_truth;
  /// Fills the six error columns for the step's trained model.
  std::function<void(const model::SurrogateModel&, StepRecord&)> evaluate;
};

/// The placement loop: train, measure dropout uncertainty of the placement
/// target (the k network for deterministic problems, the first k mode for
/// stochastic ones), place or duplicate a sensor, extend the data, and repeat.
/// PCA and the polynomial basis are refit every step since the principal
/// components change with the sensor set.  Steps are sequential by design;
/// parallelism lives inside training and the Monte Carlo passes.
ActiveLearningLog active_learning_loop(const ActiveProblem& prob,
                                       const ActiveLoopConfig& config);

}  // namespace apcnet::active
