#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "apcnet/autodiff.hpp"
#include "apcnet/matrix.hpp"
#include "apcnet/networks.hpp"
#include "apcnet/reduction.hpp"

namespace apcnet::model {

enum class ProblemKind {
  kForwardPoisson,        ///< -u'' = f(x;w), f stochastic, u data at boundary
  kInverseElliptic,       ///< -(k u')' = f const, k stochastic, scattered data
  kDeterministicPoisson,  ///< -u'' = f(x), single network
  kDeterministicElliptic  ///< -(k u')' = f const, two networks
};

struct ProblemSpec {
  ProblemKind kind = ProblemKind::kInverseElliptic;
  double constant_forcing = 10.0;  ///< elliptic kinds
  double domain_lo = -1.0, domain_hi = 1.0;
  double bc_lo = 0.0, bc_hi = 0.0;
};

/// Deterministic forcing f(x) for the deterministic kinds (the Poisson one
/// uses 9 pi^2 sin(3 pi x / 2) / 4, the elliptic one the constant).
double deterministic_forcing(const ProblemSpec& problem, double x);

/// True diffusion coefficient of the deterministic elliptic benchmark,
/// exp(sin(3 pi x / 2) / 5).
double deterministic_elliptic_k(double x);

/// Sensor readings for one problem.  Snapshot row s across every group
/// corresponds to one random event.  For the forward kind the field sensors
/// (k slots) carry the forcing readings and the collocation sites must
/// coincide with them.  Deterministic kinds use a single snapshot row.
struct TrainingSet {
  std::vector<double> k_sensor_xs;
  std::vector<int> k_weights;  ///< multiplicities; empty means all 1
  std::vector<double> u_sensor_xs;
  std::vector<double> collocation_xs;
  RowMat k_snapshots;  ///< N x N_k
  RowMat u_snapshots;  ///< N x N_u

  std::size_t snapshot_count() const;
};

/// Network shape configuration for the surrogate family.
struct NetShapes {
  nn::MlpSpec k_mean{.hidden_layers = 2, .width = 4};
  nn::MlpSpec k_modes{.hidden_layers = 4, .width = 32};
  nn::MlpSpec u_mean{.hidden_layers = 2, .width = 4};
  nn::MlpSpec u_modes{.hidden_layers = 4, .width = 32};
};

/// The surrogate family: a small mean network and a mode network for the
/// random field, plus one network per polynomial order group for u, tied
/// together by the PCA model and the sample-measure polynomial basis.
struct SurrogateModel {
  ProblemSpec problem;
  int apc_order = 1;
  pc::PcaModel pca;    ///< empty (mean.size()==0) for deterministic kinds
  pc::ApcBasis basis;  ///< single constant polynomial for deterministic kinds
  std::optional<nn::Mlp> k_mean_net;
  std::optional<nn::Mlp> k_modes_net;  ///< outputs M mode values
  std::vector<nn::Mlp> u_group_nets;   ///< order group g outputs its index count

  bool stochastic() const {
    return problem.kind == ProblemKind::kForwardPoisson ||
           problem.kind == ProblemKind::kInverseElliptic;
  }
  bool has_k_nets() const { return k_mean_net.has_value(); }
  int mode_count() const { return pca.retained; }
  std::size_t u_output_count() const;  ///< P+1 across groups
  std::size_t param_count() const;
  /// Offset of each net's parameters in the concatenated layout
  /// [k_mean | k_modes | u_group_0 .. u_group_r].
  std::vector<std::size_t> param_offsets() const;
};

/// Fits PCA and the polynomial basis on the training snapshots and builds
/// freshly initialized networks sized to the retained dimension.
SurrogateModel build_surrogate(const ProblemSpec& problem, const TrainingSet& data,
                               const NetShapes& shapes, int apc_order,
                               double energy_threshold, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pointwise combination and residual forms (shared by both loss engines and
// by the prediction path; unit-testable against closed-form oracles).

/// mean + sum_l sqrt(lambda_l) * mode_l * xi_l, propagated through the dual
/// components.
ad::DualValue kl_combine(const ad::DualValue& mean,
                         std::span<const ad::DualValue> modes,
                         std::span<const double> sqrt_lambda,
                         std::span<const double> xi);

/// sum_alpha mode_alpha * psi_alpha.
ad::DualValue apc_combine(std::span<const ad::DualValue> modes,
                          std::span<const double> psi);

inline double poisson_residual(const ad::DualValue& u, double f) {
  return -u.d2_dx2 - f;
}

/// Expanded conservative form -(k u')' - f = -k' u' - k u'' - f.
inline double elliptic_residual(const ad::DualValue& k, const ad::DualValue& u,
                                double f) {
  return -k.d_dx * u.d_dx - k.value * u.d2_dx2 - f;
}

/// Context for the residual at one point of one snapshot.
struct SnapshotContext {
  std::span<const double> xi;   ///< whitened coordinates (empty: deterministic)
  std::span<const double> psi;  ///< basis values at xi
  double f_value = 0.0;         ///< forcing at this site for this snapshot
};

/// Reconstruction of the random field at x for the given snapshot.
ad::DualValue reconstruct_k(const SurrogateModel& model, double x,
                            std::span<const double> xi);
/// Reconstruction of the solution at x for the given snapshot.
ad::DualValue reconstruct_u(const SurrogateModel& model, double x,
                            std::span<const double> xi,
                            std::span<const double> psi);

/// PDE residual at x under the model's problem kind.
double residual(const SurrogateModel& model, double x, const SnapshotContext& ctx);

// ---------------------------------------------------------------------------
// Composite loss.

struct LossBreakdown {
  double mse_u = 0.0, mse_k = 0.0, mse_f = 0.0, l2 = 0.0;
  double total = 0.0;
};

/// Per-epoch dropout masks, one slot per network (empty scales = no dropout).
struct EpochMasks {
  nn::DropoutMask k_mean, k_modes;
  std::vector<nn::DropoutMask> u_groups;
};

EpochMasks draw_epoch_masks(const SurrogateModel& model, std::uint64_t seed);

enum class LossEngine {
  kKernel,    ///< staged site/snapshot kernels, OpenMP over snapshots and sites
  kReference  ///< one whole-loss autodiff graph, serial; kept for testing
};

/// Precomputed per-snapshot tables (whitened coordinates, basis values,
/// forcing at collocation sites) plus reusable buffers for the staged loss
/// kernel.  Build once per (model, training set) pairing; training reuses it
/// every epoch.
class LossEvaluator {
 public:
  LossEvaluator(SurrogateModel& model, const TrainingSet& data,
                LossEngine engine = LossEngine::kKernel);
  ~LossEvaluator();
  LossEvaluator(const LossEvaluator&) = delete;
  LossEvaluator& operator=(const LossEvaluator&) = delete;

  /// Loss only (no gradient).
  LossBreakdown value(const EpochMasks& masks);

  /// Loss and gradient with respect to the concatenated parameter vector.
  LossBreakdown value_and_gradient(const EpochMasks& masks, std::span<double> grad);

  std::size_t param_count() const;
  const SurrogateModel& model() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Convenience single-shot evaluation (spec operation `composite_loss`).
LossBreakdown composite_loss(SurrogateModel& model, const TrainingSet& data,
                             LossEngine engine = LossEngine::kKernel);

// ---------------------------------------------------------------------------
// Training and prediction.

struct TrainSchedule {
  double learning_rate = 1e-3;
  long epochs = 1000;
  std::uint64_t seed = 0;
  double epoch_scale = 1.0;  ///< effective epochs = round(epochs * scale)
  int history_stride = 100;
};

struct TrainResult {
  std::vector<std::pair<long, LossBreakdown>> history;
  LossBreakdown final_loss;  ///< maskless loss after the last step
  long epochs_run = 0;
};

TrainResult train(SurrogateModel& model, const TrainingSet& data,
                  const TrainSchedule& schedule,
                  LossEngine engine = LossEngine::kKernel);

struct PredictedCurves {
  std::vector<double> xs;
  std::vector<double> k;  ///< empty when the model has no k networks
  std::vector<double> u;
};

/// Whitens a new field-sensor snapshot and reconstructs both curves with one
/// batched forward pass per network.
PredictedCurves predict_snapshot(const SurrogateModel& model,
                                 std::span<const double> new_k_readings,
                                 std::span<const double> query_xs);

struct StatCurves {
  std::vector<double> xs;
  std::vector<double> k_mean, k_std;
  std::vector<double> u_mean, u_std;
};

/// Closed-form moments under the empirical measure: the u mean is the
/// order-zero mode, the u variance the sum of squared higher modes; the k
/// moments come from the KL form.
StatCurves statistics(const SurrogateModel& model, std::span<const double> query_xs);

}  // namespace apcnet::model
