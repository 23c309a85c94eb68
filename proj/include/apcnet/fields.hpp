#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apcnet/matrix.hpp"

namespace apcnet::fields {

/// Squared-exponential kernel parameters.
struct KernelSpec {
  double sigma = 1.0;  ///< standard deviation of the process
  double lc = 0.5;     ///< correlation length
};

/// sigma^2 * exp(-(x - x2)^2 / lc^2)
double se_covariance(double x, double x2, const KernelSpec& kernel);

/// A scalar field sampled on a strictly increasing grid.
struct GridField {
  std::vector<double> grid;
  std::vector<double> values;
};

/// N trajectories of a random field on a shared grid.
struct FieldEnsemble {
  std::vector<double> grid;
  RowMat trajectories;  ///< one row per trajectory
  std::uint64_t seed = 0;
  double jitter = 0.0;  ///< diagonal jitter the Cholesky needed, for the record
};

/// n uniformly spaced points on [-1, 1], endpoints included.
std::vector<double> uniform_grid(int n);

/// Index of the grid point nearest to x (ties to the lower index).
std::size_t nearest_grid_index(std::span<const double> grid, double x);

/// Draws n trajectories of a Gaussian process with the given mean function
/// and squared-exponential kernel, restricted to `grid`.  The kernel matrix
/// is factorized by Cholesky with an escalating diagonal jitter (1e-12 to
/// 1e-6 times sigma^2).  With log_normal, trajectories are exp() of the
/// Gaussian draws (the mean function is then the mean of the log).
/// Trajectory i uses an RNG substream derived from (seed, i), so results do
/// not depend on thread count.
FieldEnsemble sample_gp(const std::function<double(double)>& mean_fn,
                        const KernelSpec& kernel, std::span<const double> grid,
                        int n, std::uint64_t seed, bool log_normal = false);

/// Solves -u'' = f on a uniform grid with u = 0 at both endpoints
/// (second-order central differences, tridiagonal solve).
GridField solve_poisson_fd(const GridField& f);

/// Solves -(k u')' = f in conservative form with midpoint flux coefficients
/// k_{i+1/2} = (k_i + k_{i+1})/2 and zero Dirichlet boundaries.  Requires
/// k > 0 everywhere.
GridField solve_elliptic_fd(const GridField& k, const GridField& f);

/// Applies the FD solver row-by-row to every trajectory (in parallel).
RowMat solve_poisson_rows(const FieldEnsemble& f);
RowMat solve_elliptic_rows(const FieldEnsemble& k, double constant_forcing);

/// Columnar ensemble CSV: header `x,traj_0,...,traj_{N-1}`, one row per grid
/// point, 17 significant digits.
void write_ensemble_csv(const FieldEnsemble& ensemble, const std::string& path);
FieldEnsemble read_ensemble_csv(const std::string& path);

/// Linear interpolation of a gridded trajectory onto query points.
double interp_linear(std::span<const double> grid, std::span<const double> values,
                     double x);

}  // namespace apcnet::fields
