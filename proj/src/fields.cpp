#include "apcnet/fields.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "apcnet/parallel.hpp"
#include "apcnet/rng.hpp"

namespace apcnet::fields {

namespace {

void check_uniform(std::span<const double> grid, const char* who) {
  if (grid.size() < 3) {
    throw ConfigError(std::string(who) + ": grid needs at least 3 points");
  }
  const double h = grid[1] - grid[0];
  for (std::size_t i = 1; i + 1 < grid.size(); ++i) {
    if (std::abs((grid[i + 1] - grid[i]) - h) > 1e-12 * std::max(1.0, std::abs(h))) {
      throw ConfigError(std::string(who) + ": grid is not uniform");
    }
  }
}

// Tridiagonal solve (Thomas algorithm) for diag/lower/upper in place.
std::vector<double> thomas(std::vector<double> lower, std::vector<double> diag,
                           std::vector<double> upper, std::vector<double> rhs) {
  const std::size_t n = diag.size();
  for (std::size_t i = 1; i < n; ++i) {
    const double w = lower[i] / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  std::vector<double> x(n);
  x[n - 1] = rhs[n - 1] / diag[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) {
    x[i] = (rhs[i] - upper[i] * x[i + 1]) / diag[i];
  }
  return x;
}

void format_double(std::string& out, double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

}  // namespace

double se_covariance(double x, double x2, const KernelSpec& kernel) {
  const double d = x - x2;
  return kernel.sigma * kernel.sigma * std::exp(-d * d / (kernel.lc * kernel.lc));
}

std::vector<double> uniform_grid(int n) {
  if (n < 2) throw ConfigError("uniform_grid: need at least 2 points");
  std::vector<double> g(n);
  const double h = 2.0 / (n - 1);
  for (int i = 0; i < n; ++i) g[i] = -1.0 + h * i;
  g.front() = -1.0;
  g.back() = 1.0;
  return g;
}

std::size_t nearest_grid_index(std::span<const double> grid, double x) {
  if (grid.empty()) throw DataError("nearest_grid_index: empty grid");
  auto it = std::lower_bound(grid.begin(), grid.end(), x);
  if (it == grid.end()) return grid.size() - 1;
  if (it == grid.begin()) return 0;
  const std::size_t hi = static_cast<std::size_t>(it - grid.begin());
  return (x - grid[hi - 1]) <= (grid[hi] - x) ? hi - 1 : hi;
}

FieldEnsemble sample_gp(const std::function<double(double)>& mean_fn,
                        const KernelSpec& kernel, std::span<const double> grid,
                        int n, std::uint64_t seed, bool log_normal) {
  if (grid.size() < 2) throw ConfigError("sample_gp: grid needs at least 2 points");
  if (n < 1) throw ConfigError("sample_gp: need at least 1 trajectory");
  if (kernel.sigma <= 0.0 || kernel.lc <= 0.0) {
    throw ConfigError("sample_gp: sigma and lc must be positive");
  }

  const std::size_t m = grid.size();
  Eigen::MatrixXd cov(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double c = se_covariance(grid[i], grid[j], kernel);
      cov(i, j) = c;
      cov(j, i) = c;
    }
  }

  // Squared-exponential kernels on fine grids are numerically near-singular;
  // escalate jitter from 1e-12*sigma^2 by 10x up to 1e-6*sigma^2.
  const double s2 = kernel.sigma * kernel.sigma;
  double jitter = 1e-12 * s2;
  const double max_jitter = 1e-6 * s2;
  Eigen::LLT<Eigen::MatrixXd> llt;
  double used_jitter = 0.0;
  bool ok = false;
  llt.compute(cov);
  if (llt.info() == Eigen::Success) {
    ok = true;
  } else {
    while (jitter <= max_jitter * (1.0 + 1e-15)) {
      Eigen::MatrixXd shifted = cov;
      shifted.diagonal().array() += jitter;
      llt.compute(shifted);
      if (llt.info() == Eigen::Success) {
        ok = true;
        used_jitter = jitter;
        break;
      }
      jitter *= 10.0;
    }
  }
  if (!ok) {
    throw NumericError("sample_gp: Cholesky failed up to jitter " +
                       std::to_string(max_jitter));
  }
  const Eigen::MatrixXd chol = llt.matrixL();

  std::vector<double> mean(m);
  for (std::size_t i = 0; i < m; ++i) mean[i] = mean_fn(grid[i]);

  FieldEnsemble out;
  out.grid.assign(grid.begin(), grid.end());
  out.trajectories = RowMat(n, m);
  out.seed = seed;
  out.jitter = used_jitter;

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t row) {
    Rng rng(derive_seed(seed, {stream::kTrajectory, row}));
    Eigen::VectorXd z(m);
    for (std::size_t j = 0; j < m; ++j) z(j) = rng.normal();
    Eigen::VectorXd draw = chol * z;
    auto dst = out.trajectories.row(row);
    for (std::size_t j = 0; j < m; ++j) {
      const double g = mean[j] + draw(j);
      dst[j] = log_normal ? std::exp(g) : g;
    }
  });
  return out;
}

GridField solve_poisson_fd(const GridField& f) {
  check_uniform(f.grid, "solve_poisson_fd");
  if (f.values.size() != f.grid.size()) {
    throw ConfigError("solve_poisson_fd: grid/values size mismatch");
  }
  const std::size_t n = f.grid.size();
  const double h = f.grid[1] - f.grid[0];
  const std::size_t m = n - 2;  // interior unknowns
  std::vector<double> lower(m, -1.0 / (h * h));
  std::vector<double> diag(m, 2.0 / (h * h));
  std::vector<double> upper(m, -1.0 / (h * h));
  std::vector<double> rhs(f.values.begin() + 1, f.values.end() - 1);
  auto u = thomas(std::move(lower), std::move(diag), std::move(upper), std::move(rhs));
  GridField out;
  out.grid = f.grid;
  out.values.assign(n, 0.0);
  std::copy(u.begin(), u.end(), out.values.begin() + 1);
  return out;
}

GridField solve_elliptic_fd(const GridField& k, const GridField& f) {
  check_uniform(f.grid, "solve_elliptic_fd");
  if (k.grid != f.grid) {
    throw ConfigError("solve_elliptic_fd: k and f must share a grid");
  }
  if (k.values.size() != k.grid.size() || f.values.size() != f.grid.size()) {
    throw ConfigError("solve_elliptic_fd: grid/values size mismatch");
  }
  for (double kv : k.values) {
    if (!(kv > 0.0)) {
      throw NumericError("solve_elliptic_fd: diffusion coefficient must be positive");
    }
  }
  const std::size_t n = f.grid.size();
  const double h = f.grid[1] - f.grid[0];
  const double ih2 = 1.0 / (h * h);
  const std::size_t m = n - 2;
  std::vector<double> lower(m), diag(m), upper(m), rhs(m);
  for (std::size_t i = 0; i < m; ++i) {
    // unknown index i corresponds to grid node i+1
    const double k_minus = 0.5 * (k.values[i] + k.values[i + 1]);
    const double k_plus = 0.5 * (k.values[i + 1] + k.values[i + 2]);
    lower[i] = -k_minus * ih2;
    diag[i] = (k_minus + k_plus) * ih2;
    upper[i] = -k_plus * ih2;
    rhs[i] = f.values[i + 1];
  }
  auto u = thomas(std::move(lower), std::move(diag), std::move(upper), std::move(rhs));
  GridField out;
  out.grid = f.grid;
  out.values.assign(n, 0.0);
  std::copy(u.begin(), u.end(), out.values.begin() + 1);
  return out;
}

RowMat solve_poisson_rows(const FieldEnsemble& f) {
  RowMat out(f.trajectories.rows(), f.trajectories.cols());
  parallel_for(f.trajectories.rows(), [&](std::size_t r) {
    GridField row{f.grid, {f.trajectories.row(r).begin(), f.trajectories.row(r).end()}};
    GridField u = solve_poisson_fd(row);
    std::copy(u.values.begin(), u.values.end(), out.row(r).begin());
  });
  return out;
}

RowMat solve_elliptic_rows(const FieldEnsemble& k, double constant_forcing) {
  RowMat out(k.trajectories.rows(), k.trajectories.cols());
  GridField f{k.grid, std::vector<double>(k.grid.size(), constant_forcing)};
  parallel_for(k.trajectories.rows(), [&](std::size_t r) {
    GridField row{k.grid, {k.trajectories.row(r).begin(), k.trajectories.row(r).end()}};
    GridField u = solve_elliptic_fd(row, f);
    std::copy(u.values.begin(), u.values.end(), out.row(r).begin());
  });
  return out;
}

void write_ensemble_csv(const FieldEnsemble& ensemble, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  std::string line = "x";
  for (std::size_t t = 0; t < ensemble.trajectories.rows(); ++t) {
    line += ",traj_" + std::to_string(t);
  }
  line += "\n";
  out << line;
  for (std::size_t i = 0; i < ensemble.grid.size(); ++i) {
    line.clear();
    format_double(line, ensemble.grid[i]);
    for (std::size_t t = 0; t < ensemble.trajectories.rows(); ++t) {
      line.push_back(',');
      format_double(line, ensemble.trajectories(t, i));
    }
    line.push_back('\n');
    out << line;
  }
}

FieldEnsemble read_ensemble_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  std::string header;
  if (!std::getline(in, header)) throw DataError("empty ensemble csv: " + path);
  std::size_t n_traj = 0;
  for (char c : header) n_traj += (c == ',');
  std::vector<double> grid;
  std::vector<std::vector<double>> columns(n_traj);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0, field = 0;
    while (pos <= line.size()) {
      std::size_t next = line.find(',', pos);
      if (next == std::string::npos) next = line.size();
      double v = 0.0;
      auto res = std::from_chars(line.data() + pos, line.data() + next, v);
      if (res.ec != std::errc()) throw DataError("bad number in " + path);
      if (field == 0) {
        grid.push_back(v);
      } else if (field - 1 < n_traj) {
        columns[field - 1].push_back(v);
      }
      ++field;
      pos = next + 1;
      if (next == line.size()) break;
    }
  }
  FieldEnsemble out;
  out.grid = std::move(grid);
  out.trajectories = RowMat(n_traj, out.grid.size());
  for (std::size_t t = 0; t < n_traj; ++t) {
    if (columns[t].size() != out.grid.size()) {
      throw DataError("ragged ensemble csv: " + path);
    }
    std::copy(columns[t].begin(), columns[t].end(), out.trajectories.row(t).begin());
  }
  return out;
}

double interp_linear(std::span<const double> grid, std::span<const double> values,
                     double x) {
  if (grid.size() < 2) throw DataError("interp_linear: need at least 2 points");
  if (x <= grid.front()) return values.front();
  if (x >= grid.back()) return values.back();
  auto it = std::upper_bound(grid.begin(), grid.end(), x);
  const std::size_t hi = static_cast<std::size_t>(it - grid.begin());
  const double t = (x - grid[hi - 1]) / (grid[hi] - grid[hi - 1]);
  return values[hi - 1] + t * (values[hi] - values[hi - 1]);
}

}  // namespace apcnet::fields
