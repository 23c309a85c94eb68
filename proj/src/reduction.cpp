#include "apcnet/reduction.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace apcnet::pc {

namespace {

void format_double(std::string& out, double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

std::vector<double> parse_row(const std::string& line, std::size_t skip_fields) {
  std::vector<double> out;
  std::size_t pos = 0, field = 0;
  while (pos <= line.size()) {
    std::size_t next = line.find(',', pos);
    if (next == std::string::npos) next = line.size();
    if (field >= skip_fields && next > pos) {
      double v = 0.0;
      auto res = std::from_chars(line.data() + pos, line.data() + next, v);
      if (res.ec != std::errc()) throw DataError("bad number in csv row");
      out.push_back(v);
    }
    ++field;
    if (next == line.size()) break;
    pos = next + 1;
  }
  return out;
}

}  // namespace

PcaModel fit_pca(const RowMat& snapshots, double energy_threshold) {
  const std::size_t n = snapshots.rows();
  const std::size_t d = snapshots.cols();
  if (n < 2 || d < 1) throw ConfigError("fit_pca: need at least 2 snapshots and 1 sensor");
  if (!(energy_threshold > 0.0) || energy_threshold > 1.0) {
    throw ConfigError("fit_pca: energy threshold must lie in (0, 1]");
  }

  PcaModel model;
  model.energy_threshold = energy_threshold;
  model.mean.assign(d, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    auto row = snapshots.row(s);
    for (std::size_t j = 0; j < d; ++j) model.mean[j] += row[j];
  }
  for (double& m : model.mean) m /= static_cast<double>(n);

  Eigen::MatrixXd centered(n, d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < d; ++j) {
      centered(s, j) = snapshots(s, j) - model.mean[j];
    }
  }
  // 1/N normalization keeps whitening consistent with the discrete measure
  // weight used by the polynomial basis.
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw NumericError("fit_pca: eigendecomposition failed");
  }

  // Eigen returns ascending order; store descending, clamp round-off
  // negatives to zero, and fix signs deterministically.
  model.eigenvalues.assign(d, 0.0);
  model.eigenvectors = RowMat(d, d);
  for (std::size_t l = 0; l < d; ++l) {
    const std::size_t src = d - 1 - l;
    model.eigenvalues[l] = std::max(0.0, solver.eigenvalues()(src));
    Eigen::VectorXd col = solver.eigenvectors().col(src);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i) {
      if (std::abs(col(i)) > std::abs(col(arg))) arg = i;
    }
    if (col(arg) < 0.0) col = -col;
    for (std::size_t i = 0; i < d; ++i) model.eigenvectors(i, l) = col(i);
  }

  const double total =
      std::accumulate(model.eigenvalues.begin(), model.eigenvalues.end(), 0.0);
  const double scale = std::max(1.0, std::inner_product(model.mean.begin(),
                                                        model.mean.end(),
                                                        model.mean.begin(), 0.0));
  if (total <= 1e-24 * scale) {
    throw NumericError("fit_pca: snapshots carry no variance");
  }

  const double rank_cut = 1e-12 * model.eigenvalues.front();
  int eligible = 0;
  for (double l : model.eigenvalues) {
    if (l >= rank_cut && l > 0.0) ++eligible;
  }
  double cum = 0.0;
  int m = 0;
  for (; m < eligible; ) {
    cum += model.eigenvalues[m];
    ++m;
    if (cum >= energy_threshold * total) break;
  }
  model.retained = std::max(1, m);
  return model;
}

std::vector<double> extract_xi(const PcaModel& model, std::span<const double> snapshot) {
  const std::size_t d = model.mean.size();
  if (snapshot.size() != d) {
    throw ConfigError("extract_xi: snapshot length does not match sensor count");
  }
  std::vector<double> xi(model.retained, 0.0);
  for (int l = 0; l < model.retained; ++l) {
    const double lambda = model.eigenvalues[l];
    if (lambda < 1e-12) {
      throw NumericError("extract_xi: retained eigenvalue below 1e-12, whitening is ill-conditioned");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      acc += model.eigenvectors(i, l) * (snapshot[i] - model.mean[i]);
    }
    xi[l] = acc / std::sqrt(lambda);
  }
  return xi;
}

std::vector<double> kl_reconstruct(const PcaModel& model, std::span<const double> xi) {
  if (static_cast<int>(xi.size()) != model.retained) {
    throw ConfigError("kl_reconstruct: xi length does not match retained dimension");
  }
  std::vector<double> out(model.mean.begin(), model.mean.end());
  for (int l = 0; l < model.retained; ++l) {
    const double scale = std::sqrt(model.eigenvalues[l]) * xi[l];
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += model.eigenvectors(i, l) * scale;
    }
  }
  return out;
}

RowMat extract_xi_rows(const PcaModel& model, const RowMat& snapshots) {
  RowMat xi(snapshots.rows(), model.retained);
  for (std::size_t s = 0; s < snapshots.rows(); ++s) {
    auto row = extract_xi(model, snapshots.row(s));
    std::copy(row.begin(), row.end(), xi.row(s).begin());
  }
  return xi;
}

int MultiIndex::total() const {
  return std::accumulate(exponents.begin(), exponents.end(), 0);
}

namespace {
void enumerate_order(int dims, int remaining, std::vector<int>& current,
                     std::vector<MultiIndex>& out) {
  if (static_cast<int>(current.size()) == dims - 1) {
    current.push_back(remaining);
    out.push_back(MultiIndex{current});
    current.pop_back();
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    current.push_back(e);
    enumerate_order(dims, remaining - e, current, out);
    current.pop_back();
  }
}
}  // namespace

std::vector<MultiIndex> graded_lex_indices(int dims, int order) {
  if (dims < 1 || order < 0) throw ConfigError("graded_lex_indices: invalid dims/order");
  std::vector<MultiIndex> out;
  std::vector<int> current;
  for (int total = 0; total <= order; ++total) {
    enumerate_order(dims, total, current, out);
  }
  return out;
}

std::size_t basis_count(int dims, int order) {
  // (r + M)! / (r! M!) computed multiplicatively
  std::size_t p = 1;
  for (int i = 1; i <= order; ++i) {
    p = p * static_cast<std::size_t>(dims + i) / static_cast<std::size_t>(i);
  }
  return p;
}

ApcBasis build_apc_basis(const RowMat& xi_samples, int order) {
  const std::size_t n = xi_samples.rows();
  const int dims = static_cast<int>(xi_samples.cols());
  if (dims < 1) throw ConfigError("build_apc_basis: no dimensions");
  auto indices = graded_lex_indices(dims, order);
  const std::size_t p1 = indices.size();
  if (n <= p1) {
    throw ConfigError("build_apc_basis: need more samples than basis functions");
  }

  // Monomial matrix over the samples.
  RowMat mono(n, p1);
  for (std::size_t s = 0; s < n; ++s) {
    auto xi = xi_samples.row(s);
    for (std::size_t j = 0; j < p1; ++j) {
      double v = 1.0;
      for (int dimension = 0; dimension < dims; ++dimension) {
        for (int e = 0; e < indices[j].exponents[dimension]; ++e) v *= xi[dimension];
      }
      mono(s, j) = v;
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  auto dot = [&](std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) acc += a[s] * b[s];
    return acc * inv_n;
  };

  // Modified Gram-Schmidt with one re-orthogonalization pass; plain GS loses
  // orthogonality in double precision at order 2 with a few thousand samples.
  RowMat q(p1, n);  // orthonormal columns, stored row-wise for locality
  RowMat coeffs(p1, p1, 0.0);
  std::vector<double> u(n);
  for (std::size_t j = 0; j < p1; ++j) {
    for (std::size_t s = 0; s < n; ++s) u[s] = mono(s, j);
    std::vector<double> t(j, 0.0);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double c = dot(u, q.row(i));
        t[i] += c;
        auto qi = q.row(i);
        for (std::size_t s = 0; s < n; ++s) u[s] -= c * qi[s];
      }
    }
    const double norm = std::sqrt(dot(u, u));
    if (norm < 1e-10) {
      throw NumericError(
          "build_apc_basis: degenerate empirical measure (samples lie on a "
          "low-dimensional variety)");
    }
    for (std::size_t s = 0; s < n; ++s) q(j, s) = u[s] / norm;
    for (std::size_t i = 0; i < j; ++i) coeffs(j, i) = t[i];
    coeffs(j, j) = 1.0 / norm;
  }

  ApcBasis basis;
  basis.dims = dims;
  basis.order = order;
  basis.indices = std::move(indices);
  basis.coeffs = std::move(coeffs);
  basis.xi_samples = xi_samples;
  basis.sample_psi = RowMat(n, p1);
  std::vector<double> psi(p1);
  for (std::size_t s = 0; s < n; ++s) {
    evaluate_basis(basis, xi_samples.row(s), psi);
    std::copy(psi.begin(), psi.end(), basis.sample_psi.row(s).begin());
  }
  return basis;
}

void evaluate_basis(const ApcBasis& basis, std::span<const double> xi,
                    std::span<double> out) {
  const std::size_t p1 = basis.indices.size();
  if (xi.size() != static_cast<std::size_t>(basis.dims)) {
    throw ConfigError("evaluate_basis: xi dimension mismatch");
  }
  if (out.size() != p1) throw ConfigError("evaluate_basis: output size mismatch");
  for (std::size_t j = 0; j < p1; ++j) {
    double v = 1.0;
    for (int dimension = 0; dimension < basis.dims; ++dimension) {
      for (int e = 0; e < basis.indices[j].exponents[dimension]; ++e) {
        v *= xi[dimension];
      }
    }
    for (std::size_t i = 0; i < j; ++i) v -= basis.coeffs(j, i) * out[i];
    out[j] = v * basis.coeffs(j, j);
  }
}

std::vector<double> project_modes(const ApcBasis& basis, std::span<const double> values) {
  const std::size_t n = basis.sample_psi.rows();
  if (values.size() != n) {
    throw ConfigError("project_modes: values are not aligned with the sample set");
  }
  const std::size_t p1 = basis.indices.size();
  std::vector<double> modes(p1, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    auto psi = basis.sample_psi.row(s);
    const double g = values[s];
    for (std::size_t j = 0; j < p1; ++j) modes[j] += psi[j] * g;
  }
  for (double& m : modes) m /= static_cast<double>(n);
  return modes;
}

void write_basis_csv(const ApcBasis& basis, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  std::string line;
  line = "";
  for (int d = 0; d < basis.dims; ++d) line += "e_" + std::to_string(d) + ",";
  const std::size_t p1 = basis.indices.size();
  for (std::size_t j = 0; j < p1; ++j) {
    line += "w_" + std::to_string(j);
    if (j + 1 < p1) line += ",";
  }
  out << line << "\n";
  for (std::size_t j = 0; j < p1; ++j) {
    line.clear();
    for (int d = 0; d < basis.dims; ++d) {
      line += std::to_string(basis.indices[j].exponents[d]);
      line += ",";
    }
    for (std::size_t i = 0; i < p1; ++i) {
      format_double(line, i <= j ? basis.coeffs(j, i) : 0.0);
      if (i + 1 < p1) line += ",";
    }
    out << line << "\n";
  }
}

ApcBasis read_basis_csv(const std::string& path, int dims) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty basis csv: " + path);
  ApcBasis basis;
  basis.dims = dims;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(parse_row(line, 0));
  }
  const std::size_t p1 = rows.size();
  basis.coeffs = RowMat(p1, p1);
  int max_order = 0;
  for (std::size_t j = 0; j < p1; ++j) {
    if (rows[j].size() != static_cast<std::size_t>(dims) + p1) {
      throw DataError("bad basis csv row width in " + path);
    }
    MultiIndex idx;
    for (int d = 0; d < dims; ++d) {
      idx.exponents.push_back(static_cast<int>(rows[j][d]));
    }
    max_order = std::max(max_order, idx.total());
    basis.indices.push_back(std::move(idx));
    for (std::size_t i = 0; i < p1; ++i) basis.coeffs(j, i) = rows[j][dims + i];
  }
  basis.order = max_order;
  return basis;
}

void rebind_samples(ApcBasis& basis, const RowMat& xi_samples) {
  if (static_cast<int>(xi_samples.cols()) != basis.dims) {
    throw ConfigError("rebind_samples: dimension mismatch");
  }
  basis.xi_samples = xi_samples;
  const std::size_t n = xi_samples.rows();
  const std::size_t p1 = basis.indices.size();
  basis.sample_psi = RowMat(n, p1);
  std::vector<double> psi(p1);
  for (std::size_t s = 0; s < n; ++s) {
    evaluate_basis(basis, xi_samples.row(s), psi);
    std::copy(psi.begin(), psi.end(), basis.sample_psi.row(s).begin());
  }
}

void write_pca_csv(const PcaModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  const std::size_t d = model.mean.size();
  std::string line = "k0";
  for (std::size_t i = 0; i < d; ++i) {
    line += ",";
    format_double(line, model.mean[i]);
  }
  out << line << "\n";
  line = "lambda";
  for (std::size_t i = 0; i < d; ++i) {
    line += ",";
    format_double(line, model.eigenvalues[i]);
  }
  out << line << "\n";
  line = "retained," + std::to_string(model.retained);
  out << line << "\n";
  line = "threshold,";
  format_double(line, model.energy_threshold);
  out << line << "\n";
  for (std::size_t l = 0; l < d; ++l) {
    line = "phi_" + std::to_string(l);
    for (std::size_t i = 0; i < d; ++i) {
      line += ",";
      format_double(line, model.eigenvectors(i, l));
    }
    out << line << "\n";
  }
}

PcaModel read_pca_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  PcaModel model;
  std::string line;
  if (!std::getline(in, line)) throw DataError("truncated pca csv");
  model.mean = parse_row(line, 1);
  if (!std::getline(in, line)) throw DataError("truncated pca csv");
  model.eigenvalues = parse_row(line, 1);
  if (!std::getline(in, line)) throw DataError("truncated pca csv");
  {
    auto meta = parse_row(line, 1);
    if (meta.size() != 1) throw DataError("bad pca csv retained row");
    model.retained = static_cast<int>(meta[0]);
  }
  if (!std::getline(in, line)) throw DataError("truncated pca csv");
  {
    auto meta = parse_row(line, 1);
    if (meta.size() != 1) throw DataError("bad pca csv threshold row");
    model.energy_threshold = meta[0];
  }
  const std::size_t d = model.mean.size();
  model.eigenvectors = RowMat(d, d);
  for (std::size_t l = 0; l < d; ++l) {
    if (!std::getline(in, line)) throw DataError("truncated pca csv");
    auto col = parse_row(line, 1);
    if (col.size() != d) throw DataError("bad eigenvector row in pca csv");
    for (std::size_t i = 0; i < d; ++i) model.eigenvectors(i, l) = col[i];
  }
  return model;
}

}  // namespace apcnet::pc
