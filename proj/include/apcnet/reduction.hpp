#pragma once

#include <span>
#include <string>
#include <vector>

#include "apcnet/matrix.hpp"

namespace apcnet::pc {

/// PCA of sensor snapshots: per-sensor mean, eigenpairs of the sample
/// covariance (1/N normalization, matching the discrete measure used for the
/// polynomial basis), and the retained dimension M.
struct PcaModel {
  std::vector<double> mean;         ///< per-sensor mean k0
  std::vector<double> eigenvalues;  ///< all, nonincreasing, clamped at 0
  RowMat eigenvectors;              ///< N_k x N_k, columns are eigenvectors
  int retained = 0;                 ///< M
  double energy_threshold = 1.0;
};

/// Eigendecomposition of the sample covariance of the snapshot columns.
/// M is the smallest count whose eigenvalue sum reaches the energy threshold
/// (eigenvalues below 1e-12 * lambda_1 are treated as numerical rank noise
/// and never retained).  Eigenvector signs are fixed so the largest-magnitude
/// component is positive.
PcaModel fit_pca(const RowMat& snapshots, double energy_threshold);

/// Whitened coordinates xi = Lambda_M^{-1/2} Phi_M^T (snapshot - mean).
std::vector<double> extract_xi(const PcaModel& model, std::span<const double> snapshot);

/// Truncated reconstruction mean + Phi_M Lambda_M^{1/2} xi.
std::vector<double> kl_reconstruct(const PcaModel& model, std::span<const double> xi);

/// Whitens every snapshot row; returns N x M.
RowMat extract_xi_rows(const PcaModel& model, const RowMat& snapshots);

struct MultiIndex {
  std::vector<int> exponents;
  int total() const;
};

/// All multi-indices in M variables with total order <= r, in graded
/// lexicographic order: ascending total order, ties broken so that higher
/// leading exponents come first.  Index 0 is all zeros.
std::vector<MultiIndex> graded_lex_indices(int dims, int order);

/// Number of basis functions (r + M)! / (r! M!).
std::size_t basis_count(int dims, int order);

/// Polynomial basis orthonormal under the empirical measure of the stored
/// samples, built by modified Gram-Schmidt over graded-lex monomials with one
/// re-orthogonalization pass.  coeffs row j holds the recursion weights:
/// psi_j(xi) = (mono_j(xi) - sum_{i<j} coeffs(j,i) * psi_i(xi)) * coeffs(j,j),
/// with coeffs(j,j) = 1/norm_j.
struct ApcBasis {
  int dims = 0;
  int order = 0;
  std::vector<MultiIndex> indices;
  RowMat coeffs;       ///< (P+1) x (P+1), lower triangular as described above
  RowMat xi_samples;   ///< the N samples defining the measure
  RowMat sample_psi;   ///< N x (P+1), basis evaluated at the samples
};

ApcBasis build_apc_basis(const RowMat& xi_samples, int order);

/// Evaluates all P+1 basis polynomials at one xi (out.size() == P+1).
void evaluate_basis(const ApcBasis& basis, std::span<const double> xi,
                    std::span<double> out);

/// Discrete projection: g_alpha = (1/N) sum_s psi_alpha(xi_s) g_s.
/// `values` must align row-for-row with basis.xi_samples.
std::vector<double> project_modes(const ApcBasis& basis, std::span<const double> values);

/// One row per multi-index: exponents followed by the coefficient row.
void write_basis_csv(const ApcBasis& basis, const std::string& path);

/// Restores dims/order/indices/coeffs; the sample set must be rebound (via
/// rebind_samples) before projections are possible.
ApcBasis read_basis_csv(const std::string& path, int dims);

/// Attaches a sample set to a basis restored from disk, recomputing the
/// cached basis values at the samples.
void rebind_samples(ApcBasis& basis, const RowMat& xi_samples);

/// pca.csv: `k0`, `lambda`, then one `phi_<l>` row per eigenvector column.
void write_pca_csv(const PcaModel& model, const std::string& path);
PcaModel read_pca_csv(const std::string& path);

}  // namespace apcnet::pc
