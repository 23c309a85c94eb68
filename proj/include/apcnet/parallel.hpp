#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace apcnet {

/// Fixed block size for deterministic reductions.  Results depend on the
/// blocking, never on the number of threads, so any thread count (including
/// the serial fallback) reproduces the same bits.
inline constexpr std::size_t kReduceBlock = 16;

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Runs fn(i) for i in [0, n) across threads.  fn must write only to
/// slots owned by index i.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    fn(static_cast<std::size_t>(i));
  }
}

/// Deterministic blocked reduction: items [0, n) are split into fixed-size
/// blocks; each block accumulates serially in index order into its own
/// partial (accumulate(partial, i)), blocks run in parallel, and partials
/// are combined serially in block order (combine(total, partial)).
///
/// Partial must be default-constructible; `total` is the first partial's
/// accumulator so Partial{} must be the identity for combine.
template <typename Partial, typename Accumulate, typename Combine>
Partial blocked_reduce(std::size_t n, Accumulate&& accumulate, Combine&& combine) {
  const std::size_t n_blocks = (n + kReduceBlock - 1) / kReduceBlock;
  std::vector<Partial> partials(n_blocks);
  parallel_for(n_blocks, [&](std::size_t b) {
    const std::size_t lo = b * kReduceBlock;
    const std::size_t hi = std::min(n, lo + kReduceBlock);
    for (std::size_t i = lo; i < hi; ++i) accumulate(partials[b], i);
  });
  Partial total{};
  for (std::size_t b = 0; b < n_blocks; ++b) combine(total, partials[b]);
  return total;
}

}  // namespace apcnet
