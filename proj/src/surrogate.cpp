#include "apcnet/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "apcnet/parallel.hpp"
#include "apcnet/rng.hpp"

namespace apcnet::model {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

double deterministic_forcing(const ProblemSpec& problem, double x) {
  switch (problem.kind) {
    case ProblemKind::kDeterministicPoisson:
      return 9.0 * kPi * kPi * std::sin(1.5 * kPi * x) / 4.0;
    case ProblemKind::kInverseElliptic:
    case ProblemKind::kDeterministicElliptic:
      return problem.constant_forcing;
    case ProblemKind::kForwardPoisson:
      throw ConfigError("forward problem forcing is stochastic, not a formula");
  }
  throw ConfigError("unknown problem kind");
}

double deterministic_elliptic_k(double x) {
  return std::exp(std::sin(1.5 * kPi * x) / 5.0);
}

std::size_t TrainingSet::snapshot_count() const {
  if (!k_snapshots.empty()) return k_snapshots.rows();
  return u_snapshots.rows();
}

std::size_t SurrogateModel::u_output_count() const {
  std::size_t n = 0;
  for (const auto& net : u_group_nets) n += net.spec().output_dim;
  return n;
}

std::size_t SurrogateModel::param_count() const {
  std::size_t n = 0;
  if (k_mean_net) n += k_mean_net->param_count();
  if (k_modes_net) n += k_modes_net->param_count();
  for (const auto& net : u_group_nets) n += net.param_count();
  return n;
}

std::vector<std::size_t> SurrogateModel::param_offsets() const {
  std::vector<std::size_t> off;
  std::size_t n = 0;
  if (k_mean_net) {
    off.push_back(n);
    n += k_mean_net->param_count();
  }
  if (k_modes_net) {
    off.push_back(n);
    n += k_modes_net->param_count();
  }
  for (const auto& net : u_group_nets) {
    off.push_back(n);
    n += net.param_count();
  }
  return off;
}

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw ConfigError(msg);
}

std::vector<int> order_group_counts(const std::vector<pc::MultiIndex>& indices) {
  std::vector<int> counts;
  for (const auto& idx : indices) {
    const int total = idx.total();
    if (static_cast<int>(counts.size()) <= total) counts.resize(total + 1, 0);
    counts[total] += 1;
  }
  return counts;
}

void validate_training_set(const ProblemSpec& problem, const TrainingSet& data) {
  const bool det = problem.kind == ProblemKind::kDeterministicPoisson ||
                   problem.kind == ProblemKind::kDeterministicElliptic;
  if (det) {
    require(data.snapshot_count() == 1,
            "deterministic problems take exactly one snapshot row");
  }
  switch (problem.kind) {
    case ProblemKind::kForwardPoisson: {
      require(!data.k_sensor_xs.empty(), "forward problem needs field sensors");
      require(!data.u_sensor_xs.empty(), "forward problem needs boundary u sensors");
      require(data.collocation_xs.size() == data.k_sensor_xs.size(),
              "forward collocation sites must coincide with the field sensors");
      for (std::size_t i = 0; i < data.collocation_xs.size(); ++i) {
        require(std::abs(data.collocation_xs[i] - data.k_sensor_xs[i]) < 1e-12,
                "forward collocation sites must coincide with the field sensors");
      }
      break;
    }
    case ProblemKind::kInverseElliptic:
    case ProblemKind::kDeterministicElliptic:
      require(!data.k_sensor_xs.empty(), "elliptic problem needs k sensors");
      require(!data.u_sensor_xs.empty(), "elliptic problem needs u sensors");
      require(!data.collocation_xs.empty(), "elliptic problem needs collocation sites");
      break;
    case ProblemKind::kDeterministicPoisson:
      require(data.k_sensor_xs.empty(),
              "deterministic Poisson has no coefficient sensors");
      require(!data.u_sensor_xs.empty(), "Poisson problem needs u data");
      require(!data.collocation_xs.empty(), "Poisson problem needs collocation sites");
      break;
  }
  if (!data.k_weights.empty()) {
    require(data.k_weights.size() == data.k_sensor_xs.size(),
            "sensor weights must align with sensor positions");
    for (int w : data.k_weights) require(w >= 1, "sensor weights must be positive");
  }
  require(data.k_snapshots.cols() == data.k_sensor_xs.size() ||
              (data.k_sensor_xs.empty() && data.k_snapshots.empty()),
          "k snapshot width must match the sensor count");
  require(data.u_snapshots.cols() == data.u_sensor_xs.size(),
          "u snapshot width must match the sensor count");
  if (!data.k_snapshots.empty() && !data.u_snapshots.empty()) {
    require(data.k_snapshots.rows() == data.u_snapshots.rows(),
            "snapshot groups must have the same number of rows");
  }
}

}  // namespace

SurrogateModel build_surrogate(const ProblemSpec& problem, const TrainingSet& data,
                               const NetShapes& shapes, int apc_order,
                               double energy_threshold, std::uint64_t seed) {
  validate_training_set(problem, data);
  SurrogateModel model;
  model.problem = problem;
  model.apc_order = apc_order;

  auto init = [&](const nn::MlpSpec& base, int out_dim, std::uint64_t slot) {
    nn::MlpSpec spec = base;
    spec.output_dim = out_dim;
    return nn::init_mlp(spec, derive_seed(seed, {stream::kNetInit, slot}));
  };

  if (model.stochastic()) {
    model.pca = pc::fit_pca(data.k_snapshots, energy_threshold);
    RowMat xi = pc::extract_xi_rows(model.pca, data.k_snapshots);
    model.basis = pc::build_apc_basis(xi, apc_order);
    const int m = model.pca.retained;
    if (problem.kind == ProblemKind::kInverseElliptic) {
      model.k_mean_net = init(shapes.k_mean, 1, 0);
      model.k_modes_net = init(shapes.k_modes, m, 1);
    }
    const auto counts = order_group_counts(model.basis.indices);
    for (std::size_t g = 0; g < counts.size(); ++g) {
      model.u_group_nets.push_back(
          init(g == 0 ? shapes.u_mean : shapes.u_modes, counts[g], 10 + g));
    }
  } else {
    model.apc_order = 0;
    if (problem.kind == ProblemKind::kDeterministicElliptic) {
      model.k_mean_net = init(shapes.k_mean, 1, 0);
    }
    model.u_group_nets.push_back(init(shapes.u_mean, 1, 10));
  }
  return model;
}

ad::DualValue kl_combine(const ad::DualValue& mean,
                         std::span<const ad::DualValue> modes,
                         std::span<const double> sqrt_lambda,
                         std::span<const double> xi) {
  if (modes.size() != sqrt_lambda.size() || modes.size() != xi.size()) {
    throw ConfigError("kl_combine: mode/eigenvalue/xi size mismatch");
  }
  ad::DualValue out = mean;
  for (std::size_t l = 0; l < modes.size(); ++l) {
    const double c = sqrt_lambda[l] * xi[l];
    out.value += c * modes[l].value;
    out.d_dx += c * modes[l].d_dx;
    out.d2_dx2 += c * modes[l].d2_dx2;
  }
  return out;
}

ad::DualValue apc_combine(std::span<const ad::DualValue> modes,
                          std::span<const double> psi) {
  if (modes.size() != psi.size()) {
    throw ConfigError("apc_combine: mode/basis size mismatch");
  }
  ad::DualValue out;
  for (std::size_t a = 0; a < modes.size(); ++a) {
    out.value += modes[a].value * psi[a];
    out.d_dx += modes[a].d_dx * psi[a];
    out.d2_dx2 += modes[a].d2_dx2 * psi[a];
  }
  return out;
}

namespace {

std::vector<ad::DualValue> eval_net(const nn::Mlp& net, double x) {
  return nn::forward(net, x, nullptr);
}

std::vector<double> sqrt_eigenvalues(const pc::PcaModel& pca) {
  std::vector<double> out(pca.retained);
  for (int l = 0; l < pca.retained; ++l) out[l] = std::sqrt(pca.eigenvalues[l]);
  return out;
}

}  // namespace

ad::DualValue reconstruct_k(const SurrogateModel& model, double x,
                            std::span<const double> xi) {
  if (!model.k_mean_net) throw ConfigError("model has no k networks");
  const auto mean = eval_net(*model.k_mean_net, x)[0];
  if (!model.k_modes_net || model.pca.retained == 0) return mean;
  const auto modes = eval_net(*model.k_modes_net, x);
  return kl_combine(mean, modes, sqrt_eigenvalues(model.pca), xi);
}

ad::DualValue reconstruct_u(const SurrogateModel& model, double x,
                            std::span<const double> xi,
                            std::span<const double> psi) {
  std::vector<double> psi_local;
  if (model.stochastic() && psi.empty()) {
    psi_local.resize(model.basis.indices.size());
    pc::evaluate_basis(model.basis, xi, psi_local);
    psi = psi_local;
  }
  std::vector<ad::DualValue> modes;
  for (const auto& net : model.u_group_nets) {
    auto outs = eval_net(net, x);
    modes.insert(modes.end(), outs.begin(), outs.end());
  }
  if (!model.stochastic()) return modes.at(0);
  return apc_combine(modes, psi);
}

double residual(const SurrogateModel& model, double x, const SnapshotContext& ctx) {
  switch (model.problem.kind) {
    case ProblemKind::kForwardPoisson:
    case ProblemKind::kDeterministicPoisson: {
      const auto u = reconstruct_u(model, x, ctx.xi, ctx.psi);
      return poisson_residual(u, ctx.f_value);
    }
    case ProblemKind::kInverseElliptic:
    case ProblemKind::kDeterministicElliptic: {
      const auto u = reconstruct_u(model, x, ctx.xi, ctx.psi);
      const auto k = reconstruct_k(model, x, ctx.xi);
      return elliptic_residual(k, u, ctx.f_value);
    }
  }
  throw ConfigError("unknown problem kind");
}

EpochMasks draw_epoch_masks(const SurrogateModel& model, std::uint64_t seed) {
  EpochMasks masks;
  std::uint64_t slot = 0;
  auto draw = [&](const nn::Mlp& net) {
    const std::uint64_t s = derive_seed(seed, {stream::kDropoutEpoch, slot++});
    if (net.spec().dropout_p <= 0.0) return nn::DropoutMask{};
    return nn::draw_dropout_mask(net.spec(), s);
  };
  if (model.k_mean_net) masks.k_mean = draw(*model.k_mean_net);
  if (model.k_modes_net) masks.k_modes = draw(*model.k_modes_net);
  for (const auto& net : model.u_group_nets) masks.u_groups.push_back(draw(net));
  return masks;
}

// ===========================================================================
// Loss evaluator
// ===========================================================================

struct LossEvaluator::Impl {
  SurrogateModel* model = nullptr;
  const TrainingSet* data = nullptr;
  LossEngine engine = LossEngine::kKernel;

  // Shared tables.
  RowMat xi;        // N x M
  RowMat psi;       // N x (P+1)
  RowMat f_colloc;  // (N or 1) x N_f: forcing value at each collocation site
  bool stochastic_f = false;
  std::vector<double> sqrt_lambda;
  std::vector<int> k_weights;
  std::size_t n_snapshots = 0;
  double norm_k = 0.0, norm_u = 0.0, norm_f = 0.0;

  // One evaluated network on its site list.
  struct Slot {
    nn::Mlp* net = nullptr;
    const nn::DropoutMask* mask = nullptr;
    std::size_t param_offset = 0;
    int n_out = 0;
    bool on_k_sites = false;  // otherwise u sites
    std::size_t seed_offset = 0;  // into the flat per-block seed buffer
    std::vector<double> values;   // sites * n_out * 3
    std::vector<double> seeds;    // same shape
    std::vector<nn::MlpWorkspace> ws;  // per site
    RowMat site_grads;                 // sites x param_count
  };
  std::vector<Slot> slots;
  int k_mean_slot = -1, k_modes_slot = -1, first_u_slot = -1;
  std::vector<std::size_t> u_group_offsets;  // alpha offset per u group

  std::vector<double> k_sites, u_sites;  // site x lists (sensors then colloc)
  std::size_t n_k_sensors = 0, n_u_sensors = 0, n_colloc = 0;

  // Deterministic blocked reduction storage.
  std::size_t seed_len = 0;
  std::size_t n_blocks = 0;
  RowMat block_seeds;   // n_blocks x seed_len
  RowMat block_losses;  // n_blocks x 3 (k, u, f raw sums)

  // Reference engine.
  ad::Graph ref_graph;
  ad::Graph::NodeId ref_mse_k = 0, ref_mse_u = 0, ref_mse_f = 0, ref_l2 = 0;
  std::vector<std::size_t> ref_aux_offsets;  // mask slot bases per network slot
  std::size_t ref_aux_count = 0;
  ad::Workspace ref_ws;

  void build(SurrogateModel& m, const TrainingSet& d, LossEngine eng);
  void build_reference_graph();
  LossBreakdown kernel_eval(const EpochMasks& masks, std::span<double> grad,
                            bool with_grad);
  LossBreakdown reference_eval(const EpochMasks& masks, std::span<double> grad,
                               bool with_grad);
  void bind_masks(const EpochMasks& masks);
  std::size_t value_index(const Slot& s, std::size_t site, int out, int comp) const {
    return (site * static_cast<std::size_t>(s.n_out) + out) * 3 + comp;
  }
};

void LossEvaluator::Impl::build(SurrogateModel& m, const TrainingSet& d,
                                LossEngine eng) {
  model = &m;
  data = &d;
  engine = eng;
  validate_training_set(m.problem, d);

  n_snapshots = d.snapshot_count();
  n_k_sensors = d.k_sensor_xs.size();
  n_u_sensors = d.u_sensor_xs.size();
  n_colloc = d.collocation_xs.size();

  k_weights = d.k_weights;
  if (k_weights.empty()) k_weights.assign(n_k_sensors, 1);
  std::size_t weight_total = 0;
  for (int w : k_weights) weight_total += static_cast<std::size_t>(w);

  // Snapshot tables.
  if (m.stochastic()) {
    xi = pc::extract_xi_rows(m.pca, d.k_snapshots);
    psi = RowMat(n_snapshots, m.basis.indices.size());
    std::vector<double> row(m.basis.indices.size());
    for (std::size_t s = 0; s < n_snapshots; ++s) {
      pc::evaluate_basis(m.basis, xi.row(s), row);
      std::copy(row.begin(), row.end(), psi.row(s).begin());
    }
    sqrt_lambda = sqrt_eigenvalues(m.pca);
  } else {
    xi = RowMat(n_snapshots, 0);
    psi = RowMat(n_snapshots, 1, 1.0);
  }

  // Forcing at collocation sites.
  if (m.problem.kind == ProblemKind::kForwardPoisson) {
    stochastic_f = true;
    f_colloc = RowMat(n_snapshots, n_colloc);
    for (std::size_t s = 0; s < n_snapshots; ++s) {
      auto recon = pc::kl_reconstruct(m.pca, xi.row(s));
      for (std::size_t j = 0; j < n_colloc; ++j) f_colloc(s, j) = recon[j];
    }
  } else {
    stochastic_f = false;
    f_colloc = RowMat(1, n_colloc);
    for (std::size_t j = 0; j < n_colloc; ++j) {
      f_colloc(0, j) = deterministic_forcing(m.problem, d.collocation_xs[j]);
    }
  }

  norm_k = weight_total == 0
               ? 0.0
               : 1.0 / (static_cast<double>(n_snapshots) * static_cast<double>(weight_total));
  norm_u = 1.0 / (static_cast<double>(n_snapshots) * static_cast<double>(n_u_sensors));
  norm_f = 1.0 / (static_cast<double>(n_snapshots) * static_cast<double>(n_colloc));

  // Site lists.
  const bool needs_k_nets = m.has_k_nets();
  k_sites = d.k_sensor_xs;
  if (needs_k_nets) {
    k_sites.insert(k_sites.end(), d.collocation_xs.begin(), d.collocation_xs.end());
  }
  u_sites = d.u_sensor_xs;
  u_sites.insert(u_sites.end(), d.collocation_xs.begin(), d.collocation_xs.end());

  // Slots in the concatenated parameter order.
  auto offsets = m.param_offsets();
  std::size_t slot_index = 0;
  std::size_t seed_cursor = 0;
  auto add_slot = [&](nn::Mlp& net, bool on_k) {
    Slot s;
    s.net = &net;
    s.param_offset = offsets[slot_index++];
    s.n_out = net.spec().output_dim;
    s.on_k_sites = on_k;
    const std::size_t sites = on_k ? k_sites.size() : u_sites.size();
    s.seed_offset = seed_cursor;
    const std::size_t len = sites * static_cast<std::size_t>(s.n_out) * 3;
    seed_cursor += len;
    s.values.assign(len, 0.0);
    s.seeds.assign(len, 0.0);
    s.ws.resize(sites);
    s.site_grads = RowMat(sites, net.param_count());
    slots.push_back(std::move(s));
  };
  if (m.k_mean_net) {
    k_mean_slot = static_cast<int>(slots.size());
    add_slot(*m.k_mean_net, true);
  }
  if (m.k_modes_net) {
    k_modes_slot = static_cast<int>(slots.size());
    add_slot(*m.k_modes_net, true);
  }
  first_u_slot = static_cast<int>(slots.size());
  std::size_t alpha = 0;
  for (auto& net : m.u_group_nets) {
    u_group_offsets.push_back(alpha);
    alpha += static_cast<std::size_t>(net.spec().output_dim);
    add_slot(net, false);
  }
  seed_len = seed_cursor;

  n_blocks = (n_snapshots + kReduceBlock - 1) / kReduceBlock;
  block_seeds = RowMat(n_blocks, seed_len);
  block_losses = RowMat(n_blocks, 3);

  if (engine == LossEngine::kReference) build_reference_graph();
}

void LossEvaluator::Impl::bind_masks(const EpochMasks& masks) {
  if (k_mean_slot >= 0) slots[k_mean_slot].mask = &masks.k_mean;
  if (k_modes_slot >= 0) slots[k_modes_slot].mask = &masks.k_modes;
  for (std::size_t g = 0; g < model->u_group_nets.size(); ++g) {
    slots[first_u_slot + g].mask =
        g < masks.u_groups.size() ? &masks.u_groups[g] : nullptr;
  }
}

LossBreakdown LossEvaluator::Impl::kernel_eval(const EpochMasks& masks,
                                               std::span<double> grad,
                                               bool with_grad) {
  bind_masks(masks);
  const std::size_t n = n_snapshots;
  const int m_dim = static_cast<int>(xi.cols());

  // Stage A: evaluate every network at its sites, keeping activations for
  // the reverse sweep.
  for (auto& slot : slots) {
    const auto& sites = slot.on_k_sites ? k_sites : u_sites;
    parallel_for(sites.size(), [&](std::size_t site) {
      nn::forward_triple(*slot.net, sites[site], slot.mask, slot.ws[site]);
      std::copy(slot.ws[site].out.begin(), slot.ws[site].out.end(),
                slot.values.begin() + value_index(slot, site, 0, 0));
    });
  }

  // Stage B: accumulate data mismatch and residual terms over snapshots with
  // a deterministic blocked reduction.
  const double* kmean_vals = k_mean_slot >= 0 ? slots[k_mean_slot].values.data() : nullptr;
  const double* kmodes_vals = k_modes_slot >= 0 ? slots[k_modes_slot].values.data() : nullptr;
  const int kind_poisson = model->problem.kind == ProblemKind::kForwardPoisson ||
                           model->problem.kind == ProblemKind::kDeterministicPoisson;

  parallel_for(n_blocks, [&](std::size_t b) {
    auto seeds = block_seeds.row(b);
    std::fill(seeds.begin(), seeds.end(), 0.0);
    double acc_k = 0.0, acc_u = 0.0, acc_f = 0.0;
    const std::size_t lo = b * kReduceBlock;
    const std::size_t hi = std::min(n, lo + kReduceBlock);

    for (std::size_t s = lo; s < hi; ++s) {
      const double* xs = m_dim > 0 ? &xi(s, 0) : nullptr;
      const double* ps = &psi(s, 0);

      // MSE_k over weighted sensors.
      if (k_mean_slot >= 0 && n_k_sensors > 0) {
        for (std::size_t i = 0; i < n_k_sensors; ++i) {
          const std::size_t base = (i * slots[k_mean_slot].n_out) * 3;
          double ktil = kmean_vals[base + 0];
          if (kmodes_vals) {
            const std::size_t mb = (i * static_cast<std::size_t>(m_dim)) * 3;
            for (int l = 0; l < m_dim; ++l) {
              ktil += sqrt_lambda[l] * xs[l] * kmodes_vals[mb + 3 * l + 0];
            }
          }
          const double e = ktil - (*data).k_snapshots(s, i);
          const int w = k_weights[i];
          for (int rep = 0; rep < w; ++rep) acc_k += e * e;
          const double c = 2.0 * e * w * norm_k;
          seeds[slots[k_mean_slot].seed_offset + base + 0] += c;
          if (kmodes_vals) {
            const std::size_t mb = (i * static_cast<std::size_t>(m_dim)) * 3;
            for (int l = 0; l < m_dim; ++l) {
              seeds[slots[k_modes_slot].seed_offset + mb + 3 * l + 0] +=
                  c * sqrt_lambda[l] * xs[l];
            }
          }
        }
      }

      // MSE_u over u sensors.
      for (std::size_t i = 0; i < n_u_sensors; ++i) {
        double util = 0.0;
        for (std::size_t g = 0; g < u_group_offsets.size(); ++g) {
          const auto& slot = slots[first_u_slot + g];
          const std::size_t base = (i * slot.n_out) * 3;
          for (int o = 0; o < slot.n_out; ++o) {
            util += slot.values[base + 3 * o + 0] * ps[u_group_offsets[g] + o];
          }
        }
        const double e = util - (*data).u_snapshots(s, i);
        acc_u += e * e;
        const double c = 2.0 * e * norm_u;
        for (std::size_t g = 0; g < u_group_offsets.size(); ++g) {
          const auto& slot = slots[first_u_slot + g];
          const std::size_t base = (i * slot.n_out) * 3;
          for (int o = 0; o < slot.n_out; ++o) {
            seeds[slot.seed_offset + base + 3 * o + 0] += c * ps[u_group_offsets[g] + o];
          }
        }
      }

      // MSE_f over collocation sites.
      const double* frow = stochastic_f ? &f_colloc(s, 0) : &f_colloc(0, 0);
      for (std::size_t j = 0; j < n_colloc; ++j) {
        const std::size_t usite = n_u_sensors + j;
        // Assemble u' and u'' at the site.
        double ux = 0.0, uxx = 0.0;
        for (std::size_t g = 0; g < u_group_offsets.size(); ++g) {
          const auto& slot = slots[first_u_slot + g];
          const std::size_t base = (usite * slot.n_out) * 3;
          for (int o = 0; o < slot.n_out; ++o) {
            const double p = ps[u_group_offsets[g] + o];
            ux += slot.values[base + 3 * o + 1] * p;
            uxx += slot.values[base + 3 * o + 2] * p;
          }
        }
        double r, ktil = 0.0, ktilx = 0.0;
        if (kind_poisson) {
          r = -uxx - frow[j];
        } else {
          const std::size_t ksite = n_k_sensors + j;
          const std::size_t base = (ksite * slots[k_mean_slot].n_out) * 3;
          ktil = kmean_vals[base + 0];
          ktilx = kmean_vals[base + 1];
          if (kmodes_vals) {
            const std::size_t mb = (ksite * static_cast<std::size_t>(m_dim)) * 3;
            for (int l = 0; l < m_dim; ++l) {
              const double c = sqrt_lambda[l] * xs[l];
              ktil += c * kmodes_vals[mb + 3 * l + 0];
              ktilx += c * kmodes_vals[mb + 3 * l + 1];
            }
          }
          r = -ktilx * ux - ktil * uxx - frow[j];
        }
        acc_f += r * r;
        const double c = 2.0 * r * norm_f;
        if (!kind_poisson) {
          const std::size_t ksite = n_k_sensors + j;
          const std::size_t base = (ksite * slots[k_mean_slot].n_out) * 3;
          seeds[slots[k_mean_slot].seed_offset + base + 0] += c * (-uxx);
          seeds[slots[k_mean_slot].seed_offset + base + 1] += c * (-ux);
          if (kmodes_vals) {
            const std::size_t mb = (ksite * static_cast<std::size_t>(m_dim)) * 3;
            for (int l = 0; l < m_dim; ++l) {
              const double cl = c * sqrt_lambda[l] * xs[l];
              seeds[slots[k_modes_slot].seed_offset + mb + 3 * l + 0] += cl * (-uxx);
              seeds[slots[k_modes_slot].seed_offset + mb + 3 * l + 1] += cl * (-ux);
            }
          }
        }
        for (std::size_t g = 0; g < u_group_offsets.size(); ++g) {
          const auto& slot = slots[first_u_slot + g];
          const std::size_t base = (usite * slot.n_out) * 3;
          for (int o = 0; o < slot.n_out; ++o) {
            const double p = ps[u_group_offsets[g] + o];
            if (!kind_poisson) {
              seeds[slot.seed_offset + base + 3 * o + 1] += c * (-ktilx) * p;
              seeds[slot.seed_offset + base + 3 * o + 2] += c * (-ktil) * p;
            } else {
              seeds[slot.seed_offset + base + 3 * o + 2] += c * (-1.0) * p;
            }
          }
        }
      }
    }
    block_losses(b, 0) = acc_k;
    block_losses(b, 1) = acc_u;
    block_losses(b, 2) = acc_f;
  });

  // Combine blocks in index order.
  double acc_k = 0.0, acc_u = 0.0, acc_f = 0.0;
  for (auto& slot : slots) std::fill(slot.seeds.begin(), slot.seeds.end(), 0.0);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    acc_k += block_losses(b, 0);
    acc_u += block_losses(b, 1);
    acc_f += block_losses(b, 2);
    auto row = block_seeds.row(b);
    for (auto& slot : slots) {
      for (std::size_t i = 0; i < slot.seeds.size(); ++i) {
        slot.seeds[i] += row[slot.seed_offset + i];
      }
    }
  }

  LossBreakdown out;
  out.mse_k = acc_k * norm_k;
  out.mse_u = acc_u * norm_u;
  out.mse_f = acc_f * norm_f;

  // Stage C: reverse through every network from the accumulated seeds.
  if (with_grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (auto& slot : slots) {
      const auto& sites = slot.on_k_sites ? k_sites : u_sites;
      parallel_for(sites.size(), [&](std::size_t site) {
        auto row = slot.site_grads.row(site);
        std::fill(row.begin(), row.end(), 0.0);
        const std::size_t base = value_index(slot, site, 0, 0);
        nn::reverse_triple(
            *slot.net, slot.mask,
            std::span<const double>(slot.seeds.data() + base,
                                    static_cast<std::size_t>(slot.n_out) * 3),
            slot.ws[site], row);
      });
      auto dst = grad.subspan(slot.param_offset, slot.net->param_count());
      for (std::size_t site = 0; site < sites.size(); ++site) {
        auto row = slot.site_grads.row(site);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += row[i];
      }
    }
  }

  // L2 penalty over every participating network.
  for (auto& slot : slots) {
    const double lambda = slot.net->spec().l2_lambda;
    double acc = 0.0;
    const auto& p = slot.net->params();
    for (double t : p) acc += t * t;
    out.l2 += lambda * acc;
    if (with_grad && lambda != 0.0) {
      auto dst = grad.subspan(slot.param_offset, p.size());
      for (std::size_t i = 0; i < p.size(); ++i) dst[i] += 2.0 * lambda * p[i];
    }
  }

  out.total = out.mse_u + out.mse_k + out.mse_f + out.l2;
  return out;
}

// ---------------------------------------------------------------------------
// Reference engine: the whole composite loss as a single autodiff graph.
// Slow and memory-hungry but structurally independent of the staged kernels;
// used to cross-check them on small configurations.

void LossEvaluator::Impl::build_reference_graph() {
  ad::Graph& g = ref_graph;
  const std::size_t n = n_snapshots;
  const std::size_t p1 = psi.cols();
  const int m_dim = static_cast<int>(xi.cols());

  // Parameter/aux bases per slot.
  std::vector<std::size_t> param_bases;
  ref_aux_offsets.clear();
  std::size_t aux_cursor = 0;
  for (auto& slot : slots) {
    param_bases.push_back(slot.param_offset);
    ref_aux_offsets.push_back(aux_cursor);
    aux_cursor += static_cast<std::size_t>(slot.net->spec().hidden_layers) *
                  slot.net->spec().width;
  }
  ref_aux_count = aux_cursor;

  auto mlp_outputs = [&](const nn::Mlp& net, std::size_t param_base,
                         std::size_t aux_base, ad::Graph::NodeId x_node) {
    std::vector<ad::Graph::NodeId> h = {x_node};
    for (int l = 0; l < net.layer_count(); ++l) {
      std::vector<ad::Graph::NodeId> next;
      const bool hidden = l < net.spec().hidden_layers;
      for (int j = 0; j < net.fan_out(l); ++j) {
        auto acc = g.param(static_cast<std::uint32_t>(param_base + net.bias_offset(l) + j));
        for (int i = 0; i < net.fan_in(l); ++i) {
          auto w = g.param(static_cast<std::uint32_t>(
              param_base + net.weight_offset(l) +
              static_cast<std::size_t>(j) * net.fan_in(l) + i));
          acc = g.add(acc, g.mul(w, h[i]));
        }
        if (hidden) {
          auto t = g.tanh(acc);
          auto mask = g.aux(static_cast<std::uint32_t>(
              aux_base + static_cast<std::size_t>(l) * net.spec().width + j));
          next.push_back(g.mul(t, mask));
        } else {
          next.push_back(acc);
        }
      }
      h = std::move(next);
    }
    return h;
  };

  // Network outputs per site.
  std::vector<std::vector<std::vector<ad::Graph::NodeId>>> slot_outs(slots.size());
  for (std::size_t si = 0; si < slots.size(); ++si) {
    const auto& sites = slots[si].on_k_sites ? k_sites : u_sites;
    slot_outs[si].resize(sites.size());
    for (std::size_t site = 0; site < sites.size(); ++site) {
      auto x_node = g.input_const(sites[site]);
      slot_outs[si][site] =
          mlp_outputs(*slots[si].net, param_bases[si], ref_aux_offsets[si], x_node);
    }
  }

  auto u_value_node = [&](std::size_t site, std::span<const double> ps) {
    ad::Graph::NodeId acc = 0;
    bool first = true;
    for (std::size_t gi = 0; gi < u_group_offsets.size(); ++gi) {
      const auto& outs = slot_outs[first_u_slot + gi][site];
      for (std::size_t o = 0; o < outs.size(); ++o) {
        auto term = g.mul(g.constant(ps[u_group_offsets[gi] + o]), outs[o]);
        acc = first ? term : g.add(acc, term);
        first = false;
      }
    }
    return acc;
  };
  auto k_value_node = [&](std::size_t site, const double* xs) {
    ad::Graph::NodeId acc = slot_outs[k_mean_slot][site][0];
    if (k_modes_slot >= 0) {
      const auto& outs = slot_outs[k_modes_slot][site];
      for (int l = 0; l < m_dim; ++l) {
        acc = g.add(acc, g.mul(g.constant(sqrt_lambda[l] * xs[l]), outs[l]));
      }
    }
    return acc;
  };

  const bool kind_poisson = model->problem.kind == ProblemKind::kForwardPoisson ||
                            model->problem.kind == ProblemKind::kDeterministicPoisson;

  ad::Graph::NodeId acc_k = g.constant(0.0);
  ad::Graph::NodeId acc_u = g.constant(0.0);
  ad::Graph::NodeId acc_f = g.constant(0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = m_dim > 0 ? &xi(s, 0) : nullptr;
    const double* ps = &psi(s, 0);
    if (k_mean_slot >= 0 && n_k_sensors > 0) {
      for (std::size_t i = 0; i < n_k_sensors; ++i) {
        auto e = g.sub(k_value_node(i, xs), g.constant((*data).k_snapshots(s, i)));
        auto sq = g.mul(e, e);
        for (int rep = 0; rep < k_weights[i]; ++rep) acc_k = g.add(acc_k, sq);
      }
    }
    for (std::size_t i = 0; i < n_u_sensors; ++i) {
      auto e = g.sub(u_value_node(i, {ps, p1}), g.constant((*data).u_snapshots(s, i)));
      acc_u = g.add(acc_u, g.mul(e, e));
    }
    const double* frow = stochastic_f ? &f_colloc(s, 0) : &f_colloc(0, 0);
    for (std::size_t j = 0; j < n_colloc; ++j) {
      auto u_node = u_value_node(n_u_sensors + j, {ps, p1});
      ad::Graph::NodeId r;
      if (kind_poisson) {
        r = g.sub(g.neg(g.dxx(u_node)), g.constant(frow[j]));
      } else {
        auto k_node = k_value_node(n_k_sensors + j, xs);
        auto t1 = g.mul(g.dx(k_node), g.dx(u_node));
        auto t2 = g.mul(k_node, g.dxx(u_node));
        r = g.sub(g.neg(g.add(t1, t2)), g.constant(frow[j]));
      }
      acc_f = g.add(acc_f, g.mul(r, r));
    }
  }

  ref_mse_k = g.mul(g.constant(norm_k), acc_k);
  ref_mse_u = g.mul(g.constant(norm_u), acc_u);
  ref_mse_f = g.mul(g.constant(norm_f), acc_f);

  ad::Graph::NodeId l2 = g.constant(0.0);
  for (std::size_t si = 0; si < slots.size(); ++si) {
    const double lambda = slots[si].net->spec().l2_lambda;
    if (lambda == 0.0) continue;
    ad::Graph::NodeId acc = g.constant(0.0);
    for (std::size_t i = 0; i < slots[si].net->param_count(); ++i) {
      acc = g.add(acc, g.pow_int(g.param(static_cast<std::uint32_t>(param_bases[si] + i)), 2));
    }
    l2 = g.add(l2, g.mul(g.constant(lambda), acc));
  }
  ref_l2 = l2;

  auto total = g.add(g.add(g.add(ref_mse_u, ref_mse_k), ref_mse_f), ref_l2);
  g.mark_output(total);
}

LossBreakdown LossEvaluator::Impl::reference_eval(const EpochMasks& masks,
                                                  std::span<double> grad,
                                                  bool with_grad) {
  // Concatenated parameters and mask bindings.
  std::vector<double> params(model->param_count());
  for (auto& slot : slots) {
    std::copy(slot.net->params().begin(), slot.net->params().end(),
              params.begin() + slot.param_offset);
  }
  std::vector<double> aux(ref_aux_count, 1.0);
  bind_masks(masks);
  for (std::size_t si = 0; si < slots.size(); ++si) {
    const auto* mask = slots[si].mask;
    if (mask && !mask->scales.empty()) {
      std::copy(mask->scales.begin(), mask->scales.end(),
                aux.begin() + ref_aux_offsets[si]);
    }
  }

  ref_ws.forward(ref_graph, params, aux, 0.0, false, 0);
  if (with_grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    ref_ws.reverse_into(ref_graph, grad);
  }
  LossBreakdown out;
  out.mse_k = ref_ws.node_value(ref_mse_k);
  out.mse_u = ref_ws.node_value(ref_mse_u);
  out.mse_f = ref_ws.node_value(ref_mse_f);
  out.l2 = ref_ws.node_value(ref_l2);
  out.total = ref_ws.output_value(ref_graph, 0);
  return out;
}

LossEvaluator::LossEvaluator(SurrogateModel& model, const TrainingSet& data,
                             LossEngine engine)
    : impl_(std::make_unique<Impl>()) {
  impl_->build(model, data, engine);
}

LossEvaluator::~LossEvaluator() = default;

LossBreakdown LossEvaluator::value(const EpochMasks& masks) {
  std::vector<double> unused;
  return impl_->engine == LossEngine::kKernel
             ? impl_->kernel_eval(masks, unused, false)
             : impl_->reference_eval(masks, unused, false);
}

LossBreakdown LossEvaluator::value_and_gradient(const EpochMasks& masks,
                                                std::span<double> grad) {
  if (grad.size() != impl_->model->param_count()) {
    throw ConfigError("value_and_gradient: gradient buffer size mismatch");
  }
  return impl_->engine == LossEngine::kKernel
             ? impl_->kernel_eval(masks, grad, true)
             : impl_->reference_eval(masks, grad, true);
}

std::size_t LossEvaluator::param_count() const { return impl_->model->param_count(); }
const SurrogateModel& LossEvaluator::model() const { return *impl_->model; }

LossBreakdown composite_loss(SurrogateModel& model, const TrainingSet& data,
                             LossEngine engine) {
  LossEvaluator eval(model, data, engine);
  return eval.value(EpochMasks{});
}

TrainResult train(SurrogateModel& model, const TrainingSet& data,
                  const TrainSchedule& schedule, LossEngine engine) {
  LossEvaluator eval(model, data, engine);
  const long epochs = std::lround(static_cast<double>(schedule.epochs) *
                                  schedule.epoch_scale);
  TrainResult result;

  std::vector<nn::Mlp*> nets;
  if (model.k_mean_net) nets.push_back(&*model.k_mean_net);
  if (model.k_modes_net) nets.push_back(&*model.k_modes_net);
  for (auto& net : model.u_group_nets) nets.push_back(&net);
  const auto offsets = model.param_offsets();

  std::vector<nn::AdamState> adam;
  for (auto* net : nets) {
    adam.push_back(nn::make_adam(net->param_count(), schedule.learning_rate));
  }

  std::vector<double> grad(model.param_count(), 0.0);
  for (long epoch = 1; epoch <= epochs; ++epoch) {
    const auto masks = draw_epoch_masks(
        model, derive_seed(schedule.seed, {stream::kDropoutEpoch,
                                           static_cast<std::uint64_t>(epoch)}));
    const auto loss = eval.value_and_gradient(masks, grad);
    if (!std::isfinite(loss.total)) {
      throw NumericError("training diverged (non-finite loss) at epoch " +
                         std::to_string(epoch));
    }
    for (std::size_t i = 0; i < nets.size(); ++i) {
      nn::adam_step(nets[i]->params(),
                    std::span<const double>(grad.data() + offsets[i],
                                            nets[i]->param_count()),
                    adam[i]);
    }
    if (schedule.history_stride > 0 && epoch % schedule.history_stride == 0) {
      result.history.emplace_back(epoch, loss);
    }
  }
  result.final_loss = eval.value(EpochMasks{});
  result.epochs_run = epochs;
  return result;
}

PredictedCurves predict_snapshot(const SurrogateModel& model,
                                 std::span<const double> new_k_readings,
                                 std::span<const double> query_xs) {
  PredictedCurves out;
  out.xs.assign(query_xs.begin(), query_xs.end());
  const std::size_t nx = query_xs.size();

  std::vector<double> xi_new, psi_new;
  if (model.stochastic()) {
    xi_new = pc::extract_xi(model.pca, new_k_readings);
    psi_new.resize(model.basis.indices.size());
    pc::evaluate_basis(model.basis, xi_new, psi_new);
  } else {
    psi_new = {1.0};
  }

  // u curve: combine batched group evaluations.
  out.u.assign(nx, 0.0);
  std::size_t alpha = 0;
  for (const auto& net : model.u_group_nets) {
    const auto vals = nn::forward_values(net, query_xs);
    const int n_out = net.spec().output_dim;
    for (std::size_t s = 0; s < nx; ++s) {
      for (int o = 0; o < n_out; ++o) {
        out.u[s] += vals[s * n_out + o] * psi_new[alpha + o];
      }
    }
    alpha += static_cast<std::size_t>(n_out);
  }

  if (model.k_mean_net) {
    out.k = nn::forward_values(*model.k_mean_net, query_xs);
    if (model.k_modes_net && model.pca.retained > 0) {
      const auto modes = nn::forward_values(*model.k_modes_net, query_xs);
      const int m = model.pca.retained;
      for (std::size_t s = 0; s < nx; ++s) {
        for (int l = 0; l < m; ++l) {
          out.k[s] += std::sqrt(model.pca.eigenvalues[l]) * xi_new[l] *
                      modes[s * m + l];
        }
      }
    }
  }
  return out;
}

StatCurves statistics(const SurrogateModel& model, std::span<const double> query_xs) {
  StatCurves out;
  out.xs.assign(query_xs.begin(), query_xs.end());
  const std::size_t nx = query_xs.size();

  out.u_mean.assign(nx, 0.0);
  out.u_std.assign(nx, 0.0);
  std::size_t alpha = 0;
  for (const auto& net : model.u_group_nets) {
    const auto vals = nn::forward_values(net, query_xs);
    const int n_out = net.spec().output_dim;
    for (std::size_t s = 0; s < nx; ++s) {
      for (int o = 0; o < n_out; ++o) {
        const double v = vals[s * n_out + o];
        if (alpha + o == 0) {
          out.u_mean[s] = v;
        } else {
          out.u_std[s] += v * v;
        }
      }
    }
    alpha += static_cast<std::size_t>(n_out);
  }
  for (double& v : out.u_std) v = std::sqrt(v);

  if (model.k_mean_net) {
    out.k_mean = nn::forward_values(*model.k_mean_net, query_xs);
    out.k_std.assign(nx, 0.0);
    if (model.k_modes_net && model.pca.retained > 0) {
      const auto modes = nn::forward_values(*model.k_modes_net, query_xs);
      const int m = model.pca.retained;
      for (std::size_t s = 0; s < nx; ++s) {
        double var = 0.0;
        for (int l = 0; l < m; ++l) {
          const double t = modes[s * m + l];
          var += model.pca.eigenvalues[l] * t * t;
        }
        out.k_std[s] = std::sqrt(var);
      }
    }
  }
  return out;
}

}  // namespace apcnet::model
