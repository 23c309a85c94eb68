#include "apcnet/active.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "apcnet/parallel.hpp"
#include "apcnet/rng.hpp"

namespace apcnet::active {

DropoutStats mc_dropout_stats(const nn::Mlp& net, std::span<const double> query_xs,
                              int passes, std::uint64_t seed, int output_index) {
  if (passes < 2) throw ConfigError("mc_dropout_stats: need at least 2 passes");
  if (output_index < 0 || output_index >= net.spec().output_dim) {
    throw ConfigError("mc_dropout_stats: output index out of range");
  }
  DropoutStats stats;
  stats.query_xs.assign(query_xs.begin(), query_xs.end());
  stats.passes = passes;
  const std::size_t nx = query_xs.size();
  stats.mean.assign(nx, 0.0);
  stats.stddev.assign(nx, 0.0);

  if (net.spec().dropout_p == 0.0) {
    // Every mask keeps every unit; the estimator degenerates exactly.
    const auto vals = nn::forward_values(net, query_xs);
    const int n_out = net.spec().output_dim;
    for (std::size_t i = 0; i < nx; ++i) stats.mean[i] = vals[i * n_out + output_index];
    return stats;
  }

  struct Partial {
    std::vector<double> sum, sumsq;
  };
  const int n_out = net.spec().output_dim;
  auto total = blocked_reduce<Partial>(
      static_cast<std::size_t>(passes),
      [&](Partial& p, std::size_t t) {
        if (p.sum.empty()) {
          p.sum.assign(nx, 0.0);
          p.sumsq.assign(nx, 0.0);
        }
        const auto mask = nn::draw_dropout_mask(
            net.spec(), derive_seed(seed, {stream::kDropoutPass, t}));
        const auto vals = nn::forward_values(net, query_xs, &mask);
        for (std::size_t i = 0; i < nx; ++i) {
          const double v = vals[i * n_out + output_index];
          p.sum[i] += v;
          p.sumsq[i] += v * v;
        }
      },
      [&](Partial& acc, const Partial& p) {
        if (p.sum.empty()) return;
        if (acc.sum.empty()) {
          acc.sum.assign(nx, 0.0);
          acc.sumsq.assign(nx, 0.0);
        }
        for (std::size_t i = 0; i < nx; ++i) {
          acc.sum[i] += p.sum[i];
          acc.sumsq[i] += p.sumsq[i];
        }
      });

  const double inv_t = 1.0 / static_cast<double>(passes);
  for (std::size_t i = 0; i < nx; ++i) {
    const double m = total.sum[i] * inv_t;
    stats.mean[i] = m;
    const double var = std::max(0.0, total.sumsq[i] * inv_t - m * m);
    stats.stddev[i] = std::sqrt(var);
  }
  return stats;
}

std::size_t SensorBook::nearest(double x) const {
  if (locations.empty()) throw ConfigError("SensorBook::nearest: empty book");
  std::size_t best = 0;
  double best_d = std::abs(x - locations[0]);
  for (std::size_t i = 1; i < locations.size(); ++i) {
    const double d = std::abs(x - locations[i]);
    if (d < best_d) {  // ties keep the leftmost (first) entry
      best_d = d;
      best = i;
    }
  }
  return best;
}

Proposal propose_sensor(const DropoutStats& stats, SensorBook& book, double rho) {
  if (stats.stddev.empty()) throw ConfigError("propose_sensor: empty statistics");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < stats.stddev.size(); ++i) {
    if (stats.stddev[i] > stats.stddev[arg]) arg = i;  // ties keep the smaller x
  }
  Proposal p;
  p.x_star = stats.query_xs[arg];

  const std::size_t near = book.nearest(p.x_star);
  if (std::abs(p.x_star - book.locations[near]) < rho) {
    book.weights[near] += 1;
    p.decision = PlacementDecision::kDuplicate;
    p.sensor_index = near;
  } else {
    book.locations.push_back(p.x_star);
    book.weights.push_back(1);
    p.decision = PlacementDecision::kNewSensor;
    p.sensor_index = book.locations.size() - 1;
  }
  return p;
}

int ActiveLearningLog::new_sensor_count() const {
  int n = 0;
  for (const auto& s : steps) {
    if (s.proposal && s.proposal->decision == PlacementDecision::kNewSensor) ++n;
  }
  return n;
}

namespace {
void format_double(std::string& out, double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}
}  // namespace

void write_log_csv(const ActiveLearningLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "step,n_sensors,decision,x_star,k_mean_err,k_std_err,k_pred_err,"
         "u_mean_err,u_std_err,u_pred_err\n";
  for (const auto& s : log.steps) {
    std::string line = std::to_string(s.step) + "," +
                       std::to_string(s.sensors.locations.size()) + ",";
    if (s.proposal) {
      line += s.proposal->decision == PlacementDecision::kNewSensor ? "new" : "duplicate";
      line += ",";
      format_double(line, s.proposal->x_star);
    } else {
      line += "none,";
    }
    for (double e : {s.k_mean_err, s.k_std_err, s.k_pred_err, s.u_mean_err,
                     s.u_std_err, s.u_pred_err}) {
      line += ",";
      format_double(line, e);
    }
    out << line << "\n";
  }
}

namespace {

/// Readings for every sensor in the book from the stored ground-truth
/// trajectories, snapped to the generation grid.
RowMat book_readings(const SensorBook& book, const fields::FieldEnsemble& truth) {
  const std::size_t n = truth.trajectories.rows();
  RowMat out(n, book.locations.size());
  const double h = truth.grid.size() > 1 ? truth.grid[1] - truth.grid[0] : 0.0;
  for (std::size_t i = 0; i < book.locations.size(); ++i) {
    const std::size_t idx = fields::nearest_grid_index(truth.grid, book.locations[i]);
    if (std::abs(truth.grid[idx] - book.locations[i]) > 0.5 * h + 1e-9) {
      throw DataError("ground-truth ensemble lacks a point near sensor location " +
                      std::to_string(book.locations[i]));
    }
    for (std::size_t s = 0; s < n; ++s) out(s, i) = truth.trajectories(s, idx);
  }
  return out;
}

}  // namespace

ActiveLearningLog active_learning_loop(const ActiveProblem& prob,
                                       const ActiveLoopConfig& config) {
  if (prob.problem.kind != model::ProblemKind::kInverseElliptic &&
      prob.problem.kind != model::ProblemKind::kDeterministicElliptic) {
    throw ConfigError("active learning supports the elliptic problem kinds only");
  }
  if (!prob.evaluate) throw ConfigError("active learning needs an evaluate callback");

  SensorBook book;
  book.locations = prob.initial_data.k_sensor_xs;
  book.weights = prob.initial_data.k_weights;
  if (book.weights.empty()) book.weights.assign(book.locations.size(), 1);

  const auto query = fields::uniform_grid(config.query_points);

  ActiveLearningLog log;
  int non_improving = 0;
  double prev_k_pred = 0.0;

  for (int step = 0; step <= config.max_steps; ++step) {
    // Rebuild the training set for the current book: one column per physical
    // sensor (multiplicity enters the loss, not the PCA).
    model::TrainingSet data = prob.initial_data;
    data.k_sensor_xs = book.locations;
    data.k_weights = book.weights;
    data.k_snapshots = book_readings(book, prob.k_truth);

    const std::uint64_t step_seed =
        derive_seed(config.seed, {stream::kActiveStep, static_cast<std::uint64_t>(step)});
    auto surrogate = model::build_surrogate(prob.problem, data, prob.shapes,
                                            prob.apc_order, prob.energy_threshold,
                                            step_seed);
    auto schedule = prob.schedule;
    schedule.seed = step_seed;
    model::train(surrogate, data, schedule);

    StepRecord rec;
    rec.step = step;
    rec.sensors = book;
    prob.evaluate(surrogate, rec);

    bool stop = step == config.max_steps;
    if (config.use_patience && step > 0) {
      if (rec.k_pred_err >= prev_k_pred) {
        if (++non_improving >= config.patience) stop = true;
      } else {
        non_improving = 0;
      }
    }
    prev_k_pred = rec.k_pred_err;

    if (!stop) {
      // Dropout uncertainty of the placement target: the first mode for the
      // stochastic problem (largest eigenvalue after the per-step re-ranking),
      // the whole k network for the deterministic one.
      const nn::Mlp& target = prob.problem.kind == model::ProblemKind::kInverseElliptic
                                  ? *surrogate.k_modes_net
                                  : *surrogate.k_mean_net;
      auto stats = mc_dropout_stats(target, query, config.mc_passes,
                                    derive_seed(step_seed, {stream::kDropoutPass}), 0);
      auto proposal = propose_sensor(stats, book, config.rho);
      if (proposal.decision == PlacementDecision::kNewSensor) {
        // Snap the new sensor onto the generation grid so its readings are
        // exact trajectory values.
        const std::size_t idx =
            fields::nearest_grid_index(prob.k_truth.grid, proposal.x_star);
        book.locations.back() = prob.k_truth.grid[idx];
      }
      rec.proposal = proposal;
    }
    log.steps.push_back(std::move(rec));
    if (stop) break;
  }
  return log;
}

void write_log_json(const ActiveLearningLog& log, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  auto& steps = j["steps"];
  steps = nlohmann::json::array();
  for (const auto& s : log.steps) {
    nlohmann::json rec = {
        {"step", s.step},
        {"sensor_locations", s.sensors.locations},
        {"sensor_weights", s.sensors.weights},
        {"k_mean_err", s.k_mean_err},
        {"k_std_err", s.k_std_err},
        {"k_pred_err", s.k_pred_err},
        {"u_mean_err", s.u_mean_err},
        {"u_std_err", s.u_std_err},
        {"u_pred_err", s.u_pred_err},
    };
    if (s.proposal) {
      rec["decision"] =
          s.proposal->decision == PlacementDecision::kNewSensor ? "new" : "duplicate";
      rec["x_star"] = s.proposal->x_star;
    }
    steps.push_back(std::move(rec));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace apcnet::active
