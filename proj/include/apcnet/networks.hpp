#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "apcnet/autodiff.hpp"

namespace apcnet::nn {

struct MlpSpec {
  int input_dim = 1;
  int output_dim = 1;
  int hidden_layers = 2;
  int width = 4;
  double dropout_p = 0.0;   ///< unit drop probability, 0 disables dropout
  double l2_lambda = 0.0;   ///< weight of the l2 penalty over all parameters

  bool operator==(const MlpSpec&) const = default;
};

/// Per-hidden-unit keep scales: 1/(1-p) for kept units, 0 for dropped ones
/// (inverted dropout, so masked and maskless forward share one scale
/// convention).  Empty scales mean "no dropout".
struct DropoutMask {
  std::vector<double> scales;  ///< hidden_layers * width entries
  double p = 0.0;
};

/// Fully connected tanh network with a flat parameter array.  Layer l stores
/// its weight matrix row-major followed by its biases; offsets are fixed by
/// the spec, so checkpoints, graph parameter ids, and the fast kernel all
/// agree on the layout.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(const MlpSpec& spec);

  const MlpSpec& spec() const { return spec_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  int layer_count() const { return spec_.hidden_layers + 1; }
  int fan_in(int layer) const { return layer == 0 ? spec_.input_dim : spec_.width; }
  int fan_out(int layer) const {
    return layer == spec_.hidden_layers ? spec_.output_dim : spec_.width;
  }
  std::size_t weight_offset(int layer) const { return w_off_[layer]; }
  std::size_t bias_offset(int layer) const { return b_off_[layer]; }

  /// Graph-based reference of the same computation, built lazily and shared
  /// between copies (it depends only on the spec).  Parameter ids equal flat
  /// parameter indices; aux ids are dropout mask slots (layer*width + unit).
  const ad::Graph& graph_template() const;

 private:
  MlpSpec spec_;
  std::vector<double> params_;
  std::vector<std::size_t> w_off_, b_off_;
  mutable std::shared_ptr<const ad::Graph> graph_;
};

/// Xavier/Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero
/// biases; deterministic for a fixed seed.
Mlp init_mlp(const MlpSpec& spec, std::uint64_t seed);

/// Draws an independent keep decision per hidden unit.
DropoutMask draw_dropout_mask(const MlpSpec& spec, std::uint64_t seed);

/// Scratch buffers for the layer kernel; reusable across calls, one per
/// thread.  Triples are stored interleaved as [3*i + {0,1,2}].
struct MlpWorkspace {
  std::vector<std::vector<double>> pre;   ///< pre-activation triples per hidden layer
  std::vector<std::vector<double>> act;   ///< tanh triples (before mask)
  std::vector<std::vector<double>> post;  ///< after mask scaling
  std::vector<double> out;                ///< output triples, 3 * output_dim
  std::vector<std::vector<double>> adj;   ///< reverse-pass scratch
  double input_x = 0.0;                   ///< x of the last forward_triple
};

/// Evaluates the network at x, propagating (value, d/dx, d2/dx2) through
/// every unit.  Results stay in ws for a subsequent reverse_triple call.
/// Bit-identical to evaluating the graph template with the same bindings.
void forward_triple(const Mlp& net, double x, const DropoutMask* mask,
                    MlpWorkspace& ws);

/// Accumulates d(loss)/d(params) into grad given the adjoints of the output
/// triples (3 per output: seed on value, on d/dx, on d2/dx2).  Must follow a
/// forward_triple on the same workspace/mask.
void reverse_triple(const Mlp& net, const DropoutMask* mask,
                    std::span<const double> out_seeds, MlpWorkspace& ws,
                    std::span<double> grad);

/// Value-only forward for a batch of inputs; returns row-major
/// xs.size() x output_dim.  Used by prediction and Monte Carlo dropout where
/// no derivatives are needed.
std::vector<double> forward_values(const Mlp& net, std::span<const double> xs,
                                   const DropoutMask* mask = nullptr);

/// Spec-level forward: one input, all outputs with input-derivatives.
std::vector<ad::DualValue> forward(const Mlp& net, double x,
                                   const DropoutMask* mask = nullptr);

struct AdamState {
  std::int64_t step = 0;
  std::vector<double> m, v;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam(std::size_t param_count, double learning_rate);

/// Standard bias-corrected Adam update, in place.  Throws NumericError naming
/// the offending index if the gradient is not finite.
void adam_step(std::span<double> params, std::span<const double> grad,
               AdamState& state);

/// lambda * sum(theta_i^2) over all weights and biases.
double l2_penalty(const Mlp& net);

/// Checkpoint: one JSON header line (spec fields, param count, format
/// version) followed by the raw little-endian double array.
void save_checkpoint(const Mlp& net, const std::string& path);
Mlp load_checkpoint(const std::string& path);

}  // namespace apcnet::nn
