#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "apcnet/errors.hpp"

namespace apcnet::ad {

/// Value of a graph node together with its first and second derivatives with
/// respect to the single spatial input x.
struct DualValue {
  double value = 0.0;
  double d_dx = 0.0;
  double d2_dx2 = 0.0;
};

enum class Op : std::uint8_t {
  kConstant,    ///< fixed scalar, zero derivatives
  kInput,       ///< the spatial input x, bound per evaluation; (x, 1, 0)
  kInputConst,  ///< a fixed spatial location baked into the graph; (x0, 1, 0)
  kParam,       ///< trainable parameter, bound per evaluation
  kAux,         ///< non-trainable bound value (dropout mask slot etc.)
  kAdd,
  kSub,
  kNeg,
  kMul,
  kRecip,  ///< 1/x with a near-zero guard; div is built as mul(a, recip(b))
  kTanh,
  kPowInt,  ///< integer power, exponent >= 0
  kDx,      ///< extracts the first x-derivative of its operand as a value
  kDxx,     ///< extracts the second x-derivative of its operand as a value
};

struct BindingError : ConfigError {
  using ConfigError::ConfigError;
};
struct UnsupportedOrderError : ConfigError {
  using ConfigError::ConfigError;
};

/// An append-only scalar computation DAG.  Operands always precede their
/// consumers, so node ids double as a topological order.  Graphs are
/// immutable once built (mark_output finalizes derivative bookkeeping) and
/// evaluation is reentrant: all mutable state lives in the caller's
/// Workspace.
class Graph {
 public:
  using NodeId = std::uint32_t;

  NodeId constant(double v);
  NodeId input();
  NodeId input_const(double x);
  NodeId param(std::uint32_t index);
  NodeId aux(std::uint32_t index);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId mul(NodeId a, NodeId b);
  NodeId recip(NodeId a);
  NodeId div(NodeId a, NodeId b) { return mul(a, recip(b)); }
  NodeId tanh(NodeId a);
  NodeId pow_int(NodeId a, int exponent);
  NodeId dx(NodeId a);
  NodeId dxx(NodeId a);

  void mark_output(NodeId a);

  std::size_t size() const { return ops_.size(); }
  std::uint32_t param_count() const { return param_count_; }
  std::uint32_t aux_count() const { return aux_count_; }
  const std::vector<NodeId>& outputs() const { return outputs_; }
  bool has_input() const { return has_input_; }

 private:
  friend class Workspace;
  friend class detail_access;

  NodeId push(Op op, NodeId a, NodeId b, double payload);
  void refresh_orders();

  std::vector<Op> ops_;
  std::vector<NodeId> lhs_;
  std::vector<NodeId> rhs_;       // operand 2, or var index, or exponent
  std::vector<double> payload_;   // constant value / fixed x
  std::vector<NodeId> outputs_;
  // Derivative order each node must carry (0..2), for loss evaluation
  // (outputs at order 0) and dual evaluation (outputs at order 2).
  std::vector<std::uint8_t> need_loss_;
  std::vector<std::uint8_t> need_dual_;
  bool dual_order_ok_ = true;  // false if order-2 outputs would need order-3 data
  std::uint32_t param_count_ = 0;
  std::uint32_t aux_count_ = 0;
  bool has_input_ = false;
};

/// Scratch buffers for one evaluation; reuse across calls to avoid
/// reallocation.  Not shareable between concurrent evaluations.
class Workspace {
 public:
  /// Forward pass carrying (value, d/dx, d2/dx2) per node up to the order the
  /// graph requires for the requested output order (0 or 2).
  void forward(const Graph& g, std::span<const double> params,
               std::span<const double> aux, double x, bool has_x, int out_order);

  /// Reverse pass for a single scalar output; returns the gradient with
  /// respect to every parameter.  Must follow a forward() at out_order 0.
  void reverse_into(const Graph& g, std::span<double> grad);

  DualValue output_dual(const Graph& g, std::size_t output_index) const;
  double output_value(const Graph& g, std::size_t output_index) const;

  /// Value of an arbitrary node after a forward pass.
  double node_value(Graph::NodeId id) const { return v_[id]; }

 private:
  std::vector<double> v_, a_, b_;     // forward triples
  std::vector<double> va_, aa_, ba_;  // adjoints of the triples
};

/// Evaluates every output with first and second x-derivatives.
std::vector<DualValue> evaluate_with_input_derivatives(
    const Graph& g, std::span<const double> params,
    std::span<const double> aux = {}, double x = 0.0);

/// Gradient of the single scalar output with respect to all parameters.
std::vector<double> parameter_gradient(const Graph& g,
                                       std::span<const double> params,
                                       std::span<const double> aux = {},
                                       double x = 0.0);

/// Loss value plus parameter gradient in one pass, reusing a workspace.
double value_and_gradient(const Graph& g, std::span<const double> params,
                          std::span<const double> aux, double x, bool has_x,
                          std::span<double> grad, Workspace& ws);

}  // namespace apcnet::ad
