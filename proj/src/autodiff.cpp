#include "apcnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace apcnet::ad {

namespace {

// x^n for n >= 0 by repeated multiplication; bit-stable and branch-light.
double ipow(double x, int n) {
  double r = 1.0;
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

constexpr double kRecipGuard = 1e-12;

}  // namespace

Graph::NodeId Graph::push(Op op, NodeId a, NodeId b, double payload) {
  ops_.push_back(op);
  lhs_.push_back(a);
  rhs_.push_back(b);
  payload_.push_back(payload);
  return static_cast<NodeId>(ops_.size() - 1);
}

Graph::NodeId Graph::constant(double v) { return push(Op::kConstant, 0, 0, v); }

Graph::NodeId Graph::input() {
  has_input_ = true;
  return push(Op::kInput, 0, 0, 0.0);
}

Graph::NodeId Graph::input_const(double x) {
  return push(Op::kInputConst, 0, 0, x);
}

Graph::NodeId Graph::param(std::uint32_t index) {
  param_count_ = std::max(param_count_, index + 1);
  return push(Op::kParam, 0, index, 0.0);
}

Graph::NodeId Graph::aux(std::uint32_t index) {
  aux_count_ = std::max(aux_count_, index + 1);
  return push(Op::kAux, 0, index, 0.0);
}

Graph::NodeId Graph::add(NodeId a, NodeId b) { return push(Op::kAdd, a, b, 0.0); }
Graph::NodeId Graph::sub(NodeId a, NodeId b) { return push(Op::kSub, a, b, 0.0); }
Graph::NodeId Graph::neg(NodeId a) { return push(Op::kNeg, a, 0, 0.0); }
Graph::NodeId Graph::mul(NodeId a, NodeId b) { return push(Op::kMul, a, b, 0.0); }
Graph::NodeId Graph::recip(NodeId a) { return push(Op::kRecip, a, 0, 0.0); }
Graph::NodeId Graph::tanh(NodeId a) { return push(Op::kTanh, a, 0, 0.0); }

Graph::NodeId Graph::pow_int(NodeId a, int exponent) {
  if (exponent < 0) throw ConfigError("pow_int: negative exponent unsupported");
  return push(Op::kPowInt, a, static_cast<NodeId>(exponent), 0.0);
}

Graph::NodeId Graph::dx(NodeId a) { return push(Op::kDx, a, 0, 0.0); }
Graph::NodeId Graph::dxx(NodeId a) { return push(Op::kDxx, a, 0, 0.0); }

void Graph::mark_output(NodeId a) {
  outputs_.push_back(a);
  refresh_orders();
}

// Computes, for both output orders (0 for losses, 2 for dual evaluation),
// the derivative order each node must carry.  Derivative-extraction nodes
// raise the order demanded of their operand; past order 2 the graph is not
// evaluable at that output order.
void Graph::refresh_orders() {
  auto sweep = [this](int out_order, std::vector<std::uint8_t>& need) -> bool {
    need.assign(ops_.size(), 0);
    for (NodeId out : outputs_) {
      need[out] = std::max<std::uint8_t>(need[out], static_cast<std::uint8_t>(out_order));
    }
    for (std::size_t i = ops_.size(); i-- > 0;) {
      const int lvl = need[i];
      auto raise = [&](NodeId o, int to) {
        need[o] = std::max<std::uint8_t>(need[o], static_cast<std::uint8_t>(to));
      };
      switch (ops_[i]) {
        case Op::kAdd:
        case Op::kSub:
        case Op::kMul:
          raise(lhs_[i], lvl);
          raise(rhs_[i], lvl);
          break;
        case Op::kNeg:
        case Op::kRecip:
        case Op::kTanh:
        case Op::kPowInt:
          raise(lhs_[i], lvl);
          break;
        case Op::kDx:
          if (lvl + 1 > 2) return false;
          raise(lhs_[i], lvl + 1);
          break;
        case Op::kDxx:
          if (lvl + 2 > 2) return false;
          raise(lhs_[i], lvl + 2);
          break;
        default:
          break;  // leaves
      }
    }
    return true;
  };
  if (!sweep(0, need_loss_)) {
    throw UnsupportedOrderError(
        "graph requires input derivatives beyond second order");
  }
  dual_order_ok_ = sweep(2, need_dual_);
}

// Access shim so the workspace can read graph internals without widening the
// public surface.
class detail_access {
 public:
  static const std::vector<Op>& ops(const Graph& g) { return g.ops_; }
  static const std::vector<Graph::NodeId>& lhs(const Graph& g) { return g.lhs_; }
  static const std::vector<Graph::NodeId>& rhs(const Graph& g) { return g.rhs_; }
  static const std::vector<double>& payload(const Graph& g) { return g.payload_; }
  static const std::vector<std::uint8_t>& need(const Graph& g, int out_order) {
    return out_order == 0 ? g.need_loss_ : g.need_dual_;
  }
  static bool dual_ok(const Graph& g) { return g.dual_order_ok_; }
};

void Workspace::forward(const Graph& g, std::span<const double> params,
                        std::span<const double> aux, double x, bool has_x,
                        int out_order) {
  if (params.size() < g.param_count()) {
    throw BindingError("unbound parameter: expected " +
                       std::to_string(g.param_count()) + " values, got " +
                       std::to_string(params.size()));
  }
  if (aux.size() < g.aux_count()) {
    throw BindingError("unbound aux variable: expected " +
                       std::to_string(g.aux_count()) + " values, got " +
                       std::to_string(aux.size()));
  }
  if (g.has_input() && !has_x) throw BindingError("spatial input x not bound");
  if (out_order == 2 && !detail_access::dual_ok(g)) {
    throw UnsupportedOrderError(
        "second input-derivatives of this graph's outputs are not available");
  }

  const auto& ops = detail_access::ops(g);
  const auto& lhs = detail_access::lhs(g);
  const auto& rhs = detail_access::rhs(g);
  const auto& payload = detail_access::payload(g);
  const auto& need = detail_access::need(g, out_order);
  const std::size_t n = ops.size();
  v_.resize(n);
  a_.resize(n);
  b_.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const int lvl = need[i];
    const std::size_t l = lhs[i];
    const std::size_t r = rhs[i];
    switch (ops[i]) {
      case Op::kConstant:
        v_[i] = payload[i];
        if (lvl >= 1) a_[i] = 0.0;
        if (lvl >= 2) b_[i] = 0.0;
        break;
      case Op::kInput:
        v_[i] = x;
        if (lvl >= 1) a_[i] = 1.0;
        if (lvl >= 2) b_[i] = 0.0;
        break;
      case Op::kInputConst:
        v_[i] = payload[i];
        if (lvl >= 1) a_[i] = 1.0;
        if (lvl >= 2) b_[i] = 0.0;
        break;
      case Op::kParam:
        v_[i] = params[r];
        if (lvl >= 1) a_[i] = 0.0;
        if (lvl >= 2) b_[i] = 0.0;
        break;
      case Op::kAux:
        v_[i] = aux[r];
        if (lvl >= 1) a_[i] = 0.0;
        if (lvl >= 2) b_[i] = 0.0;
        break;
      case Op::kAdd:
        v_[i] = v_[l] + v_[r];
        if (lvl >= 1) a_[i] = a_[l] + a_[r];
        if (lvl >= 2) b_[i] = b_[l] + b_[r];
        break;
      case Op::kSub:
        v_[i] = v_[l] - v_[r];
        if (lvl >= 1) a_[i] = a_[l] - a_[r];
        if (lvl >= 2) b_[i] = b_[l] - b_[r];
        break;
      case Op::kNeg:
        v_[i] = -v_[l];
        if (lvl >= 1) a_[i] = -a_[l];
        if (lvl >= 2) b_[i] = -b_[l];
        break;
      case Op::kMul:
        v_[i] = v_[l] * v_[r];
        if (lvl >= 1) a_[i] = a_[l] * v_[r] + v_[l] * a_[r];
        if (lvl >= 2) b_[i] = b_[l] * v_[r] + 2.0 * a_[l] * a_[r] + v_[l] * b_[r];
        break;
      case Op::kRecip: {
        if (std::abs(v_[l]) < kRecipGuard) {
          throw NumericError("division by near-zero value (|den| < 1e-12)");
        }
        const double rv = 1.0 / v_[l];
        v_[i] = rv;
        if (lvl >= 1) a_[i] = -a_[l] * rv * rv;
        if (lvl >= 2) {
          b_[i] = -b_[l] * rv * rv + 2.0 * a_[l] * a_[l] * rv * rv * rv;
        }
        break;
      }
      case Op::kTanh: {
        const double t = std::tanh(v_[l]);
        const double s = 1.0 - t * t;
        v_[i] = t;
        if (lvl >= 1) a_[i] = s * a_[l];
        if (lvl >= 2) b_[i] = s * b_[l] - 2.0 * t * s * a_[l] * a_[l];
        break;
      }
      case Op::kPowInt: {
        const int e = static_cast<int>(r);
        const double xv = v_[l];
        v_[i] = ipow(xv, e);
        if (lvl >= 1) a_[i] = e == 0 ? 0.0 : e * ipow(xv, e - 1) * a_[l];
        if (lvl >= 2) {
          const double c2 = static_cast<double>(e) * (e - 1);
          b_[i] = (c2 == 0.0 ? 0.0 : c2 * ipow(xv, e - 2) * a_[l] * a_[l]) +
                  (e == 0 ? 0.0 : e * ipow(xv, e - 1) * b_[l]);
        }
        break;
      }
      case Op::kDx:
        v_[i] = a_[l];
        if (lvl >= 1) a_[i] = b_[l];
        break;
      case Op::kDxx:
        v_[i] = b_[l];
        break;
    }
  }
}

void Workspace::reverse_into(const Graph& g, std::span<double> grad) {
  const auto& ops = detail_access::ops(g);
  const auto& lhs = detail_access::lhs(g);
  const auto& rhs = detail_access::rhs(g);
  const auto& need = detail_access::need(g, 0);
  const std::size_t n = ops.size();
  va_.assign(n, 0.0);
  aa_.assign(n, 0.0);
  ba_.assign(n, 0.0);
  va_[g.outputs().front()] = 1.0;

  for (std::size_t i = n; i-- > 0;) {
    const int lvl = need[i];
    const double Av = va_[i];
    const double Aa = lvl >= 1 ? aa_[i] : 0.0;
    const double Ab = lvl >= 2 ? ba_[i] : 0.0;
    if (Av == 0.0 && Aa == 0.0 && Ab == 0.0) continue;
    const std::size_t l = lhs[i];
    const std::size_t r = rhs[i];
    switch (ops[i]) {
      case Op::kParam:
        grad[r] += Av;
        break;
      case Op::kAdd:
        va_[l] += Av;
        va_[r] += Av;
        if (lvl >= 1) { aa_[l] += Aa; aa_[r] += Aa; }
        if (lvl >= 2) { ba_[l] += Ab; ba_[r] += Ab; }
        break;
      case Op::kSub:
        va_[l] += Av;
        va_[r] -= Av;
        if (lvl >= 1) { aa_[l] += Aa; aa_[r] -= Aa; }
        if (lvl >= 2) { ba_[l] += Ab; ba_[r] -= Ab; }
        break;
      case Op::kNeg:
        va_[l] -= Av;
        if (lvl >= 1) aa_[l] -= Aa;
        if (lvl >= 2) ba_[l] -= Ab;
        break;
      case Op::kMul:
        va_[l] += Av * v_[r];
        va_[r] += Av * v_[l];
        if (lvl >= 1) {
          va_[l] += Aa * a_[r];
          aa_[l] += Aa * v_[r];
          va_[r] += Aa * a_[l];
          aa_[r] += Aa * v_[l];
        }
        if (lvl >= 2) {
          va_[l] += Ab * b_[r];
          aa_[l] += 2.0 * Ab * a_[r];
          ba_[l] += Ab * v_[r];
          va_[r] += Ab * b_[l];
          aa_[r] += 2.0 * Ab * a_[l];
          ba_[r] += Ab * v_[l];
        }
        break;
      case Op::kRecip: {
        const double rv = v_[i];
        const double r2 = rv * rv;
        const double r3 = r2 * rv;
        va_[l] += Av * (-r2);
        if (lvl >= 1) {
          va_[l] += Aa * (2.0 * a_[l] * r3);
          aa_[l] += Aa * (-r2);
        }
        if (lvl >= 2) {
          va_[l] += Ab * (2.0 * b_[l] * r3 - 6.0 * a_[l] * a_[l] * r2 * r2);
          aa_[l] += Ab * (4.0 * a_[l] * r3);
          ba_[l] += Ab * (-r2);
        }
        break;
      }
      case Op::kTanh: {
        const double t = v_[i];
        const double s = 1.0 - t * t;
        va_[l] += Av * s;
        if (lvl >= 1) {
          va_[l] += Aa * (-2.0 * t * s * a_[l]);
          aa_[l] += Aa * s;
        }
        if (lvl >= 2) {
          va_[l] += Ab * (-2.0 * t * s * b_[l] -
                          2.0 * (s * s - 2.0 * t * t * s) * a_[l] * a_[l]);
          aa_[l] += Ab * (-4.0 * t * s * a_[l]);
          ba_[l] += Ab * s;
        }
        break;
      }
      case Op::kPowInt: {
        const int e = static_cast<int>(r);
        const double xv = v_[l];
        const double c1 = static_cast<double>(e);
        const double c2 = c1 * (e - 1);
        const double c3 = c2 * (e - 2);
        const double p1 = e >= 1 ? ipow(xv, e - 1) : 0.0;
        const double p2 = e >= 2 ? ipow(xv, e - 2) : 0.0;
        const double p3 = e >= 3 ? ipow(xv, e - 3) : 0.0;
        va_[l] += Av * c1 * p1;
        if (lvl >= 1) {
          va_[l] += Aa * c2 * p2 * a_[l];
          aa_[l] += Aa * c1 * p1;
        }
        if (lvl >= 2) {
          va_[l] += Ab * (c3 * p3 * a_[l] * a_[l] + c2 * p2 * b_[l]);
          aa_[l] += Ab * (2.0 * c2 * p2 * a_[l]);
          ba_[l] += Ab * c1 * p1;
        }
        break;
      }
      case Op::kDx:
        aa_[l] += Av;
        if (lvl >= 1) ba_[l] += Aa;
        break;
      case Op::kDxx:
        ba_[l] += Av;
        break;
      default:
        break;  // constants, inputs, aux: no upstream flow
    }
  }
}

DualValue Workspace::output_dual(const Graph& g, std::size_t output_index) const {
  const auto id = g.outputs()[output_index];
  return {v_[id], a_[id], b_[id]};
}

double Workspace::output_value(const Graph& g, std::size_t output_index) const {
  return v_[g.outputs()[output_index]];
}

std::vector<DualValue> evaluate_with_input_derivatives(
    const Graph& g, std::span<const double> params, std::span<const double> aux,
    double x) {
  Workspace ws;
  ws.forward(g, params, aux, x, true, 2);
  std::vector<DualValue> out;
  out.reserve(g.outputs().size());
  for (std::size_t i = 0; i < g.outputs().size(); ++i) {
    out.push_back(ws.output_dual(g, i));
  }
  return out;
}

std::vector<double> parameter_gradient(const Graph& g,
                                       std::span<const double> params,
                                       std::span<const double> aux, double x) {
  if (g.outputs().size() != 1) {
    throw ConfigError("parameter_gradient requires a single scalar output, got " +
                      std::to_string(g.outputs().size()));
  }
  Workspace ws;
  std::vector<double> grad(g.param_count(), 0.0);
  ws.forward(g, params, aux, x, true, 0);
  ws.reverse_into(g, grad);
  return grad;
}

double value_and_gradient(const Graph& g, std::span<const double> params,
                          std::span<const double> aux, double x, bool has_x,
                          std::span<double> grad, Workspace& ws) {
  if (g.outputs().size() != 1) {
    throw ConfigError("value_and_gradient requires a single scalar output");
  }
  ws.forward(g, params, aux, x, has_x, 0);
  std::fill(grad.begin(), grad.end(), 0.0);
  ws.reverse_into(g, grad);
  return ws.output_value(g, 0);
}

}  // namespace apcnet::ad
