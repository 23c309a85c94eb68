#include "apcnet/networks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "apcnet/errors.hpp"
#include "apcnet/rng.hpp"

namespace apcnet::nn {

namespace {
std::mutex g_graph_build_mutex;
}

Mlp::Mlp(const MlpSpec& spec) : spec_(spec) {
  if (spec.input_dim != 1) throw ConfigError("Mlp: only a single spatial input is supported");
  if (spec.hidden_layers < 1) throw ConfigError("Mlp: need at least one hidden layer");
  if (spec.width < 1 || spec.output_dim < 1) throw ConfigError("Mlp: invalid shape");
  if (spec.dropout_p < 0.0 || spec.dropout_p >= 1.0) {
    throw ConfigError("Mlp: dropout probability must lie in [0, 1)");
  }
  std::size_t offset = 0;
  for (int l = 0; l < layer_count(); ++l) {
    w_off_.push_back(offset);
    offset += static_cast<std::size_t>(fan_in(l)) * fan_out(l);
    b_off_.push_back(offset);
    offset += fan_out(l);
  }
  params_.assign(offset, 0.0);
}

const ad::Graph& Mlp::graph_template() const {
  std::lock_guard lock(g_graph_build_mutex);
  if (graph_) return *graph_;
  auto g = std::make_shared<ad::Graph>();
  std::vector<ad::Graph::NodeId> h = {g->input()};
  for (int l = 0; l < layer_count(); ++l) {
    std::vector<ad::Graph::NodeId> next;
    const bool hidden = l < spec_.hidden_layers;
    for (int j = 0; j < fan_out(l); ++j) {
      auto acc = g->param(static_cast<std::uint32_t>(bias_offset(l) + j));
      for (int i = 0; i < fan_in(l); ++i) {
        auto w = g->param(
            static_cast<std::uint32_t>(weight_offset(l) + static_cast<std::size_t>(j) * fan_in(l) + i));
        acc = g->add(acc, g->mul(w, h[i]));
      }
      if (hidden) {
        auto t = g->tanh(acc);
        auto m = g->aux(static_cast<std::uint32_t>(l * spec_.width + j));
        next.push_back(g->mul(t, m));
      } else {
        next.push_back(acc);
      }
    }
    h = std::move(next);
  }
  for (auto id : h) g->mark_output(id);
  graph_ = std::move(g);
  return *graph_;
}

Mlp init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  Mlp net(spec);
  Rng rng(derive_seed(seed, {stream::kNetInit}));
  auto& p = net.params();
  for (int l = 0; l < net.layer_count(); ++l) {
    const double bound = std::sqrt(6.0 / (net.fan_in(l) + net.fan_out(l)));
    const std::size_t w0 = net.weight_offset(l);
    const std::size_t nw = static_cast<std::size_t>(net.fan_in(l)) * net.fan_out(l);
    for (std::size_t i = 0; i < nw; ++i) p[w0 + i] = rng.uniform(-bound, bound);
    // biases stay zero
  }
  return net;
}

DropoutMask draw_dropout_mask(const MlpSpec& spec, std::uint64_t seed) {
  DropoutMask mask;
  mask.p = spec.dropout_p;
  mask.scales.assign(static_cast<std::size_t>(spec.hidden_layers) * spec.width, 1.0);
  if (spec.dropout_p > 0.0) {
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - spec.dropout_p);
    for (double& s : mask.scales) {
      s = rng.bernoulli(1.0 - spec.dropout_p) ? keep_scale : 0.0;
    }
  }
  return mask;
}

namespace {

void resize_ws(const Mlp& net, MlpWorkspace& ws) {
  const std::size_t layers = static_cast<std::size_t>(net.spec().hidden_layers);
  ws.pre.resize(layers);
  ws.act.resize(layers);
  ws.post.resize(layers);
  ws.adj.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t n = 3u * net.spec().width;
    ws.pre[l].resize(n);
    ws.act[l].resize(n);
    ws.post[l].resize(n);
    ws.adj[l].resize(n);
  }
  ws.out.resize(3u * net.spec().output_dim);
}

}  // namespace

void forward_triple(const Mlp& net, double x, const DropoutMask* mask,
                    MlpWorkspace& ws) {
  resize_ws(net, ws);
  ws.input_x = x;
  const auto& p = net.params();
  const int width = net.spec().width;
  const int hidden = net.spec().hidden_layers;

  if (mask && !mask->scales.empty() &&
      mask->scales.size() != static_cast<std::size_t>(hidden) * width) {
    throw ConfigError("forward_triple: dropout mask does not match the network shape");
  }

  for (int l = 0; l <= hidden; ++l) {
    const bool is_hidden = l < hidden;
    const int nin = net.fan_in(l);
    const int nout = net.fan_out(l);
    const double* w = p.data() + net.weight_offset(l);
    const double* b = p.data() + net.bias_offset(l);
    const double* in = l == 0 ? nullptr : ws.post[l - 1].data();
    double* pre = is_hidden ? ws.pre[l].data() : ws.out.data();

    for (int j = 0; j < nout; ++j) {
      double av = b[j], aa = 0.0, ab = 0.0;
      const double* wj = w + static_cast<std::size_t>(j) * nin;
      if (l == 0) {
        // input triple is (x, 1, 0)
        av += wj[0] * x;
        aa += wj[0];
      } else {
        for (int i = 0; i < nin; ++i) {
          av += wj[i] * in[3 * i + 0];
          aa += wj[i] * in[3 * i + 1];
          ab += wj[i] * in[3 * i + 2];
        }
      }
      pre[3 * j + 0] = av;
      pre[3 * j + 1] = aa;
      pre[3 * j + 2] = ab;
    }

    if (is_hidden) {
      double* act = ws.act[l].data();
      double* post = ws.post[l].data();
      for (int j = 0; j < nout; ++j) {
        const double t = std::tanh(pre[3 * j + 0]);
        const double s = 1.0 - t * t;
        const double ua = pre[3 * j + 1];
        const double ub = pre[3 * j + 2];
        act[3 * j + 0] = t;
        act[3 * j + 1] = s * ua;
        act[3 * j + 2] = s * ub - 2.0 * t * s * ua * ua;
        const double m =
            (mask && !mask->scales.empty()) ? mask->scales[static_cast<std::size_t>(l) * width + j] : 1.0;
        post[3 * j + 0] = act[3 * j + 0] * m;
        post[3 * j + 1] = act[3 * j + 1] * m;
        post[3 * j + 2] = act[3 * j + 2] * m;
      }
    }
  }
}

void reverse_triple(const Mlp& net, const DropoutMask* mask,
                    std::span<const double> out_seeds, MlpWorkspace& ws,
                    std::span<double> grad) {
  const auto& p = net.params();
  const int width = net.spec().width;
  const int hidden = net.spec().hidden_layers;
  if (out_seeds.size() != static_cast<std::size_t>(3) * net.spec().output_dim) {
    throw ConfigError("reverse_triple: seed size mismatch");
  }
  if (grad.size() != net.param_count()) {
    throw ConfigError("reverse_triple: gradient size mismatch");
  }

  // Adjoints of the current layer's *input* post-activation triples.
  std::vector<double>* down = nullptr;

  for (int l = hidden; l >= 0; --l) {
    const bool is_hidden = l < hidden;
    const int nin = net.fan_in(l);
    const int nout = net.fan_out(l);
    const double* w = p.data() + net.weight_offset(l);
    double* gw = grad.data() + net.weight_offset(l);
    double* gb = grad.data() + net.bias_offset(l);
    const double* in = l == 0 ? nullptr : ws.post[l - 1].data();

    // Adjoint triples on this layer's pre-activations.
    std::vector<double> pre_adj(static_cast<std::size_t>(3) * nout, 0.0);
    if (!is_hidden) {
      std::copy(out_seeds.begin(), out_seeds.end(), pre_adj.begin());
    } else {
      // Through the mask multiply and tanh.
      const double* act = ws.act[l].data();
      const double* pre = ws.pre[l].data();
      const double* hadj = down->data();
      for (int j = 0; j < nout; ++j) {
        const double m =
            (mask && !mask->scales.empty()) ? mask->scales[static_cast<std::size_t>(l) * width + j] : 1.0;
        const double tv = hadj[3 * j + 0] * m;
        const double ta = hadj[3 * j + 1] * m;
        const double tb = hadj[3 * j + 2] * m;
        const double t = act[3 * j + 0];
        const double s = 1.0 - t * t;
        const double ua = pre[3 * j + 1];
        const double ub = pre[3 * j + 2];
        pre_adj[3 * j + 0] = tv * s + ta * (-2.0 * t * s * ua) +
                             tb * (-2.0 * t * s * ub -
                                   2.0 * (s * s - 2.0 * t * t * s) * ua * ua);
        pre_adj[3 * j + 1] = ta * s + tb * (-4.0 * t * s * ua);
        pre_adj[3 * j + 2] = tb * s;
      }
    }

    // Linear part: parameters and upstream adjoints.
    if (l == 0) {
      // input triple is (x, 1, 0): d pre_v/dw = x, d pre_a/dw = 1
      for (int j = 0; j < nout; ++j) {
        gb[j] += pre_adj[3 * j + 0];
        gw[j] += pre_adj[3 * j + 0] * ws.input_x + pre_adj[3 * j + 1];
      }
    } else {
      auto& in_adj = ws.adj[l - 1];
      std::fill(in_adj.begin(), in_adj.end(), 0.0);
      for (int j = 0; j < nout; ++j) {
        const double Av = pre_adj[3 * j + 0];
        const double Aa = pre_adj[3 * j + 1];
        const double Ab = pre_adj[3 * j + 2];
        gb[j] += Av;
        const double* wj = w + static_cast<std::size_t>(j) * nin;
        double* gwj = gw + static_cast<std::size_t>(j) * nin;
        for (int i = 0; i < nin; ++i) {
          gwj[i] += Av * in[3 * i + 0] + Aa * in[3 * i + 1] + Ab * in[3 * i + 2];
          in_adj[3 * i + 0] += Av * wj[i];
          in_adj[3 * i + 1] += Aa * wj[i];
          in_adj[3 * i + 2] += Ab * wj[i];
        }
      }
      down = &in_adj;
    }
  }
}

std::vector<double> forward_values(const Mlp& net, std::span<const double> xs,
                                   const DropoutMask* mask) {
  const int width = net.spec().width;
  const int hidden = net.spec().hidden_layers;
  const int out_dim = net.spec().output_dim;
  const std::size_t nx = xs.size();
  const auto& p = net.params();

  if (mask && !mask->scales.empty() &&
      mask->scales.size() != static_cast<std::size_t>(hidden) * width) {
    throw ConfigError("forward_values: dropout mask does not match the network shape");
  }

  // Unit-major layout: value of unit j at batch point s lives at [j*nx + s].
  std::vector<double> cur(static_cast<std::size_t>(width) * nx);
  std::vector<double> next;
  for (int l = 0; l <= hidden; ++l) {
    const bool is_hidden = l < hidden;
    const int nin = net.fan_in(l);
    const int nout = net.fan_out(l);
    const double* w = p.data() + net.weight_offset(l);
    const double* b = p.data() + net.bias_offset(l);
    next.assign(static_cast<std::size_t>(nout) * nx, 0.0);
    for (int j = 0; j < nout; ++j) {
      double* dst = next.data() + static_cast<std::size_t>(j) * nx;
      std::fill(dst, dst + nx, b[j]);
      const double* wj = w + static_cast<std::size_t>(j) * nin;
      if (l == 0) {
        for (std::size_t s = 0; s < nx; ++s) dst[s] += wj[0] * xs[s];
      } else {
        for (int i = 0; i < nin; ++i) {
          const double wij = wj[i];
          const double* src = cur.data() + static_cast<std::size_t>(i) * nx;
          for (std::size_t s = 0; s < nx; ++s) dst[s] += wij * src[s];
        }
      }
      if (is_hidden) {
        const double m =
            (mask && !mask->scales.empty()) ? mask->scales[static_cast<std::size_t>(l) * width + j] : 1.0;
        for (std::size_t s = 0; s < nx; ++s) dst[s] = std::tanh(dst[s]) * m;
      }
    }
    cur.swap(next);
  }

  // Transpose to row-major (point-major) output.
  std::vector<double> out(nx * out_dim);
  for (int j = 0; j < out_dim; ++j) {
    const double* src = cur.data() + static_cast<std::size_t>(j) * nx;
    for (std::size_t s = 0; s < nx; ++s) out[s * out_dim + j] = src[s];
  }
  return out;
}

std::vector<ad::DualValue> forward(const Mlp& net, double x, const DropoutMask* mask) {
  MlpWorkspace ws;
  forward_triple(net, x, mask, ws);
  std::vector<ad::DualValue> out(net.spec().output_dim);
  for (int j = 0; j < net.spec().output_dim; ++j) {
    out[j] = {ws.out[3 * j + 0], ws.out[3 * j + 1], ws.out[3 * j + 2]};
  }
  return out;
}

AdamState make_adam(std::size_t param_count, double learning_rate) {
  AdamState st;
  st.m.assign(param_count, 0.0);
  st.v.assign(param_count, 0.0);
  st.learning_rate = learning_rate;
  return st;
}

void adam_step(std::span<double> params, std::span<const double> grad,
               AdamState& state) {
  if (params.size() != grad.size() || params.size() != state.m.size()) {
    throw ConfigError("adam_step: size mismatch");
  }
  state.step += 1;
  const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    if (!std::isfinite(g)) {
      throw NumericError("adam_step: non-finite gradient at parameter index " +
                         std::to_string(i));
    }
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / b1t;
    const double vhat = state.v[i] / b2t;
    params[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

double l2_penalty(const Mlp& net) {
  double acc = 0.0;
  for (double t : net.params()) acc += t * t;
  return net.spec().l2_lambda * acc;
}

void save_checkpoint(const Mlp& net, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format is little-endian");
  nlohmann::json header = {
      {"format_version", 1},
      {"input_dim", net.spec().input_dim},
      {"output_dim", net.spec().output_dim},
      {"hidden_layers", net.spec().hidden_layers},
      {"width", net.spec().width},
      {"dropout_p", net.spec().dropout_p},
      {"l2_lambda", net.spec().l2_lambda},
      {"param_count", net.param_count()},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.param_count() * sizeof(double)));
}

Mlp load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("truncated checkpoint: " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.at("format_version").get<int>() != 1) {
    throw DataError("unsupported checkpoint format version in " + path);
  }
  MlpSpec spec;
  spec.input_dim = header.at("input_dim").get<int>();
  spec.output_dim = header.at("output_dim").get<int>();
  spec.hidden_layers = header.at("hidden_layers").get<int>();
  spec.width = header.at("width").get<int>();
  spec.dropout_p = header.at("dropout_p").get<double>();
  spec.l2_lambda = header.at("l2_lambda").get<double>();
  Mlp net(spec);
  const auto count = header.at("param_count").get<std::size_t>();
  if (count != net.param_count()) {
    throw DataError("checkpoint parameter count does not match its spec: " + path);
  }
  in.read(reinterpret_cast<char*>(net.params().data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double)) {
    throw DataError("truncated checkpoint payload: " + path);
  }
  return net;
}

}  // namespace apcnet::nn
