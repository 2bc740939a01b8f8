#pragma once

// Feed-forward MLP with per-layer normalization and GELU, batched over columns.
//
// Hidden layer:  h' = gelu(gain * layernorm(W h + b) + offset)
// Output layer:  y  = W h + b
//
// Batches are column-major: an input batch is [in_dim x batch].

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deas/error.hpp"
#include "deas/io.hpp"

namespace deas::nn {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

enum class Activation : std::uint8_t { Linear = 0, Gelu = 1 };

inline constexpr double kLayerNormEps = 1e-5;

struct Layer {
  MatrixXd weight;     // [out x in]
  VectorXd bias;       // [out]
  VectorXd norm_gain;  // [out], empty when the layer is not normalized
  VectorXd norm_bias;  // [out], empty when the layer is not normalized
  Activation activation = Activation::Linear;

  [[nodiscard]] Eigen::Index in_dim() const { return weight.cols(); }
  [[nodiscard]] Eigen::Index out_dim() const { return weight.rows(); }
  [[nodiscard]] bool normalized() const { return norm_gain.size() > 0; }
};

/// Parameters of an MLP. Gradients and optimizer moments reuse this type.
struct MlpParams {
  std::vector<Layer> layers;

  /// `sizes` = {in, hidden..., out}. Hidden layers get layer norm + GELU.
  static MlpParams zeros(std::span<const int> sizes) {
    require_config(sizes.size() >= 2, "an MLP needs at least input and output sizes");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      require_config(sizes[i] > 0 && sizes[i + 1] > 0, "layer sizes must be positive");
      Layer l;
      l.weight = MatrixXd::Zero(sizes[i + 1], sizes[i]);
      l.bias = VectorXd::Zero(sizes[i + 1]);
      const bool hidden = i + 2 < sizes.size();
      if (hidden) {
        l.norm_gain = VectorXd::Ones(sizes[i + 1]);
        l.norm_bias = VectorXd::Zero(sizes[i + 1]);
        l.activation = Activation::Gelu;
      }
      p.layers.push_back(std::move(l));
    }
    return p;
  }

  /// Fan-in scaled uniform weights, zero biases, unit norm gains.
  template <class Rng>
  static MlpParams init(std::span<const int> sizes, Rng& rng) {
    MlpParams p = zeros(sizes);
    for (auto& l : p.layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_dim()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index k = 0; k < l.weight.size(); ++k) l.weight.data()[k] = u(rng);
    }
    return p;
  }

  /// Same shapes, every entry zero.
  [[nodiscard]] MlpParams zeros_like() const {
    MlpParams z = *this;
    zip([](auto& a) { a.setZero(); }, z);
    return z;
  }

  [[nodiscard]] Eigen::Index in_dim() const { return layers.front().in_dim(); }
  [[nodiscard]] Eigen::Index out_dim() const { return layers.back().out_dim(); }

  [[nodiscard]] std::vector<int> sizes() const {
    std::vector<int> s{static_cast<int>(in_dim())};
    for (const auto& l : layers) s.push_back(static_cast<int>(l.out_dim()));
    return s;
  }

  [[nodiscard]] bool same_architecture(const MlpParams& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto &a = layers[i], &b = o.layers[i];
      if (a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim() || a.normalized() != b.normalized() ||
          a.activation != b.activation)
        return false;
    }
    return true;
  }

  [[nodiscard]] std::size_t num_parameters() const {
    std::size_t n = 0;
    zip([&](const auto& a) { n += static_cast<std::size_t>(a.size()); }, *this);
    return n;
  }

  [[nodiscard]] bool all_finite() const {
    bool ok = true;
    zip([&](const auto& a) { ok = ok && a.allFinite(); }, *this);
    return ok;
  }

  /// Calls f(array_from_p0, array_from_p1, ...) for every parameter array in layer order.
  /// All arguments must share the architecture of the first.
  template <class F, class First, class... Rest>
  static void zip(F&& f, First& first, Rest&... rest) {
    for (std::size_t i = 0; i < first.layers.size(); ++i) {
      f(first.layers[i].weight, rest.layers[i].weight...);
      f(first.layers[i].bias, rest.layers[i].bias...);
      if (first.layers[i].normalized()) {
        f(first.layers[i].norm_gain, rest.layers[i].norm_gain...);
        f(first.layers[i].norm_bias, rest.layers[i].norm_bias...);
      }
    }
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

struct LayerCache {
  MatrixXd input;       // [in x B]
  MatrixXd normalized;  // x-hat, [out x B], empty if not normalized
  RowVectorXd inv_std;  // [B]
  MatrixXd preact;      // value fed to the activation, [out x B]
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

/// Batched forward pass. Fills `cache` when non-null for a later backward().
inline MatrixXd forward(const MlpParams& p, const MatrixXd& x, ForwardCache* cache = nullptr) {
  require_shape(!p.layers.empty(), "forward on an empty network");
  require_shape(x.rows() == p.in_dim(), "forward: input has " + std::to_string(x.rows()) +
                                            " rows, network expects " + std::to_string(p.in_dim()));
  if (cache) cache->layers.resize(p.layers.size());
  MatrixXd h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const Layer& l = p.layers[i];
    MatrixXd z = l.weight * h;
    z.colwise() += l.bias;
    LayerCache* c = cache ? &cache->layers[i] : nullptr;
    if (c) c->input = std::move(h);
    if (l.normalized()) {
      const RowVectorXd mean = z.colwise().mean();
      z.rowwise() -= mean;
      const RowVectorXd var = z.array().square().colwise().mean();
      const RowVectorXd inv = (var.array() + kLayerNormEps).rsqrt();
      z.array().rowwise() *= inv.array();
      if (c) {
        c->normalized = z;
        c->inv_std = inv;
      }
      z = l.norm_gain.asDiagonal() * z;
      z.colwise() += l.norm_bias;
    }
    if (c) c->preact = z;
    if (l.activation == Activation::Gelu) z = z.unaryExpr([](double v) { return gelu(v); });
    h = std::move(z);
  }
  return h;
}

inline VectorXd forward(const MlpParams& p, const VectorXd& x) {
  MatrixXd out = forward(p, MatrixXd(x), nullptr);
  return out.col(0);
}

struct Gradients {
  MlpParams params;
  MatrixXd input;  // dL/dx, [in x B]
};

/// Reverse-mode pass. `output_grad` is dL/dy for the cached batch; parameter
/// gradients are summed over the batch columns.
inline Gradients backward(const MlpParams& p, const ForwardCache& cache, const MatrixXd& output_grad) {
  require_shape(cache.layers.size() == p.layers.size(), "backward: cache does not match network");
  require_shape(output_grad.rows() == p.out_dim() && output_grad.cols() == cache.layers.back().preact.cols(),
                "backward: output gradient shape mismatch");
  Gradients g{p.zeros_like(), {}};
  MatrixXd d = output_grad;
  for (std::size_t ii = p.layers.size(); ii-- > 0;) {
    const Layer& l = p.layers[ii];
    const LayerCache& c = cache.layers[ii];
    Layer& gl = g.params.layers[ii];
    if (l.activation == Activation::Gelu)
      d.array() *= c.preact.unaryExpr([](double v) { return gelu_grad(v); }).array();
    if (l.normalized()) {
      gl.norm_gain = (d.array() * c.normalized.array()).rowwise().sum();
      gl.norm_bias = d.rowwise().sum();
      MatrixXd dxhat = l.norm_gain.asDiagonal() * d;
      const RowVectorXd mean_d = dxhat.colwise().mean();
      const RowVectorXd mean_dx = (dxhat.array() * c.normalized.array()).colwise().mean();
      MatrixXd dz = dxhat;
      dz.rowwise() -= mean_d;
      dz.array() -= c.normalized.array().rowwise() * mean_dx.array();
      dz.array().rowwise() *= c.inv_std.array();
      d = std::move(dz);
    }
    gl.weight.noalias() = d * c.input.transpose();
    gl.bias = d.rowwise().sum();
    MatrixXd dinput = l.weight.transpose() * d;
    d = std::move(dinput);
  }
  g.input = std::move(d);
  return g;
}

// --- checkpoint encoding -------------------------------------------------

inline constexpr std::uint32_t kMlpFormatVersion = 1;

inline void write_mlp(std::ostream& os, const MlpParams& p) {
  io::write_magic(os, "MLP1");
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    io::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(l.in_dim()));
    io::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(l.out_dim()));
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(l.activation));
    io::write_pod<std::uint8_t>(os, l.normalized() ? 1 : 0);
  }
  MlpParams::zip([&](const auto& a) { io::write_doubles(os, a); }, p);
}

inline MlpParams read_mlp(std::istream& is) {
  io::expect_magic(is, "MLP1");
  const auto n = io::read_pod<std::uint32_t>(is);
  if (n == 0 || n > 64) throw FormatError("MLP layer count out of range");
  MlpParams p;
  Eigen::Index prev_out = -1;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto in = io::read_pod<std::uint64_t>(is);
    const auto out = io::read_pod<std::uint64_t>(is);
    const auto act = io::read_pod<std::uint8_t>(is);
    const auto norm = io::read_pod<std::uint8_t>(is);
    if (in == 0 || out == 0 || in > (1u << 20) || out > (1u << 20)) throw FormatError("MLP layer size out of range");
    if (act > 1 || norm > 1) throw FormatError("unknown MLP layer tag");
    if (prev_out >= 0 && static_cast<Eigen::Index>(in) != prev_out) throw FormatError("MLP layer sizes do not chain");
    prev_out = static_cast<Eigen::Index>(out);
    Layer l;
    l.weight.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    l.bias.resize(static_cast<Eigen::Index>(out));
    if (norm) {
      l.norm_gain.resize(static_cast<Eigen::Index>(out));
      l.norm_bias.resize(static_cast<Eigen::Index>(out));
    }
    l.activation = static_cast<Activation>(act);
    p.layers.push_back(std::move(l));
  }
  MlpParams::zip([&](auto& a) { io::read_doubles(is, a); }, p);
  return p;
}

inline void save_mlp(const std::string& path, const MlpParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_magic(os, "DEASNET1");
  io::write_pod(os, kMlpFormatVersion);
  write_mlp(os, p);
}

inline MlpParams load_mlp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  io::expect_magic(is, "DEASNET1");
  if (io::read_pod<std::uint32_t>(is) != kMlpFormatVersion) throw FormatError("unsupported network version");
  return read_mlp(is);
}

}  // namespace deas::nn
