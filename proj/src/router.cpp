#include "primroute/router.hpp"

#include <cmath>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"

namespace primroute {

namespace {

constexpr std::string_view kRouterMagic = "PRROUTE1";
constexpr std::uint32_t kRouterVersion = 1;

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from({rows, cols}, std::move(v));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Row standardization without learned parameters.
Tensor standardize(const Tensor& h) {
  const std::size_t d = h.dim(1);
  static thread_local Tensor ones, zeros;
  if (!ones.defined() || ones.numel() != d) {
    ones = Tensor::full({d}, 1.0);
    zeros = Tensor::zeros({d});
  }
  return layer_norm(h, ones, zeros);
}

}  // namespace

void RouterConfig::validate() const {
  if (input_dim == 0 || bottleneck == 0 || num_primitives == 0) throw DimensionError("router: zero-sized layer");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("router: tau must lie in (0, 1)");
  if (!(alpha_max > 0.0)) throw std::invalid_argument("router: alpha_max must be positive");
}

double gumbel_sigmoid(double logit, double temperature, double noise) {
  if (!(temperature > 0)) throw std::invalid_argument("gumbel_sigmoid: temperature must be positive");
  return sigmoid_scalar((logit + noise) / temperature);
}

double gumbel_sigmoid(double logit, double temperature, Rng& rng) {
  return gumbel_sigmoid(logit, temperature, rng.logistic());
}

Tensor gumbel_sigmoid(const Tensor& logits, double temperature, std::span<const double> noise) {
  if (!(temperature > 0)) throw std::invalid_argument("gumbel_sigmoid: temperature must be positive");
  if (noise.size() != logits.numel()) throw DimensionError("gumbel_sigmoid: one noise draw per logit");
  const Tensor n = Tensor::from(logits.shape(), std::vector<double>(noise.begin(), noise.end()));
  return sigmoid(scale(add(logits, n), 1.0 / temperature));
}

Router Router::initialize(const RouterConfig& config, std::uint64_t seed) {
  config.validate();
  Router r;
  r.config_ = config;
  Rng rng(derive_seed(seed, "router-init"));
  const std::size_t d = config.input_dim, b = config.bottleneck, k = config.num_primitives;
  r.w1_ = random_matrix(d, b, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  r.b1_ = Tensor::zeros({b});
  r.w_gate_ = random_matrix(b, k, 0.1 / std::sqrt(static_cast<double>(b)), rng);
  r.b_gate_ = Tensor::zeros({k});
  r.w_strength_ = random_matrix(b, k, 0.1 / std::sqrt(static_cast<double>(b)), rng);
  // Strengths start mid-range; for the sigmoid head that is a zero bias.
  r.b_strength_ = Tensor::full({k}, config.strength_head == StrengthHead::kClip ? config.alpha_max / 2.0 : 0.0);
  for (auto& p : r.parameters()) p.set_tracked(true);
  return r;
}

std::vector<Tensor> Router::parameters() const { return {w1_, b1_, w_gate_, b_gate_, w_strength_, b_strength_}; }

std::size_t Router::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

RouterTape Router::forward(const Tensor& hiddens) const {
  if (hiddens.rank() != 2 || hiddens.dim(1) != config_.input_dim) {
    throw DimensionError("router: expected [n x " + std::to_string(config_.input_dim) + "] input, got " +
                         shape_string(hiddens.shape()));
  }
  RouterTape t;
  const Tensor z = gelu(add(matmul(standardize(hiddens), w1_), b1_));
  t.gate_logits = add(matmul(z, w_gate_), b_gate_);
  t.strength_raw = add(matmul(z, w_strength_), b_strength_);
  t.p = sigmoid(t.gate_logits);
  t.alpha = config_.strength_head == StrengthHead::kClip ? clip(t.strength_raw, 0.0, config_.alpha_max)
                                                         : scale(sigmoid(t.strength_raw), config_.alpha_max);
  return t;
}

RoutingDecision Router::route(std::span<const double> hidden, RouteMode mode, std::uint64_t seed,
                              double temperature) const {
  if (hidden.size() != config_.input_dim) {
    throw DimensionError("route: hidden has length " + std::to_string(hidden.size()) + ", expected " +
                         std::to_string(config_.input_dim));
  }
  const auto t = forward(Tensor::matrix(1, hidden.size(), std::vector<double>(hidden.begin(), hidden.end())));
  const std::size_t k = config_.num_primitives;
  for (std::size_t i = 0; i < k; ++i) {
    if (!std::isfinite(t.gate_logits.at(i)) || !std::isfinite(t.strength_raw.at(i))) {
      throw NumericError("route: non-finite head output for primitive " + std::to_string(i) +
                         " (gate logit " + std::to_string(t.gate_logits.at(i)) + ", strength " +
                         std::to_string(t.strength_raw.at(i)) + ")");
    }
  }
  RoutingDecision d;
  d.mode = mode;
  d.p.assign(t.p.values().begin(), t.p.values().end());
  d.alpha.assign(t.alpha.values().begin(), t.alpha.values().end());
  d.w.resize(k);
  if (mode == RouteMode::kInfer) {
    for (std::size_t i = 0; i < k; ++i) d.w[i] = d.p[i] > config_.tau ? 1.0 : 0.0;
  } else {
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
      const double g = gumbel_sigmoid(t.gate_logits.at(i), temperature, rng);
      d.w[i] = config_.straight_through ? (g > 0.5 ? 1.0 : 0.0) : g;
    }
  }
  return d;
}

void Router::save(const std::filesystem::path& path) {
  for (auto& p : parameters())
    for (double& v : p.mutable_values()) v = round_to_f32(v);
  ByteWriter w;
  w.magic(kRouterMagic);
  w.u32(kRouterVersion);
  w.u64(config_.input_dim);
  w.u64(config_.bottleneck);
  w.u64(config_.num_primitives);
  w.f64(config_.tau);
  w.f64(config_.alpha_max);
  w.u32(config_.strength_head == StrengthHead::kClip ? 0 : 1);
  w.u32(config_.straight_through ? 1 : 0);
  w.u64(library_hash_);
  for (const auto& p : parameters())
    for (double v : p.values()) w.f32(static_cast<float>(v));
  w.u64(w.hash());
  write_file_bytes(path, w.buffer());
}

Router Router::load(const std::filesystem::path& path, std::uint64_t expected_library_hash, bool allow_mismatch) {
  ByteReader r(read_file_bytes(path), path.string());
  r.expect_magic(kRouterMagic);
  if (r.u32() != kRouterVersion) throw FormatError(path.string() + ": unsupported router version");
  RouterConfig c;
  c.input_dim = r.u64();
  c.bottleneck = r.u64();
  c.num_primitives = r.u64();
  c.tau = r.f64();
  c.alpha_max = r.f64();
  c.strength_head = r.u32() == 0 ? StrengthHead::kClip : StrengthHead::kSigmoid;
  c.straight_through = r.u32() != 0;
  if (c.input_dim > 65536 || c.bottleneck > 65536 || c.num_primitives > 4096) {
    throw FormatError(path.string() + ": implausible router header");
  }
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": invalid router header: " + e.what());
  }
  const std::uint64_t lib_hash = r.u64();
  Router router = initialize(c, 0);
  for (auto& p : router.parameters())
    for (double& v : p.mutable_values()) v = static_cast<double>(r.f32());
  const std::size_t body = r.position();
  if (fnv1a64(r.prefix(body)) != r.u64()) throw FormatError(path.string() + ": content hash mismatch");
  if (!allow_mismatch && lib_hash != expected_library_hash) {
    throw ProvenanceError(path.string() + ": router was trained against library " + hex64(lib_hash) +
                          " but library " + hex64(expected_library_hash) + " was supplied");
  }
  router.library_hash_ = lib_hash;
  return router;
}

std::vector<double> compose(const RoutingDecision& decision, const PrimitiveLibrary& library) {
  const std::size_t k = library.size();
  if (decision.w.size() != k || decision.alpha.size() != k) {
    throw DimensionError("compose: decision has " + std::to_string(decision.w.size()) + " gates but the library has " +
                         std::to_string(k) + " primitives");
  }
  std::vector<double> v(library.dim(), 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const double s = decision.w[i] * decision.alpha[i];
    for (std::size_t c = 0; c < v.size(); ++c) v[c] += s * library.vectors[i][c];
  }
  return v;
}

Tensor library_matrix(const PrimitiveLibrary& library) {
  std::vector<double> flat;
  flat.reserve(library.size() * library.dim());
  for (const auto& v : library.vectors) flat.insert(flat.end(), v.begin(), v.end());
  return Tensor::matrix(library.size(), library.dim(), std::move(flat));
}

Tensor compose(const Tensor& gates, const Tensor& alpha, const PrimitiveLibrary& library) {
  if (gates.numel() != library.size() || alpha.numel() != library.size()) {
    throw DimensionError("compose: gate/strength width differs from library size");
  }
  const Tensor weights = reshape(mul(gates, alpha), {1, library.size()});
  return matmul(weights, library_matrix(library));
}

std::vector<double> inject(std::span<const double> h, std::span<const double> v_inject) {
  if (h.size() != v_inject.size()) {
    throw DimensionError("inject: hidden has length " + std::to_string(h.size()) + " but injection has " +
                         std::to_string(v_inject.size()));
  }
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] + v_inject[i];
  return out;
}

RoutingDecision top1_only(const RoutingDecision& decision) {
  RoutingDecision out = decision;
  std::size_t best = 0;
  double best_val = -1.0;
  for (std::size_t i = 0; i < decision.w.size(); ++i) {
    const double s = decision.w[i] * decision.alpha[i];
    if (s > best_val) {
      best_val = s;
      best = i;
    }
  }
  for (std::size_t i = 0; i < out.w.size(); ++i)
    if (i != best) out.w[i] = 0.0;
  return out;
}

}  // namespace primroute
