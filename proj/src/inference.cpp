#include "primroute/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "primroute/errors.hpp"

namespace primroute {

namespace {

// Row kernels. Every reduction runs in a fixed sequential order with explicit
// fused multiply-adds so results are independent of batching.

void matvec(const double* x, std::size_t in, const std::vector<float>& w, const Tensor* b, double* y) {
  const std::size_t out = w.size() / in;
  const float* wv = w.data();
  if (b != nullptr) {
    std::copy_n(b->values().data(), out, y);
  } else {
    std::fill_n(y, out, 0.0);
  }
  for (std::size_t k = 0; k < in; ++k) {
    const double xk = x[k];
    const float* row = wv + k * out;
    for (std::size_t j = 0; j < out; ++j) y[j] = std::fma(xk, static_cast<double>(row[j]), y[j]);
  }
}

void layer_norm_row(const double* x, std::size_t d, const Tensor& gain, const Tensor& bias, double* y) {
  double mu = 0.0;
  for (std::size_t i = 0; i < d; ++i) mu += x[i];
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) var = std::fma(x[i] - mu, x[i] - mu, var);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  const double* g = gain.values().data();
  const double* b = bias.values().data();
  for (std::size_t i = 0; i < d; ++i) y[i] = std::fma((x[i] - mu) * inv, g[i], b[i]);
}

/// Attention of one query over `rows` cached keys/values, optionally followed by
/// one extra (uncached) key/value row.
void attend_row(const double* q, const std::vector<double>& keys, const std::vector<double>& values, std::size_t rows,
                const double* extra_k, const double* extra_v, std::size_t d, std::size_t heads, double* out) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t total = rows + (extra_k != nullptr ? 1 : 0);
  std::vector<double> p(total);
  auto key_row = [&](std::size_t t) { return t < rows ? keys.data() + t * d : extra_k; };
  auto value_row = [&](std::size_t t) { return t < rows ? values.data() + t * d : extra_v; };
  std::fill_n(out, d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* qh = q + h * dh;
    double mx = -INFINITY;
    for (std::size_t t = 0; t < total; ++t) {
      const double* kh = key_row(t) + h * dh;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s = std::fma(qh[c], kh[c], s);
      p[t] = s * scale;
      mx = std::max(mx, p[t]);
    }
    double sum = 0.0;
    for (std::size_t t = 0; t < total; ++t) {
      p[t] = std::exp(p[t] - mx);
      sum += p[t];
    }
    double* oh = out + h * dh;
    for (std::size_t t = 0; t < total; ++t) {
      const double pt = p[t] / sum;
      const double* vh = value_row(t) + h * dh;
      for (std::size_t c = 0; c < dh; ++c) oh[c] = std::fma(pt, vh[c], oh[c]);
    }
  }
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * (std::numbers::sqrt2 / 2.0))); }

/// One block on one row. With commit the row's key/value is appended to the
/// cache before attending; without, it is attended as an extra row.
void block_row(const Model& model, std::size_t layer, std::vector<double>& x, std::vector<double>& keys,
               std::vector<double>& values, bool commit) {
  const auto& cfg = model.config();
  const std::size_t d = cfg.model_dim, md = d * cfg.mlp_multiplier;
  const auto& b = model.block_weights(layer);
  const auto& pk = model.packed().blocks[layer - 1];
  std::vector<double> h(d), q(d), k(d), v(d), a(d), o(d), f(md), y(d);
  layer_norm_row(x.data(), d, b.ln1_gain, b.ln1_bias, h.data());
  matvec(h.data(), d, pk.w_q, &b.b_q, q.data());
  matvec(h.data(), d, pk.w_k, &b.b_k, k.data());
  matvec(h.data(), d, pk.w_v, &b.b_v, v.data());
  if (commit) {
    keys.insert(keys.end(), k.begin(), k.end());
    values.insert(values.end(), v.begin(), v.end());
    attend_row(q.data(), keys, values, keys.size() / d, nullptr, nullptr, d, cfg.num_heads, a.data());
  } else {
    attend_row(q.data(), keys, values, keys.size() / d, k.data(), v.data(), d, cfg.num_heads, a.data());
  }
  matvec(a.data(), d, pk.w_out, &b.b_out, o.data());
  for (std::size_t i = 0; i < d; ++i) x[i] += o[i];
  layer_norm_row(x.data(), d, b.ln2_gain, b.ln2_bias, h.data());
  matvec(h.data(), d, pk.w_fc, &b.b_fc, f.data());
  for (auto& z : f) z = gelu_scalar(z);
  matvec(f.data(), md, pk.w_proj, &b.b_proj, y.data());
  for (std::size_t i = 0; i < d; ++i) x[i] += y[i];
  if (cfg.residual_radius != 0.0) {
    layer_norm_row(x.data(), d, model.radius_gain(), model.radius_bias(), y.data());
    x = y;
  }
}

std::vector<double> embed_row(const Model& model, Token token, std::size_t position) {
  const auto& cfg = model.config();
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw DimensionError("token " + std::to_string(token) + " outside vocabulary");
  }
  if (position >= cfg.max_context) {
    throw DimensionError("sequence exceeds max_context " + std::to_string(cfg.max_context));
  }
  const std::size_t d = cfg.model_dim;
  std::vector<double> x(d);
  const double* te = model.token_embedding().values().data() + static_cast<std::size_t>(token) * d;
  const double* pe = model.position_embedding().values().data() + position * d;
  for (std::size_t i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  return x;
}

std::vector<double> head_row(const Model& model, const std::vector<double>& x) {
  const std::size_t d = model.config().model_dim;
  std::vector<double> h(d), logits(model.config().vocab_size);
  layer_norm_row(x.data(), d, model.final_gain(), model.final_bias(), h.data());
  matvec(h.data(), d, model.packed().w_head, nullptr, logits.data());
  return logits;
}

}  // namespace

Decoder::Decoder(const Model& model, std::size_t split_layer)
    : model_(&model), split_layer_(split_layer), dim_(model.config().model_dim) {
  if (split_layer < 1 || split_layer >= model.config().num_layers) {
    throw DimensionError("decoder: split layer " + std::to_string(split_layer) + " outside [1, " +
                         std::to_string(model.config().num_layers - 1) + "]");
  }
  keys_.resize(model.config().num_layers);
  values_.resize(model.config().num_layers);
}

std::vector<double> Decoder::lower(Token token) {
  std::vector<double> x = embed_row(*model_, token, tokens_.size());
  for (std::size_t l = 1; l <= split_layer_; ++l) block_row(*model_, l, x, keys_[l - 1], values_[l - 1], true);
  tokens_.push_back(token);
  split_hidden_.insert(split_hidden_.end(), x.begin(), x.end());
  return x;
}

std::vector<double> Decoder::upper(std::span<const double> hidden) {
  if (hidden.size() != dim_) throw DimensionError("decoder: hidden has wrong length");
  std::vector<double> x(hidden.begin(), hidden.end());
  for (std::size_t l = split_layer_ + 1; l <= model_->config().num_layers; ++l) {
    block_row(*model_, l, x, keys_[l - 1], values_[l - 1], true);
  }
  return head_row(*model_, x);
}

std::vector<double> Decoder::peek_upper(std::span<const double> hidden) const {
  if (hidden.size() != dim_) throw DimensionError("decoder: hidden has wrong length");
  std::vector<double> x(hidden.begin(), hidden.end());
  for (std::size_t l = split_layer_ + 1; l <= model_->config().num_layers; ++l) {
    // block_row only reads the cache when commit is false.
    block_row(*model_, l, x, const_cast<std::vector<double>&>(keys_[l - 1]),
              const_cast<std::vector<double>&>(values_[l - 1]), false);
  }
  return head_row(*model_, x);
}

std::vector<double> Decoder::feed(Token token, std::span<const double> injection) {
  std::vector<double> h = lower(token);
  if (!injection.empty()) {
    if (injection.size() != dim_) throw DimensionError("decoder: injection has wrong length");
    for (std::size_t i = 0; i < dim_; ++i) h[i] += injection[i];
  }
  return upper(h);
}

std::span<const double> Decoder::split_hidden(std::size_t position) const {
  if (position >= tokens_.size()) throw DimensionError("decoder: no hidden recorded for that position");
  return std::span<const double>(split_hidden_).subspan(position * dim_, dim_);
}

Decoder::Mark Decoder::mark() const {
  Mark m;
  for (const auto& k : keys_) m.rows.push_back(k.size() / dim_);
  m.tokens = tokens_.size();
  return m;
}

void Decoder::rollback(const Mark& mark) {
  if (mark.rows.size() != keys_.size()) throw DimensionError("decoder: mark from a different model");
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    if (mark.rows[l] > keys_[l].size() / dim_) throw DimensionError("decoder: cannot roll forward");
    keys_[l].resize(mark.rows[l] * dim_);
    values_[l].resize(mark.rows[l] * dim_);
  }
  tokens_.resize(mark.tokens);
  split_hidden_.resize(mark.tokens * dim_);
}

std::vector<std::vector<double>> forward_logits(const Model& model, std::span<const Token> tokens) {
  if (tokens.empty()) throw DimensionError("forward_logits: empty sequence");
  const auto& cfg = model.config();
  if (tokens.size() > cfg.max_context) throw DimensionError("forward_logits: sequence exceeds max_context");
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < tokens.size(); ++i) rows.push_back(embed_row(model, tokens[i], i));
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    std::vector<double> keys, values;
    for (auto& x : rows) block_row(model, l, x, keys, values, true);
  }
  std::vector<std::vector<double>> logits;
  for (const auto& x : rows) logits.push_back(head_row(model, x));
  return logits;
}

ActivationState forward_to_layer(const Model& model, std::span<const Token> tokens, std::size_t layer) {
  if (tokens.empty()) throw DimensionError("forward_to_layer: empty token sequence");
  if (tokens.size() > model.config().max_context) {
    throw DimensionError("forward_to_layer: " + std::to_string(tokens.size()) + " tokens exceed max_context " +
                         std::to_string(model.config().max_context));
  }
  auto dec = std::make_shared<Decoder>(model, layer);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) dec->upper(dec->lower(tokens[i]));
  ActivationState state;
  state.hidden = dec->lower(tokens.back());
  state.layer = layer;
  state.prefix.assign(tokens.begin(), tokens.end());
  state.resume = std::move(dec);
  return state;
}

std::vector<double> continue_from_layer(const Model& model, const ActivationState& state) {
  const auto& dec = state.resume;
  if (!dec) throw DataError("continue_from_layer: state has no resume context");
  const std::size_t n = state.prefix.size();
  const bool fresh = &dec->model() == &model && dec->split_layer() == state.layer && dec->tokens() == state.prefix &&
                     dec->cached_rows(1) == n && dec->cached_rows(model.config().num_layers) + 1 == n;
  if (!fresh) throw DataError("continue_from_layer: stale resume context (prefix or cache mismatch)");
  return dec->peek_upper(state.hidden);
}

Token decode_token(std::span<const double> logits, const Sampling& sampling, Rng* rng) {
  if (logits.empty()) throw DimensionError("decode_token: empty logits");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericError("decode_token: non-finite logit at index " + std::to_string(i));
  }
  if (sampling.greedy) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (!(sampling.temperature > 0)) throw NumericError("decode_token: temperature must be positive");
  if (rng == nullptr) throw std::invalid_argument("decode_token: sampling needs a random stream");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp((logits[i] - mx) / sampling.temperature));
  double u = rng->uniform() * total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return static_cast<Token>(i);
    u -= p[i];
  }
  // Rounding can leave u just above the last mass; fall back to the last nonzero entry.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0) return static_cast<Token>(i);
  }
  return 0;
}

double token_log_prob(std::span<const double> logits, Token token, double temperature) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp((z - mx) / temperature);
  return (logits[static_cast<std::size_t>(token)] - mx) / temperature - std::log(total);
}

Decoder prefill(const Model& model, std::span<const Token> prompt, std::size_t layer) {
  if (prompt.empty()) throw DimensionError("prefill: empty prompt");
  if (prompt.size() > model.config().max_context) throw DimensionError("prefill: prompt exceeds max_context");
  Decoder dec(model, layer);
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) dec.upper(dec.lower(prompt[i]));
  return dec;
}

GenerationResult generate_from(Decoder& dec, Token last_prompt_token, const std::vector<double>* steer,
                               std::size_t max_steps, const Sampling& sampling, std::uint64_t seed,
                               bool single_shot) {
  if (max_steps == 0) throw std::invalid_argument("generate: max_steps must be at least 1");
  const std::size_t d = dec.model().config().model_dim;
  if (steer != nullptr && steer->size() != d) {
    throw DimensionError("generate: steering vector has length " + std::to_string(steer->size()) + ", expected " +
                         std::to_string(d));
  }
  Rng rng(seed);
  GenerationResult out;
  Token next = last_prompt_token;
  for (std::size_t step = 0; step < max_steps; ++step) {
    std::vector<double> h = dec.lower(next);
    if (steer != nullptr && (step == 0 || !single_shot)) {
      for (std::size_t i = 0; i < d; ++i) h[i] += (*steer)[i];
    }
    const auto logits = dec.upper(h);
    next = decode_token(logits, sampling, &rng);
    out.tokens.push_back(next);
    out.log_probs.push_back(token_log_prob(logits, next, sampling.greedy ? 1.0 : sampling.temperature));
    if (next == vocab::kEos || dec.tokens().size() >= dec.model().config().max_context) break;
  }
  out.count = out.tokens.size();
  return out;
}

GenerationResult generate(const Model& model, std::span<const Token> prompt, const std::vector<double>* steer,
                          std::size_t max_steps, const Sampling& sampling, std::uint64_t seed,
                          const GenerateOptions& options) {
  const std::size_t layer = options.layer == 0 ? model.config().intervention_layer : options.layer;
  Decoder dec = prefill(model, prompt, layer);
  return generate_from(dec, prompt.back(), steer, max_steps, sampling, seed, options.single_shot);
}

}  // namespace primroute
