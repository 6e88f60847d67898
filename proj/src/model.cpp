#include "primroute/model.hpp"

#include <cmath>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"
#include "primroute/rng.hpp"

namespace primroute {

namespace {

constexpr std::string_view kMagic = "PRMODEL1";
constexpr std::uint32_t kVersion = 1;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  const auto n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 2) throw DimensionError("model: need at least 2 layers");
  if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
    throw DimensionError("model: num_heads " + std::to_string(num_heads) + " must divide model_dim " +
                         std::to_string(model_dim));
  }
  if (vocab_size < static_cast<std::size_t>(vocab::kFirstReserved)) {
    throw DimensionError("model: vocab_size " + std::to_string(vocab_size) + " smaller than the symbol set");
  }
  if (max_context < 2) throw DimensionError("model: max_context must be at least 2");
  if (intervention_layer < 1 || intervention_layer >= num_layers) {
    throw DimensionError("model: intervention_layer " + std::to_string(intervention_layer) + " outside [1, " +
                         std::to_string(num_layers - 1) + "]");
  }
  if (mlp_multiplier == 0) throw DimensionError("model: mlp_multiplier must be positive");
  if (!(residual_radius >= 0.0) || !std::isfinite(residual_radius)) {
    throw DimensionError("model: residual_radius must be finite and nonnegative");
  }
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  Rng rng(derive_seed(seed, "model-init"));
  const std::size_t d = config.model_dim, md = d * config.mlp_multiplier;
  const double std = 0.02;
  const double proj_std = std / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  m.token_embedding_ = normal_tensor({config.vocab_size, d}, std, rng);
  m.position_embedding_ = normal_tensor({config.max_context, d}, std, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    BlockWeights b;
    b.ln1_gain = Tensor::full({d}, 1.0);
    b.ln1_bias = Tensor::zeros({d});
    b.w_q = normal_tensor({d, d}, std, rng);
    b.b_q = Tensor::zeros({d});
    b.w_k = normal_tensor({d, d}, std, rng);
    b.b_k = Tensor::zeros({d});
    b.w_v = normal_tensor({d, d}, std, rng);
    b.b_v = Tensor::zeros({d});
    b.w_out = normal_tensor({d, d}, proj_std, rng);
    b.b_out = Tensor::zeros({d});
    b.ln2_gain = Tensor::full({d}, 1.0);
    b.ln2_bias = Tensor::zeros({d});
    b.w_fc = normal_tensor({d, md}, std, rng);
    b.b_fc = Tensor::zeros({md});
    b.w_proj = normal_tensor({md, d}, proj_std, rng);
    b.b_proj = Tensor::zeros({d});
    m.blocks_.push_back(std::move(b));
  }
  m.final_gain_ = Tensor::full({d}, 1.0);
  m.final_bias_ = Tensor::zeros({d});
  m.w_head_ = normal_tensor({d, config.vocab_size}, std, rng);
  for (auto& p : m.parameters()) p.set_tracked(true);
  m.radius_gain_ = Tensor::full({d}, config.residual_radius / std::sqrt(static_cast<double>(d)));
  m.radius_bias_ = Tensor::zeros({d});
  return m;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out{token_embedding_, position_embedding_};
  for (const auto& b : blocks_) {
    for (const Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.w_q, &b.b_q, &b.w_k, &b.b_k, &b.w_v, &b.b_v, &b.w_out,
                            &b.b_out, &b.ln2_gain, &b.ln2_bias, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj}) {
      out.push_back(*t);
    }
  }
  out.push_back(final_gain_);
  out.push_back(final_bias_);
  out.push_back(w_head_);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void Model::freeze() {
  for (auto& p : parameters()) {
    p.clear_grad();
    p.set_tracked(false);
    for (double& v : p.mutable_values()) v = round_to_f32(v);
  }
  auto to_float = [](const Tensor& t) {
    std::vector<float> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.values()[i]);
    return out;
  };
  auto packed = std::make_shared<PackedWeights>();
  for (const auto& b : blocks_) {
    packed->blocks.push_back({to_float(b.w_q), to_float(b.w_k), to_float(b.w_v), to_float(b.w_out), to_float(b.w_fc),
                              to_float(b.w_proj)});
  }
  packed->w_head = to_float(w_head_);
  packed_ = std::move(packed);
  frozen_ = true;
}

const PackedWeights& Model::packed() const {
  if (!frozen_ || !packed_) throw std::logic_error("model must be frozen before incremental inference");
  return *packed_;
}

std::uint64_t Model::fingerprint() const {
  ByteWriter w;
  for (const auto& p : parameters()) {
    for (double v : p.values()) w.f32(static_cast<float>(v));
  }
  return w.hash();
}

Tensor Model::embed(std::span<const Token> tokens, std::span<const int> positions) const {
  if (tokens.size() != positions.size()) throw DimensionError("embed: tokens and positions differ in length");
  for (int p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= config_.max_context) {
      throw DimensionError("embed: position " + std::to_string(p) + " exceeds max_context " +
                           std::to_string(config_.max_context));
    }
  }
  return add(gather_rows(token_embedding_, tokens), gather_rows(position_embedding_, positions));
}

Tensor Model::block(std::size_t layer, const Tensor& x, const AttentionLayout& layout, const Tensor* prefix_k,
                    const Tensor* prefix_v) const {
  if (layer < 1 || layer > config_.num_layers) throw DimensionError("block: layer out of range");
  const auto& b = blocks_[layer - 1];
  const Tensor h = layer_norm(x, b.ln1_gain, b.ln1_bias);
  const Tensor q = add(matmul(h, b.w_q), b.b_q);
  Tensor k = add(matmul(h, b.w_k), b.b_k);
  Tensor v = add(matmul(h, b.w_v), b.b_v);
  if (prefix_k != nullptr) {
    const Tensor kparts[] = {*prefix_k, k};
    const Tensor vparts[] = {*prefix_v, v};
    k = concat_rows(kparts);
    v = concat_rows(vparts);
  }
  const Tensor a = attention(q, k, v, config_.num_heads, layout);
  const Tensor x1 = add(x, add(matmul(a, b.w_out), b.b_out));
  const Tensor h2 = layer_norm(x1, b.ln2_gain, b.ln2_bias);
  const Tensor f = gelu(add(matmul(h2, b.w_fc), b.b_fc));
  const Tensor out = add(x1, add(matmul(f, b.w_proj), b.b_proj));
  if (config_.residual_radius == 0.0) return out;
  return layer_norm(out, radius_gain_, radius_bias_);
}

Tensor Model::head(const Tensor& x) const {
  return matmul(layer_norm(x, final_gain_, final_bias_), w_head_);
}

Tensor Model::forward(std::span<const Token> tokens, std::span<const std::size_t> segment_lengths) const {
  std::size_t total = 0;
  for (auto n : segment_lengths) {
    if (n > config_.max_context) throw DimensionError("forward: sequence longer than max_context");
    total += n;
  }
  if (total != tokens.size() || total == 0) throw DimensionError("forward: segment lengths do not cover tokens");
  const auto layout = AttentionLayout::packed_causal(segment_lengths);
  Tensor x = embed(tokens, layout.query_position);
  for (std::size_t l = 1; l <= config_.num_layers; ++l) x = block(l, x, layout);
  return head(x);
}

void Model::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.magic(kMagic);
  w.u32(kVersion);
  for (std::size_t v : {config_.num_layers, config_.model_dim, config_.num_heads, config_.vocab_size,
                        config_.max_context, config_.intervention_layer, config_.mlp_multiplier}) {
    w.u64(v);
  }
  w.f64(config_.residual_radius);
  for (const auto& p : parameters()) {
    for (double v : p.values()) w.f32(static_cast<float>(v));
  }
  w.u64(w.hash());
  write_file_bytes(path, w.buffer());
}

Model Model::load(const std::filesystem::path& path) {
  ByteReader r(read_file_bytes(path), path.string());
  if (r.size() < 8) throw FormatError(path.string() + ": file too short for a model checkpoint");
  r.expect_magic(kMagic);
  const auto version = r.u32();
  if (version != kVersion) throw FormatError(path.string() + ": unsupported model version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = r.u64();
  c.model_dim = r.u64();
  c.num_heads = r.u64();
  c.vocab_size = r.u64();
  c.max_context = r.u64();
  c.intervention_layer = r.u64();
  c.mlp_multiplier = r.u64();
  c.residual_radius = r.f64();
  try {
    c.validate();
  } catch (const DimensionError& e) {
    throw FormatError(path.string() + ": invalid config in header: " + e.what());
  }
  if (c.model_dim > 4096 || c.num_layers > 256 || c.vocab_size > 65536 || c.max_context > 65536) {
    throw FormatError(path.string() + ": implausible config in header");
  }
  Model m = initialize(c, 0);
  for (auto& p : m.parameters()) {
    for (double& v : p.mutable_values()) v = static_cast<double>(r.f32());
  }
  const std::size_t body = r.position();
  const std::uint64_t stored = r.u64();
  if (fnv1a64(r.prefix(body)) != stored) throw FormatError(path.string() + ": content hash mismatch");
  if (r.position() != r.size()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  m.freeze();
  return m;
}

}  // namespace primroute
