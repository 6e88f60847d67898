#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "primroute/tensor.hpp"
#include "primroute/vocab.hpp"

namespace primroute {

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = vocab::kSize;
  std::size_t max_context = 128;
  /// Layer whose output residual is read and steered (1-based, < num_layers).
  std::size_t intervention_layer = 5;
  std::size_t mlp_multiplier = 4;
  /// The residual stream is re-normalized to this L2 radius after every block
  /// (parameter-free layer norm times radius / sqrt(d)). 0 disables.
  double residual_radius = 3.0;

  /// Throws DimensionError describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v;  // [d x d], [d]
  Tensor w_out, b_out;  // [d x d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc, b_fc;      // [d x md], [md]
  Tensor w_proj, b_proj;  // [md x d], [d]
};

/// Pre-norm decoder-only transformer with learned positions and an untied head.
///
/// Layers are numbered 1..L. "Hidden at layer l" is the residual stream after
/// block l; layer 0 is the embedding sum.
/// Binary32 copies of the weight matrices used by the row kernels. Exact,
/// since frozen weights are binary32-representable.
struct PackedWeights {
  struct Block {
    std::vector<float> w_q, w_k, w_v, w_out, w_fc, w_proj;
  };
  std::vector<Block> blocks;
  std::vector<float> w_head;
};

class Model {
 public:
  static Model initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  /// Every parameter in checkpoint order.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Rounds weights to binary32, stops tracking, and records the fingerprint.
  void freeze();
  bool frozen() const { return frozen_; }
  /// Throws std::logic_error if the model is not frozen.
  const PackedWeights& packed() const;
  /// Hash of the binary32 weight blob; recomputed from the current weights.
  std::uint64_t fingerprint() const;

  // Differentiable pieces, used for pretraining and for the routed-policy tape.
  /// Token plus position embeddings, [n x d].
  Tensor embed(std::span<const Token> tokens, std::span<const int> positions) const;
  /// One block (1-based). When prefix_k/prefix_v are given they are prepended
  /// as constant keys/values; the layout must describe prefix rows first.
  Tensor block(std::size_t layer, const Tensor& x, const AttentionLayout& layout, const Tensor* prefix_k = nullptr,
               const Tensor* prefix_v = nullptr) const;
  /// Final norm and unembedding, [n x V].
  Tensor head(const Tensor& x) const;
  /// Full pass over sequences packed back to back; returns [n x V] logits.
  Tensor forward(std::span<const Token> tokens, std::span<const std::size_t> segment_lengths) const;

  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& position_embedding() const { return position_embedding_; }
  const BlockWeights& block_weights(std::size_t layer) const { return blocks_.at(layer - 1); }
  const Tensor& final_gain() const { return final_gain_; }
  const Tensor& final_bias() const { return final_bias_; }
  const Tensor& w_head() const { return w_head_; }
  /// Constant gain/bias of the post-block renormalization (radius / sqrt(d), 0).
  const Tensor& radius_gain() const { return radius_gain_; }
  const Tensor& radius_bias() const { return radius_bias_; }

  void save(const std::filesystem::path& path) const;
  /// Verifies magic, version, sizes and the trailing content hash.
  static Model load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  Tensor token_embedding_, position_embedding_;
  std::vector<BlockWeights> blocks_;
  Tensor final_gain_, final_bias_, w_head_;
  Tensor radius_gain_, radius_bias_;
  bool frozen_ = false;
  std::shared_ptr<const PackedWeights> packed_;
};

}  // namespace primroute
