#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "primroute/model.hpp"
#include "primroute/rng.hpp"

namespace primroute {

/// Incremental decoder over a frozen model with a per-layer key/value cache.
///
/// Each token is processed in two halves split at `split_layer`: lower() runs
/// the embedding and blocks 1..split_layer, upper() runs the remaining blocks
/// and the head. Both halves use fixed-order row kernels, so the result does
/// not depend on how a sequence is chunked.
class Decoder {
 public:
  Decoder(const Model& model, std::size_t split_layer);

  const Model& model() const { return *model_; }
  std::size_t split_layer() const { return split_layer_; }
  /// Tokens whose lower half has run.
  const Tokens& tokens() const { return tokens_; }
  /// Number of cached rows at a 1-based layer.
  std::size_t cached_rows(std::size_t layer) const { return keys_.at(layer - 1).size() / dim_; }

  /// Lower half for the next token; appends lower-layer keys/values and returns
  /// the hidden at split_layer. Throws DimensionError past max_context.
  std::vector<double> lower(Token token);
  /// Upper half for one hidden; appends upper-layer keys/values and returns logits.
  std::vector<double> upper(std::span<const double> hidden);
  /// Same as upper() without touching the cache.
  std::vector<double> peek_upper(std::span<const double> hidden) const;
  /// lower() then upper() with an optional additive injection at split_layer.
  std::vector<double> feed(Token token, std::span<const double> injection = {});

  /// Split-layer hidden recorded by lower() for each position (before injection).
  std::span<const double> split_hidden(std::size_t position) const;
  /// Cached keys/values of a 1-based layer as [rows x d] row-major.
  const std::vector<double>& keys(std::size_t layer) const { return keys_.at(layer - 1); }
  const std::vector<double>& values(std::size_t layer) const { return values_.at(layer - 1); }

  struct Mark {
    std::vector<std::size_t> rows;
    std::size_t tokens = 0;
  };
  Mark mark() const;
  /// Truncates every cache back to a previous mark.
  void rollback(const Mark& mark);

 private:
  const Model* model_;
  std::size_t split_layer_;
  std::size_t dim_;
  std::vector<std::vector<double>> keys_, values_;
  Tokens tokens_;
  std::vector<double> split_hidden_;
};

/// Layer-major full pass using the decoder's row kernels; [n x V] logits.
std::vector<std::vector<double>> forward_logits(const Model& model, std::span<const Token> tokens);

/// Last-token hidden at a layer plus everything needed to resume from the next layer.
struct ActivationState {
  std::vector<double> hidden;
  std::size_t layer = 0;
  Tokens prefix;
  std::shared_ptr<const Decoder> resume;
};

/// Throws DimensionError for empty or overlong sequences or a layer outside [1, L-1].
ActivationState forward_to_layer(const Model& model, std::span<const Token> tokens, std::size_t layer);
/// Next-token logits from a (possibly modified) state. Pure. Throws DataError
/// when the resume context does not belong to the state's prefix or model.
std::vector<double> continue_from_layer(const Model& model, const ActivationState& state);

struct Sampling {
  bool greedy = true;
  double temperature = 1.0;

  static Sampling greedy_decoding() { return {}; }
  static Sampling with_temperature(double t) { return {false, t}; }
};

/// Greedy picks the lowest-index argmax; otherwise samples softmax(logits / t).
/// Throws NumericError on non-finite logits.
Token decode_token(std::span<const double> logits, const Sampling& sampling, Rng* rng = nullptr);

/// Log-probability of `token` under softmax(logits / temperature).
double token_log_prob(std::span<const double> logits, Token token, double temperature = 1.0);

struct GenerateOptions {
  /// Injection layer; 0 means the model's configured intervention layer.
  std::size_t layer = 0;
  /// Inject only at the first decoding step instead of at every step.
  bool single_shot = false;
};

struct GenerationResult {
  Tokens tokens;
  /// Number of generated tokens, including the end marker if produced.
  std::size_t count = 0;
  /// Log-probability of each sampled token under the sampling distribution.
  std::vector<double> log_probs;
};

/// Continues decoding from a decoder that has processed every prompt token
/// except `last_prompt_token`. The decoder is advanced in place.
GenerationResult generate_from(Decoder& decoder, Token last_prompt_token, const std::vector<double>* steer,
                               std::size_t max_steps, const Sampling& sampling, std::uint64_t seed = 0,
                               bool single_shot = false);

/// Decoder that has processed all but the last prompt token.
Decoder prefill(const Model& model, std::span<const Token> prompt, std::size_t layer);

/// Decodes up to max_steps tokens, adding `steer` to the last-token hidden at
/// the injection layer at every step. Stops after the end marker or when the
/// context is full.
GenerationResult generate(const Model& model, std::span<const Token> prompt, const std::vector<double>* steer,
                          std::size_t max_steps, const Sampling& sampling, std::uint64_t seed = 0,
                          const GenerateOptions& options = {});

}  // namespace primroute
