#pragma once

// Miniature multi-head causal decoder.
//
// Layer structure (no positional encoding, no normalisation):
//   Q, K, V = X W_Q, X W_K, X W_V                 (split into H heads of width D_h)
//   A_h     = softmax(Q_h K_h^T / sqrt(D_h) + M)  (M causal, entries {0, -inf})
//   O_h     = A_h V_h
//   X'      = X + [O_1 ... O_H] W_O
//   X_out   = X' + tanh(X' W_in) W_out
//
// Interventions attach through LayerHooks, which the forward pass calls at
// fixed points: sink detection on the layer input, after the Q/K/V
// projections, after the per-head outputs, and after the layer output (token
// retention). Incremental decoding calls the decode_* hooks instead.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "sinklab/numerics.hpp"
#include "sinklab/sink_set.hpp"

namespace sinklab {

struct DecoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::uint64_t seed = 0;

  // Throws ConfigError unless hidden_dim == num_heads * head_dim and every
  // width is at least 1. num_layers may be 0.
  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

// Modality tokens occupy [0, num_modality), text tokens [num_modality, total()).
struct TokenLayout {
  std::size_t num_modality = 0;
  std::size_t num_text = 1;

  std::size_t total() const { return num_modality + num_text; }
  bool is_modality(std::size_t pos) const { return pos < num_modality; }
  void validate() const;
};

struct LayerWeights {
  Matrix w_q;      // D x D, head h owns columns [h*D_h, (h+1)*D_h)
  Matrix w_k;      // D x D
  Matrix w_v;      // D x D
  Matrix w_o;      // D x D, head h owns rows [h*D_h, (h+1)*D_h)
  Matrix ffn_in;   // D x F
  Matrix ffn_out;  // F x D

  bool operator==(const LayerWeights&) const = default;
};

struct Model {
  DecoderConfig config;
  std::vector<LayerWeights> layers;

  // Shape and finiteness check; throws SchemaError naming layer and tensor.
  void validate() const;
  bool operator==(const Model&) const = default;
};

struct HeadState {
  Matrix q;       // N x D_h
  Matrix k;       // N x D_h
  Matrix v;       // N x D_h
  Matrix logits;  // N x N, masked entries are -inf
  Matrix attn;    // N x N
  Matrix out;     // N x D_h
};

struct AttentionState {
  std::size_t layer = 0;
  Matrix mask;  // N x N causal mask
  std::vector<HeadState> heads;
  SinkSet sinks;
  // Relaxed (unmasked) attention rows for the sink queries, one |S| x N matrix
  // per head. Filled only on layers where mask relaxation ran.
  std::vector<Matrix> relaxed_attn;
  // [O_1 ... O_H] W_O after all hooks.
  Matrix projected;

  std::size_t num_tokens() const { return mask.rows(); }
};

// hidden[0] is the decoder input; hidden[l + 1] is the output of layer l.
// positions[l] maps each row of hidden[l] to its position in the input
// sequence (identity unless tokens were pruned).
struct HiddenStates {
  std::vector<Matrix> layers;
  std::vector<std::vector<std::size_t>> positions;
};

struct ForwardPass {
  HiddenStates hidden;
  std::vector<AttentionState> attention;
};

struct LayerOutput {
  Matrix hidden;
  AttentionState attention;
};

// Per-layer key/value cache for incremental decoding.
struct LayerCache {
  std::vector<Matrix> keys;    // per head, length x D_h
  std::vector<Matrix> values;  // per head, length x D_h
  SinkSet sinks;               // frozen at prefill, extended by decode re-checks

  std::size_t length() const { return keys.empty() ? 0 : keys.front().rows(); }
};

struct DecodeCache {
  std::vector<LayerCache> layers;
  std::size_t decoded_tokens = 0;
};

class LayerHooks {
 public:
  virtual ~LayerHooks() = default;

  // Sinks for this layer, computed from the layer input. Default: none.
  virtual SinkSet detect_sinks(std::size_t layer, const Matrix& input) const;
  // After Q/K/V projection and before logits. May edit q/k/v.
  virtual void on_projections(AttentionState& /*state*/) const {}
  // After per-head outputs, before concatenation. May edit out and relaxed_attn.
  virtual void on_head_outputs(AttentionState& /*state*/) const {}
  // Rows of the layer output to keep for the following layers; nullopt keeps all.
  virtual std::optional<std::vector<std::size_t>> retain_tokens(
      const AttentionState& /*state*/, const Matrix& /*layer_output*/) const {
    return std::nullopt;
  }

  // Trigger value if a newly decoded token (layer input row) joins the
  // layer's sink set; nullopt otherwise.
  virtual std::optional<double> decode_sink_trigger(std::size_t /*layer*/,
                                                    std::span<const double> /*input_row*/,
                                                    const LayerCache& /*cache*/) const {
    return std::nullopt;
  }
  // Per-head outputs of the newly decoded row; cache already holds its K/V.
  virtual void on_decode_head_outputs(std::size_t /*layer*/, const LayerCache& /*cache*/,
                                      std::vector<Vector>& /*head_outputs*/) const {}
};

// Shared instance with every hook at its default.
const LayerHooks& no_hooks();

Model init_seeded(const DecoderConfig& config);

Model load_weights(const std::filesystem::path& path);
void save_weights(const Model& model, const std::filesystem::path& path);

Matrix causal_mask(std::size_t n);

LayerOutput forward_layer(const Matrix& x, const Model& model, std::size_t layer,
                          const LayerHooks& hooks = no_hooks());

ForwardPass forward_all(const Matrix& x0, const Model& model,
                        const LayerHooks& hooks = no_hooks());

// Residual two-layer tanh perceptron: x + tanh(x W_in) W_out.
Matrix apply_ffn(const Matrix& x, const LayerWeights& weights);

// Straight-line triple-loop reference for A = softmax(QK^T/sqrt(d) + mask),
// O = A V. Shares no code with forward_layer.
Matrix attention_naive_oracle(const Matrix& q, const Matrix& k, const Matrix& v,
                              const Matrix& mask);

DecodeCache make_decode_cache(const ForwardPass& prefill);

// Runs one new token through every layer against the cache and returns its
// final hidden state. Appends the token's K/V to every layer of the cache.
Vector decode_step(const Model& model, DecodeCache& cache, std::span<const double> x_row,
                   const LayerHooks& hooks = no_hooks());

}  // namespace sinklab
