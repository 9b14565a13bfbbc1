#pragma once

// Forward-pass interventions on sink representations.
//
// Gated head-output rotation (non-sink rows):
//   c = cos(o, v)            v = mean value vector of the sink tokens (per head)
//   g = tanh(ReLU(c) / t)
//   o_hat = o + gamma * g * (o.v / |v|^2) * v
//   o_rot = (|o| / |o_hat|) * o_hat
//
// Mask relaxation (sink rows, one layer): the sink query attends to the whole
// sequence, softmax(q_s K^T / sqrt(D_h)) with no causal mask, and the
// resulting output replaces the sink row's head output.
//
// Also here: Zero-K (zeroing the top-|.| dims of sink keys), head pruning,
// and sink-query token pruning.

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sinklab/decoder.hpp"
#include "sinklab/numerics.hpp"
#include "sinklab/sink_detect.hpp"
#include "sinklab/sink_set.hpp"

namespace sinklab {

struct RotationParams {
  double gamma = 0.0;
  double gate_temperature = 0.1;
};

struct SinkDirection {
  std::size_t layer = 0;
  std::vector<Vector> heads;  // v per head, D_h each
  std::size_t source_count = 0;
};

struct RelaxedRows {
  std::vector<std::size_t> sink_rows;
  std::vector<Matrix> attn;  // per head, |S| x N
  std::vector<Matrix> out;   // per head, |S| x D_h
};

using HeadId = std::pair<std::size_t, std::size_t>;  // (layer, head)

// Placement rule for the enhancement layer: floor(L / 7), at least 1, at most L - 1.
std::size_t default_enh_layer(std::size_t num_layers);
// Two final layers are exempt from rotation when the depth allows it.
std::size_t default_skip_final_layers(std::size_t num_layers);

double rotation_gate(double cosine_value, double temperature);

// Mean value vector over the sink rows of each head's value matrix. nullopt
// when there are no sinks.
std::optional<SinkDirection> sink_value_direction(std::span<const Matrix> head_values,
                                                  const SinkSet& sinks);
std::optional<SinkDirection> sink_value_direction(const AttentionState& attn,
                                                  const SinkSet& sinks);

// o + gamma * gate * proj_v(o), rescaled to |o|. Returns o unchanged (bitwise)
// when gate, gamma, |v| or |o| is zero.
Vector rotate_toward(std::span<const double> o, std::span<const double> dir, double gamma,
                     double gate);
Vector gated_rotation(std::span<const double> o, std::span<const double> dir,
                      const RotationParams& params);

// Rotates every non-sink row of every head in place. Returns the number of
// (head, row) outputs that changed.
std::size_t apply_rotation_layer(AttentionState& attn, const SinkSet& sinks,
                                 const SinkDirection& dir, const RotationParams& params);

// Rotation probe: rotates (ungated, gate = 1) only non-sink rows whose sink
// attention mass in that head is at least `mass_threshold`.
std::size_t apply_rotation_probe(AttentionState& attn, const SinkSet& sinks,
                                 const SinkDirection& dir, double gamma, double mass_threshold);

// Unmasked attention and outputs for the sink query rows. Pure.
RelaxedRows relax_mask_rows(const AttentionState& attn, const SinkSet& sinks);
// Writes the relaxed outputs into the sink rows and stores the relaxed attention.
void apply_relaxed_rows(AttentionState& attn, const RelaxedRows& relaxed);

// Copy of key with its top_k entries by magnitude set to zero; ties go to the
// lower index.
Vector zero_top_k(std::span<const double> key, std::size_t top_k);
void zero_k_keys(AttentionState& attn, const SinkSet& sinks, std::size_t top_k);

void prune_heads(AttentionState& attn, std::span<const std::size_t> heads);

// Retained positions after sink-query token pruning: every text position,
// every sink position, and the ceil(keep_fraction * M) non-sink modality
// tokens with the highest mean sink-query attention (ties to the lower index).
// sink_rows holds one |S| x N attention matrix per head.
std::vector<std::size_t> sink_query_token_prune(std::span<const Matrix> sink_rows,
                                                const SinkSet& sinks, const TokenLayout& layout,
                                                double keep_fraction);

struct InterventionConfig {
  double gamma = 3.0;
  double gate_temperature = 0.1;
  std::optional<std::size_t> enh_layer;
  std::optional<std::size_t> skip_final_layers;
  std::size_t zero_k = 0;
  std::vector<HeadId> pruned_heads;
  double keep_fraction = 1.0;
  bool rotation_enabled = true;
  bool relaxation_enabled = true;

  // Decode-time re-check of new tokens against the prefill sink threshold.
  bool recheck_decode_sinks = true;
  // Token-pruning scores from relaxed sink rows (true) or causal rows (false).
  bool prune_with_relaxed_rows = true;
  // Experimental: relax the mask at every layer >= this one instead of once.
  std::optional<std::size_t> relax_from_layer;
  // Probe mode: ungated rotation of rows with sink mass >= threshold.
  std::optional<double> rotation_probe_threshold;

  std::size_t resolved_enh_layer(std::size_t num_layers) const;
  std::size_t resolved_skip_final(std::size_t num_layers) const;
  // Throws ConfigError on out-of-range values.
  void validate(const DecoderConfig& model) const;

  nlohmann::json to_json() const;
  static InterventionConfig from_json(const nlohmann::json& doc);
};

// Hooks implementing every intervention in InterventionConfig on top of the
// decoder. Stateless after construction; one instance can serve concurrent
// forward passes.
class InterventionHooks : public LayerHooks {
 public:
  InterventionHooks(InterventionConfig config, DetectionParams detection,
                    SinkCriterion criterion, const DecoderConfig& model,
                    std::optional<TokenLayout> layout = std::nullopt);

  const InterventionConfig& config() const { return config_; }
  std::size_t enh_layer() const { return enh_layer_; }
  bool rotates_layer(std::size_t layer) const;

  SinkSet detect_sinks(std::size_t layer, const Matrix& input) const override;
  void on_projections(AttentionState& state) const override;
  void on_head_outputs(AttentionState& state) const override;
  std::optional<std::vector<std::size_t>> retain_tokens(const AttentionState& state,
                                                        const Matrix& layer_output) const override;
  std::optional<double> decode_sink_trigger(std::size_t layer, std::span<const double> input_row,
                                            const LayerCache& cache) const override;
  void on_decode_head_outputs(std::size_t layer, const LayerCache& cache,
                              std::vector<Vector>& head_outputs) const override;

 private:
  bool relaxes_layer(std::size_t layer) const;
  std::vector<std::size_t> pruned_in_layer(std::size_t layer) const;

  InterventionConfig config_;
  DetectionParams detection_;
  SinkCriterion criterion_;
  std::size_t num_layers_;
  std::size_t enh_layer_;
  std::size_t skip_final_;
  std::optional<TokenLayout> layout_;
};

}  // namespace sinklab
