#pragma once

// Sink-token identification.
//
// LLM criterion (massive activations): token i is a sink when
//   max_d |x_i[d]| > max(llm_abs_floor, llm_median_mult * median |X|)
// where the median runs over every scalar entry of the layer.
//
// VLM criterion (sink dimensions): token i is a sink when
//   max_{d in D_sink} |x_i[d]| / rms(x_i) >= vlm_tau.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "sinklab/decoder.hpp"
#include "sinklab/numerics.hpp"
#include "sinklab/sink_set.hpp"

namespace sinklab {

struct DetectionParams {
  double llm_abs_floor = 100.0;
  double llm_median_mult = 1000.0;
  double vlm_tau = 20.0;
  std::vector<std::size_t> sink_dims;

  // hidden_dim = 0 skips the D_sink range check.
  void validate(std::size_t hidden_dim = 0) const;
};

// Repeated-extreme-magnitude rule for outlier hidden dimensions.
struct OutlierCriterion {
  double magnitude_threshold = 6.0;
  double layer_fraction = 0.25;
  double token_fraction = 0.06;
  // A dimension must qualify in at least sequence_quorum / quorum_base of the
  // sequences (90 of 100 by default), rounded up.
  std::size_t sequence_quorum = 90;
  std::size_t quorum_base = 100;

  void validate() const;
  std::size_t required_sequences(std::size_t num_sequences) const;
};

struct OutlierDim {
  std::size_t dim = 0;
  double max_activation = 0.0;  // max |x| over every sequence, layer and token
  double layer_pct = 0.0;       // mean over sequences, in percent
  double token_pct = 0.0;       // mean over sequences, in percent
};

// Per-head mean sink attention mass at one layer; each entry lies in [0, 1].
struct SinkScoreTable {
  // scores[layer][head]
  std::vector<std::vector<double>> scores;
};

// Threshold the LLM criterion compares against for this layer.
double llm_threshold(const Matrix& states, const DetectionParams& params);

SinkSet detect_sinks_llm(const Matrix& states, const DetectionParams& params,
                         std::size_t layer = 0);
SinkSet detect_sinks_vlm(const Matrix& states, const DetectionParams& params,
                         std::size_t layer = 0);
SinkSet detect_sinks(const Matrix& states, const DetectionParams& params,
                     SinkCriterion criterion, std::size_t layer = 0);

// Runs are hidden states of independent sequences through the same model.
// Every entry of HiddenStates::layers (input included) counts as a layer.
std::vector<OutlierDim> find_outlier_dims(std::span<const HiddenStates> runs,
                                          const OutlierCriterion& criterion);

// score_h = mean over query rows i of sum_{j in sinks} A_{h,i,j}.
std::vector<double> compute_sink_score(const AttentionState& attn, const SinkSet& sinks);

// Outlier dims that are also the argmax dimension of some LLM-detected sink
// token, in outlier order, truncated to top_k.
std::vector<std::size_t> derive_sink_dims(std::span<const OutlierDim> outliers,
                                          const HiddenStates& states,
                                          const DetectionParams& params, std::size_t top_k);

// Argmax |x_i[d]| for each sink token of `sinks` in `states`.
std::vector<std::size_t> sink_argmax_dims(const Matrix& states, const SinkSet& sinks);

// CSV with columns dim,max_activation,layer_pct,token_pct,is_outlier,is_sink_vlm,is_sink_llm.
// Rows cover every outlier dim plus any D_sink / LLM-sink dim not in the list.
void write_outlier_csv(const std::filesystem::path& path, std::span<const OutlierDim> outliers,
                       std::span<const std::size_t> vlm_sink_dims,
                       std::span<const std::size_t> llm_sink_dims);

}  // namespace sinklab
