#pragma once

#include <cstddef>
#include <limits>
#include <vector>

namespace sinklab {

enum class SinkCriterion { kLlm, kVlm };

// Sink tokens detected at one layer.
struct SinkSet {
  std::size_t layer = 0;
  SinkCriterion criterion = SinkCriterion::kLlm;
  // Strictly increasing token positions.
  std::vector<std::size_t> indices;
  // Criterion value for each listed index, parallel to `indices`.
  std::vector<double> trigger_values;
  // Threshold the trigger was compared against. For the VLM criterion this is tau.
  double threshold = std::numeric_limits<double>::infinity();
  // Tokens skipped because their RMS was zero (VLM criterion only).
  std::size_t zero_rms_tokens = 0;

  bool empty() const { return indices.empty(); }
  std::size_t size() const { return indices.size(); }
  bool contains(std::size_t token) const;
};

}  // namespace sinklab
