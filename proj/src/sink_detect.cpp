#include "sinklab/sink_detect.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "sinklab/csv.hpp"
#include "sinklab/error.hpp"

namespace sinklab {

bool SinkSet::contains(std::size_t token) const {
  return std::binary_search(indices.begin(), indices.end(), token);
}

void DetectionParams::validate(std::size_t hidden_dim) const {
  if (!(llm_abs_floor > 0.0)) throw ConfigError("detection: llm_abs_floor must be > 0");
  if (!(llm_median_mult > 0.0)) throw ConfigError("detection: llm_median_mult must be > 0");
  if (!(vlm_tau > 0.0)) throw ConfigError("detection: vlm_tau must be > 0");
  if (hidden_dim != 0) {
    for (std::size_t d : sink_dims) {
      if (d >= hidden_dim) {
        throw ConfigError("detection: sink dim " + std::to_string(d) + " outside hidden size " +
                          std::to_string(hidden_dim));
      }
    }
  }
}

void OutlierCriterion::validate() const {
  if (!(magnitude_threshold >= 0.0)) throw ConfigError("outlier: magnitude threshold must be >= 0");
  if (!(layer_fraction > 0.0 && layer_fraction <= 1.0) ||
      !(token_fraction > 0.0 && token_fraction <= 1.0)) {
    throw ConfigError("outlier: fractions must lie in (0, 1]");
  }
  if (quorum_base == 0 || sequence_quorum > quorum_base) {
    throw ConfigError("outlier: quorum must not exceed its base");
  }
}

std::size_t OutlierCriterion::required_sequences(std::size_t num_sequences) const {
  return (sequence_quorum * num_sequences + quorum_base - 1) / quorum_base;
}

double llm_threshold(const Matrix& states, const DetectionParams& params) {
  if (states.empty()) return params.llm_abs_floor;
  return std::max(params.llm_abs_floor, params.llm_median_mult * median_abs(states.data()));
}

SinkSet detect_sinks_llm(const Matrix& states, const DetectionParams& params, std::size_t layer) {
  SinkSet out;
  out.layer = layer;
  out.criterion = SinkCriterion::kLlm;
  out.threshold = llm_threshold(states, params);
  for (std::size_t i = 0; i < states.rows(); ++i) {
    double peak = 0.0;
    for (double v : states.row(i)) peak = std::max(peak, std::abs(v));
    if (peak > out.threshold) {
      out.indices.push_back(i);
      out.trigger_values.push_back(peak);
    }
  }
  return out;
}

SinkSet detect_sinks_vlm(const Matrix& states, const DetectionParams& params, std::size_t layer) {
  if (params.sink_dims.empty()) throw ConfigError("VLM criterion requires a non-empty D_sink");
  SinkSet out;
  out.layer = layer;
  out.criterion = SinkCriterion::kVlm;
  out.threshold = params.vlm_tau;
  for (std::size_t i = 0; i < states.rows(); ++i) {
    const auto x = states.row(i);
    const double norm = rms(x);
    if (norm == 0.0) {
      ++out.zero_rms_tokens;
      continue;
    }
    double peak = 0.0;
    for (std::size_t d : params.sink_dims) peak = std::max(peak, std::abs(x[d] / norm));
    if (peak >= params.vlm_tau) {
      out.indices.push_back(i);
      out.trigger_values.push_back(peak);
    }
  }
  return out;
}

SinkSet detect_sinks(const Matrix& states, const DetectionParams& params, SinkCriterion criterion,
                     std::size_t layer) {
  return criterion == SinkCriterion::kLlm ? detect_sinks_llm(states, params, layer)
                                          : detect_sinks_vlm(states, params, layer);
}

std::vector<OutlierDim> find_outlier_dims(std::span<const HiddenStates> runs,
                                          const OutlierCriterion& criterion) {
  criterion.validate();
  if (runs.empty()) throw InvalidArgument("find_outlier_dims: need at least one sequence");
  const std::size_t width = runs.front().layers.at(0).cols();
  const double thr = criterion.magnitude_threshold;

  std::vector<double> max_act(width, 0.0);
  std::vector<double> layer_pct(width, 0.0);
  std::vector<double> token_pct(width, 0.0);
  std::vector<std::size_t> qualified(width, 0);

  for (const HiddenStates& run : runs) {
    const std::size_t num_layers = run.layers.size();
    const std::size_t num_tokens = run.layers.front().rows();
    if (num_layers == 0 || num_tokens == 0) continue;
    std::vector<std::size_t> layers_hit(width, 0);
    // token_hit[d][pos]: position exceeded the threshold in some layer.
    std::vector<std::vector<char>> token_hit(width, std::vector<char>(num_tokens, 0));
    for (std::size_t l = 0; l < num_layers; ++l) {
      const Matrix& x = run.layers[l];
      if (x.cols() != width) throw InvalidArgument("find_outlier_dims: inconsistent hidden width");
      std::vector<char> layer_hit(width, 0);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::size_t pos =
            l < run.positions.size() && r < run.positions[l].size() ? run.positions[l][r] : r;
        const auto row = x.row(r);
        for (std::size_t d = 0; d < width; ++d) {
          const double mag = std::abs(row[d]);
          max_act[d] = std::max(max_act[d], mag);
          if (mag > thr) {
            layer_hit[d] = 1;
            if (pos < num_tokens) token_hit[d][pos] = 1;
          }
        }
      }
      for (std::size_t d = 0; d < width; ++d) layers_hit[d] += layer_hit[d];
    }
    for (std::size_t d = 0; d < width; ++d) {
      const double lf = static_cast<double>(layers_hit[d]) / static_cast<double>(num_layers);
      std::size_t tokens = 0;
      for (char hit : token_hit[d]) tokens += hit ? 1 : 0;
      const double tf = static_cast<double>(tokens) / static_cast<double>(num_tokens);
      layer_pct[d] += 100.0 * lf;
      token_pct[d] += 100.0 * tf;
      if (lf > criterion.layer_fraction && tf > criterion.token_fraction) ++qualified[d];
    }
  }

  const std::size_t required = std::max<std::size_t>(1, criterion.required_sequences(runs.size()));
  std::vector<OutlierDim> out;
  for (std::size_t d = 0; d < width; ++d) {
    if (qualified[d] < required) continue;
    const double n = static_cast<double>(runs.size());
    out.push_back({d, max_act[d], layer_pct[d] / n, token_pct[d] / n});
  }
  std::stable_sort(out.begin(), out.end(), [](const OutlierDim& a, const OutlierDim& b) {
    return a.max_activation > b.max_activation;
  });
  return out;
}

std::vector<double> compute_sink_score(const AttentionState& attn, const SinkSet& sinks) {
  std::vector<double> scores(attn.heads.size(), 0.0);
  if (sinks.empty()) return scores;
  if (sinks.layer != attn.layer) {
    throw InvalidArgument("compute_sink_score: sink set layer " + std::to_string(sinks.layer) +
                          " != attention layer " + std::to_string(attn.layer));
  }
  for (std::size_t h = 0; h < attn.heads.size(); ++h) {
    const Matrix& a = attn.heads[h].attn;
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double mass = 0.0;
      for (std::size_t s : sinks.indices) {
        if (s < a.cols()) mass += a(i, s);
      }
      total += mass;
    }
    scores[h] = a.rows() == 0 ? 0.0 : std::clamp(total / static_cast<double>(a.rows()), 0.0, 1.0);
  }
  return scores;
}

std::vector<std::size_t> sink_argmax_dims(const Matrix& states, const SinkSet& sinks) {
  std::vector<std::size_t> dims;
  for (std::size_t i : sinks.indices) {
    const auto row = states.row(i);
    std::size_t best = 0;
    for (std::size_t d = 1; d < row.size(); ++d) {
      if (std::abs(row[d]) > std::abs(row[best])) best = d;
    }
    dims.push_back(best);
  }
  return dims;
}

std::vector<std::size_t> derive_sink_dims(std::span<const OutlierDim> outliers,
                                          const HiddenStates& states,
                                          const DetectionParams& params, std::size_t top_k) {
  std::set<std::size_t> carried;
  for (std::size_t l = 0; l < states.layers.size(); ++l) {
    const SinkSet sinks = detect_sinks_llm(states.layers[l], params, l);
    for (std::size_t d : sink_argmax_dims(states.layers[l], sinks)) carried.insert(d);
  }
  std::vector<std::size_t> dims;
  for (const OutlierDim& o : outliers) {
    if (dims.size() == top_k) break;
    if (carried.count(o.dim) != 0) dims.push_back(o.dim);
  }
  return dims;
}

void write_outlier_csv(const std::filesystem::path& path, std::span<const OutlierDim> outliers,
                       std::span<const std::size_t> vlm_sink_dims,
                       std::span<const std::size_t> llm_sink_dims) {
  const std::set<std::size_t> vlm(vlm_sink_dims.begin(), vlm_sink_dims.end());
  const std::set<std::size_t> llm(llm_sink_dims.begin(), llm_sink_dims.end());
  CsvWriter csv(path, {"dim", "max_activation", "layer_pct", "token_pct", "is_outlier",
                       "is_sink_vlm", "is_sink_llm"});
  std::set<std::size_t> written;
  for (const OutlierDim& o : outliers) {
    csv.cell(o.dim).cell(o.max_activation).cell(o.layer_pct).cell(o.token_pct).cell(true);
    csv.cell(vlm.count(o.dim) != 0).cell(llm.count(o.dim) != 0);
    csv.end_row();
    written.insert(o.dim);
  }
  std::set<std::size_t> extra = vlm;
  extra.insert(llm.begin(), llm.end());
  for (std::size_t d : extra) {
    if (written.count(d) != 0) continue;
    csv.cell(d).cell("").cell("").cell("").cell(false);
    csv.cell(vlm.count(d) != 0).cell(llm.count(d) != 0);
    csv.end_row();
  }
}

}  // namespace sinklab
