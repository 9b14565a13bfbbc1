#include "sinklab/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sinklab/error.hpp"

namespace sinklab {

using nlohmann::json;

std::size_t default_enh_layer(std::size_t num_layers) {
  if (num_layers <= 1) return 0;
  return std::clamp<std::size_t>(num_layers / 7, 1, num_layers - 1);
}

std::size_t default_skip_final_layers(std::size_t num_layers) {
  return num_layers == 0 ? 0 : std::min<std::size_t>(2, num_layers - 1);
}

double rotation_gate(double cosine_value, double temperature) {
  return std::tanh(std::max(cosine_value, 0.0) / temperature);
}

std::optional<SinkDirection> sink_value_direction(std::span<const Matrix> head_values,
                                                  const SinkSet& sinks) {
  if (sinks.empty()) return std::nullopt;
  SinkDirection dir;
  dir.layer = sinks.layer;
  dir.source_count = sinks.size();
  const double inv = 1.0 / static_cast<double>(sinks.size());
  for (const Matrix& v : head_values) {
    Vector mean(v.cols(), 0.0);
    for (std::size_t s : sinks.indices) {
      if (s >= v.rows()) throw InvalidArgument("sink_value_direction: sink index out of range");
      const auto row = v.row(s);
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += row[c];
    }
    for (double& m : mean) m *= inv;
    dir.heads.push_back(std::move(mean));
  }
  return dir;
}

std::optional<SinkDirection> sink_value_direction(const AttentionState& attn,
                                                  const SinkSet& sinks) {
  std::vector<Matrix> values;
  values.reserve(attn.heads.size());
  for (const HeadState& h : attn.heads) values.push_back(h.v);
  return sink_value_direction(values, sinks);
}

Vector rotate_toward(std::span<const double> o, std::span<const double> dir, double gamma,
                     double gate) {
  Vector out(o.begin(), o.end());
  if (gate == 0.0 || gamma == 0.0) return out;
  const double dir_sq = dot(dir, dir);
  const double norm = l2_norm(o);
  if (dir_sq == 0.0 || norm == 0.0) return out;
  const double coeff = gamma * gate * dot(o, dir) / dir_sq;
  Vector rotated(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) rotated[i] = o[i] + coeff * dir[i];
  const double rotated_norm = l2_norm(rotated);
  if (rotated_norm == 0.0) return out;
  const double rescale = norm / rotated_norm;
  for (double& r : rotated) r *= rescale;
  return rotated;
}

Vector gated_rotation(std::span<const double> o, std::span<const double> dir,
                      const RotationParams& params) {
  if (params.gamma == 0.0 || dot(dir, dir) == 0.0 || dot(o, o) == 0.0) {
    return Vector(o.begin(), o.end());
  }
  const double gate = rotation_gate(cosine(o, dir), params.gate_temperature);
  return rotate_toward(o, dir, params.gamma, gate);
}

namespace {

template <typename RowFn>
std::size_t rotate_non_sink_rows(AttentionState& attn, const SinkSet& sinks,
                                 const SinkDirection& dir, RowFn&& rotate_row) {
  if (dir.heads.size() != attn.heads.size()) {
    throw InvalidArgument("rotation: direction head count != attention head count");
  }
  std::size_t changed = 0;
  for (std::size_t h = 0; h < attn.heads.size(); ++h) {
    Matrix& out = attn.heads[h].out;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      if (sinks.contains(i)) continue;
      auto row = out.row(i);
      const std::optional<Vector> rotated = rotate_row(h, i, row);
      if (!rotated) continue;
      if (!std::equal(rotated->begin(), rotated->end(), row.begin())) ++changed;
      std::copy(rotated->begin(), rotated->end(), row.begin());
    }
  }
  return changed;
}

}  // namespace

std::size_t apply_rotation_layer(AttentionState& attn, const SinkSet& sinks,
                                 const SinkDirection& dir, const RotationParams& params) {
  if (params.gamma == 0.0) return 0;
  return rotate_non_sink_rows(attn, sinks, dir,
                              [&](std::size_t h, std::size_t, std::span<const double> row) {
                                return std::optional<Vector>(
                                    gated_rotation(row, dir.heads[h], params));
                              });
}

std::size_t apply_rotation_probe(AttentionState& attn, const SinkSet& sinks,
                                 const SinkDirection& dir, double gamma, double mass_threshold) {
  if (gamma == 0.0) return 0;
  return rotate_non_sink_rows(
      attn, sinks, dir,
      [&](std::size_t h, std::size_t i, std::span<const double> row) -> std::optional<Vector> {
        double mass = 0.0;
        for (std::size_t s : sinks.indices) mass += attn.heads[h].attn(i, s);
        if (mass < mass_threshold) return std::nullopt;
        return rotate_toward(row, dir.heads[h], gamma, 1.0);
      });
}

RelaxedRows relax_mask_rows(const AttentionState& attn, const SinkSet& sinks) {
  RelaxedRows relaxed;
  relaxed.sink_rows = sinks.indices;
  const std::size_t n = attn.num_tokens();
  for (const HeadState& head : attn.heads) {
    const std::size_t dh = head.q.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix a(sinks.size(), n);
    Matrix out(sinks.size(), head.v.cols());
    Vector logits(n);
    for (std::size_t r = 0; r < sinks.size(); ++r) {
      const std::size_t s = sinks.indices[r];
      if (s >= n) throw InvalidArgument("relax_mask_rows: sink index out of range");
      for (std::size_t j = 0; j < n; ++j) logits[j] = dot(head.q.row(s), head.k.row(j)) * scale;
      const Vector probs = softmax_row(logits);
      std::copy(probs.begin(), probs.end(), a.row(r).begin());
      auto o = out.row(r);
      for (std::size_t j = 0; j < n; ++j) {
        const auto vr = head.v.row(j);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += probs[j] * vr[c];
      }
    }
    relaxed.attn.push_back(std::move(a));
    relaxed.out.push_back(std::move(out));
  }
  return relaxed;
}

void apply_relaxed_rows(AttentionState& attn, const RelaxedRows& relaxed) {
  if (relaxed.out.size() != attn.heads.size()) {
    throw InvalidArgument("apply_relaxed_rows: head count mismatch");
  }
  for (std::size_t h = 0; h < attn.heads.size(); ++h) {
    for (std::size_t r = 0; r < relaxed.sink_rows.size(); ++r) {
      const auto src = relaxed.out[h].row(r);
      std::copy(src.begin(), src.end(), attn.heads[h].out.row(relaxed.sink_rows[r]).begin());
    }
  }
  attn.relaxed_attn = relaxed.attn;
}

Vector zero_top_k(std::span<const double> key, std::size_t top_k) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(key[a]) > std::abs(key[b]);
  });
  Vector out(key.begin(), key.end());
  for (std::size_t i = 0; i < std::min(top_k, order.size()); ++i) out[order[i]] = 0.0;
  return out;
}

void zero_k_keys(AttentionState& attn, const SinkSet& sinks, std::size_t top_k) {
  if (top_k == 0) return;
  for (HeadState& head : attn.heads) {
    if (top_k > head.k.cols()) throw InvalidArgument("zero_k_keys: top_k exceeds head width");
    for (std::size_t s : sinks.indices) {
      auto row = head.k.row(s);
      const Vector zeroed = zero_top_k(row, top_k);
      std::copy(zeroed.begin(), zeroed.end(), row.begin());
    }
  }
}

void prune_heads(AttentionState& attn, std::span<const std::size_t> heads) {
  for (std::size_t h : heads) {
    if (h >= attn.heads.size()) throw InvalidArgument("prune_heads: head index out of range");
    auto data = attn.heads[h].out.data();
    std::fill(data.begin(), data.end(), 0.0);
  }
}

std::vector<std::size_t> sink_query_token_prune(std::span<const Matrix> sink_rows,
                                                const SinkSet& sinks, const TokenLayout& layout,
                                                double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw InvalidArgument("sink_query_token_prune: keep_fraction must lie in (0, 1]");
  }
  const std::size_t m = layout.num_modality;
  // The epsilon keeps 0.3 * 10 from rounding up to 4.
  const auto budget = static_cast<std::size_t>(
      std::ceil(keep_fraction * static_cast<double>(m) - 1e-9));
  if (budget == 0) throw InvalidArgument("sink_query_token_prune: nothing would be kept");
  const std::size_t n = layout.total();

  std::vector<std::size_t> candidates;
  for (std::size_t j = 0; j < m; ++j) {
    if (!sinks.contains(j)) candidates.push_back(j);
  }
  std::vector<double> score(n, 0.0);
  if (!sinks.empty() && !sink_rows.empty()) {
    const double norm = 1.0 / static_cast<double>(sinks.size() * sink_rows.size());
    for (const Matrix& rows : sink_rows) {
      if (rows.cols() != n || rows.rows() != sinks.size()) {
        throw InvalidArgument("sink_query_token_prune: sink rows do not match layout");
      }
      for (std::size_t r = 0; r < rows.rows(); ++r) {
        for (std::size_t j : candidates) score[j] += rows(r, j) * norm;
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  candidates.resize(std::min(budget, candidates.size()));

  std::vector<std::size_t> kept = candidates;
  for (std::size_t s : sinks.indices) kept.push_back(s);
  for (std::size_t j = m; j < n; ++j) kept.push_back(j);
  std::sort(kept.begin(), kept.end());
  kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
  return kept;
}

// ---------------------------------------------------------------------------
// InterventionConfig

std::size_t InterventionConfig::resolved_enh_layer(std::size_t num_layers) const {
  return enh_layer.value_or(default_enh_layer(num_layers));
}

std::size_t InterventionConfig::resolved_skip_final(std::size_t num_layers) const {
  return skip_final_layers.value_or(default_skip_final_layers(num_layers));
}

void InterventionConfig::validate(const DecoderConfig& model) const {
  const std::size_t layers = model.num_layers;
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be finite and >= 0");
  if (!(gate_temperature > 0.0) || !std::isfinite(gate_temperature)) {
    throw ConfigError("gate_temperature must be finite and > 0");
  }
  if (layers > 0 && resolved_enh_layer(layers) >= layers) {
    throw ConfigError("enh_layer " + std::to_string(resolved_enh_layer(layers)) +
                      " beyond model depth " + std::to_string(layers));
  }
  if (layers > 0 && resolved_skip_final(layers) >= layers) {
    throw ConfigError("skip_final_layers must be < num_layers");
  }
  if (zero_k > model.head_dim) throw ConfigError("zero_k exceeds head_dim");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep_fraction must lie in (0, 1]");
  }
  for (const auto& [l, h] : pruned_heads) {
    if (l >= layers || h >= model.num_heads) {
      throw ConfigError("pruned head (" + std::to_string(l) + ", " + std::to_string(h) +
                        ") out of range");
    }
  }
  if (relax_from_layer && layers > 0 && *relax_from_layer >= layers) {
    throw ConfigError("relax_from_layer beyond model depth");
  }
  if (rotation_probe_threshold &&
      !(*rotation_probe_threshold >= 0.0 && *rotation_probe_threshold <= 1.0)) {
    throw ConfigError("rotation_probe_threshold must lie in [0, 1]");
  }
}

json InterventionConfig::to_json() const {
  json heads = json::array();
  for (const auto& [l, h] : pruned_heads) heads.push_back({l, h});
  json doc = {{"gamma", gamma},
              {"gate_temperature", gate_temperature},
              {"zero_k", zero_k},
              {"pruned_heads", heads},
              {"keep_fraction", keep_fraction},
              {"rotation_enabled", rotation_enabled},
              {"relaxation_enabled", relaxation_enabled},
              {"recheck_decode_sinks", recheck_decode_sinks},
              {"prune_with_relaxed_rows", prune_with_relaxed_rows}};
  doc["enh_layer"] = enh_layer ? json(*enh_layer) : json(nullptr);
  doc["skip_final_layers"] = skip_final_layers ? json(*skip_final_layers) : json(nullptr);
  if (relax_from_layer) doc["relax_from_layer"] = *relax_from_layer;
  if (rotation_probe_threshold) doc["rotation_probe_threshold"] = *rotation_probe_threshold;
  return doc;
}

InterventionConfig InterventionConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("intervention config must be a JSON object");
  InterventionConfig cfg;
  try {
    cfg.gamma = doc.value("gamma", cfg.gamma);
    cfg.gate_temperature = doc.value("gate_temperature", cfg.gate_temperature);
    if (doc.contains("enh_layer") && !doc.at("enh_layer").is_null()) {
      cfg.enh_layer = doc.at("enh_layer").get<std::size_t>();
    }
    if (doc.contains("skip_final_layers") && !doc.at("skip_final_layers").is_null()) {
      cfg.skip_final_layers = doc.at("skip_final_layers").get<std::size_t>();
    }
    cfg.zero_k = doc.value("zero_k", cfg.zero_k);
    if (doc.contains("pruned_heads")) {
      for (const json& pair : doc.at("pruned_heads")) {
        if (!pair.is_array() || pair.size() != 2) {
          throw ConfigError("pruned_heads entries must be [layer, head] pairs");
        }
        cfg.pruned_heads.emplace_back(pair[0].get<std::size_t>(), pair[1].get<std::size_t>());
      }
    }
    cfg.keep_fraction = doc.value("keep_fraction", cfg.keep_fraction);
    cfg.rotation_enabled = doc.value("rotation_enabled", cfg.rotation_enabled);
    cfg.relaxation_enabled = doc.value("relaxation_enabled", cfg.relaxation_enabled);
    cfg.recheck_decode_sinks = doc.value("recheck_decode_sinks", cfg.recheck_decode_sinks);
    cfg.prune_with_relaxed_rows = doc.value("prune_with_relaxed_rows", cfg.prune_with_relaxed_rows);
    if (doc.contains("relax_from_layer") && !doc.at("relax_from_layer").is_null()) {
      cfg.relax_from_layer = doc.at("relax_from_layer").get<std::size_t>();
    }
    if (doc.contains("rotation_probe_threshold") && !doc.at("rotation_probe_threshold").is_null()) {
      cfg.rotation_probe_threshold = doc.at("rotation_probe_threshold").get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("intervention config: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// InterventionHooks

InterventionHooks::InterventionHooks(InterventionConfig config, DetectionParams detection,
                                     SinkCriterion criterion, const DecoderConfig& model,
                                     std::optional<TokenLayout> layout)
    : config_(std::move(config)),
      detection_(std::move(detection)),
      criterion_(criterion),
      num_layers_(model.num_layers),
      enh_layer_(config_.resolved_enh_layer(model.num_layers)),
      skip_final_(config_.resolved_skip_final(model.num_layers)),
      layout_(layout) {
  config_.validate(model);
  detection_.validate(model.hidden_dim);
  if (criterion_ == SinkCriterion::kVlm && detection_.sink_dims.empty()) {
    throw ConfigError("VLM criterion requires sink dims");
  }
  if (config_.keep_fraction < 1.0 && !layout_) {
    throw ConfigError("token pruning requires a token layout");
  }
}

bool InterventionHooks::rotates_layer(std::size_t layer) const {
  return config_.rotation_enabled && config_.gamma > 0.0 && layer + skip_final_ < num_layers_;
}

bool InterventionHooks::relaxes_layer(std::size_t layer) const {
  if (!config_.relaxation_enabled) return false;
  if (config_.relax_from_layer) return layer >= *config_.relax_from_layer;
  return layer == enh_layer_;
}

std::vector<std::size_t> InterventionHooks::pruned_in_layer(std::size_t layer) const {
  std::vector<std::size_t> heads;
  for (const auto& [l, h] : config_.pruned_heads) {
    if (l == layer) heads.push_back(h);
  }
  return heads;
}

SinkSet InterventionHooks::detect_sinks(std::size_t layer, const Matrix& input) const {
  return sinklab::detect_sinks(input, detection_, criterion_, layer);
}

void InterventionHooks::on_projections(AttentionState& state) const {
  if (config_.zero_k > 0 && !state.sinks.empty()) zero_k_keys(state, state.sinks, config_.zero_k);
}

void InterventionHooks::on_head_outputs(AttentionState& state) const {
  const SinkSet& sinks = state.sinks;
  if (!sinks.empty() && rotates_layer(state.layer)) {
    const auto dir = sink_value_direction(state, sinks);
    if (config_.rotation_probe_threshold) {
      apply_rotation_probe(state, sinks, *dir, config_.gamma, *config_.rotation_probe_threshold);
    } else {
      apply_rotation_layer(state, sinks, *dir, {config_.gamma, config_.gate_temperature});
    }
  }
  if (!sinks.empty() && relaxes_layer(state.layer)) {
    apply_relaxed_rows(state, relax_mask_rows(state, sinks));
  }
  const auto heads = pruned_in_layer(state.layer);
  if (!heads.empty()) prune_heads(state, heads);
}

std::optional<std::vector<std::size_t>> InterventionHooks::retain_tokens(
    const AttentionState& state, const Matrix& /*layer_output*/) const {
  if (config_.keep_fraction >= 1.0 || state.layer != enh_layer_ || state.sinks.empty()) {
    return std::nullopt;
  }
  if (layout_->total() != state.num_tokens()) {
    throw ConfigError("token layout covers " + std::to_string(layout_->total()) +
                      " tokens but the layer sees " + std::to_string(state.num_tokens()));
  }
  std::vector<Matrix> rows;
  if (config_.prune_with_relaxed_rows) {
    rows = state.relaxed_attn.empty() ? relax_mask_rows(state, state.sinks).attn
                                      : state.relaxed_attn;
  } else {
    for (const HeadState& head : state.heads) rows.push_back(select_rows(head.attn, state.sinks.indices));
  }
  return sink_query_token_prune(rows, state.sinks, *layout_, config_.keep_fraction);
}

std::optional<double> InterventionHooks::decode_sink_trigger(std::size_t /*layer*/,
                                                             std::span<const double> input_row,
                                                             const LayerCache& cache) const {
  if (!config_.recheck_decode_sinks) return std::nullopt;
  if (criterion_ == SinkCriterion::kLlm) {
    double peak = 0.0;
    for (double v : input_row) peak = std::max(peak, std::abs(v));
    const double threshold = std::isfinite(cache.sinks.threshold) ? cache.sinks.threshold
                                                                  : detection_.llm_abs_floor;
    if (peak > threshold) return peak;
    return std::nullopt;
  }
  const double norm = rms(input_row);
  if (norm == 0.0) return std::nullopt;
  double peak = 0.0;
  for (std::size_t d : detection_.sink_dims) peak = std::max(peak, std::abs(input_row[d] / norm));
  if (peak >= detection_.vlm_tau) return peak;
  return std::nullopt;
}

void InterventionHooks::on_decode_head_outputs(std::size_t layer, const LayerCache& cache,
                                               std::vector<Vector>& head_outputs) const {
  const std::size_t pos = cache.length() - 1;
  // The probe selects rows by sink mass, which a single decode row does not
  // carry here, so decode only applies the gated form.
  const bool rotate = !config_.rotation_probe_threshold && rotates_layer(layer) &&
                      !cache.sinks.empty() && !cache.sinks.contains(pos);
  if (rotate) {
    const auto dir = sink_value_direction(cache.values, cache.sinks);
    for (std::size_t h = 0; h < head_outputs.size(); ++h) {
      head_outputs[h] =
          gated_rotation(head_outputs[h], dir->heads[h], {config_.gamma, config_.gate_temperature});
    }
  }
  for (std::size_t h : pruned_in_layer(layer)) {
    std::fill(head_outputs.at(h).begin(), head_outputs.at(h).end(), 0.0);
  }
}

}  // namespace sinklab
