#include "sinklab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <numeric>
#include <thread>

#include "sinklab/csv.hpp"
#include "sinklab/error.hpp"
#include "sinklab/rng.hpp"

namespace sinklab {

using nlohmann::json;

void SyntheticSpec::validate() const {
  layout.validate();
  if (hidden_dim == 0) throw ConfigError("synthetic spec: hidden_dim must be >= 1");
  if (!(base_scale > 0.0) || !std::isfinite(base_scale)) {
    throw ConfigError("synthetic spec: base_scale must be finite and > 0");
  }
  for (const PlantedValue& p : planted_sinks) {
    if (p.token >= layout.total() || p.dim >= hidden_dim || !std::isfinite(p.magnitude)) {
      throw ConfigError("synthetic spec: planted sink (" + std::to_string(p.token) + ", " +
                        std::to_string(p.dim) + ") out of range or non-finite");
    }
  }
  for (const PlantedOutlierDim& o : planted_outlier_dims) {
    if (o.dim >= hidden_dim || !std::isfinite(o.magnitude) ||
        !(o.token_fraction >= 0.0 && o.token_fraction <= 1.0)) {
      throw ConfigError("synthetic spec: planted outlier dim " + std::to_string(o.dim) +
                        " invalid");
    }
  }
}

Matrix gen_synthetic_sequence(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.layout.total();
  Rng rng(spec.seed);
  Matrix x(n, spec.hidden_dim);
  for (double& v : x.data()) v = rng.uniform(-spec.base_scale, spec.base_scale);
  for (const PlantedOutlierDim& o : spec.planted_outlier_dims) {
    // Seeded Fisher-Yates prefix picks which tokens carry the outlier value.
    std::vector<std::size_t> tokens(n);
    std::iota(tokens.begin(), tokens.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(tokens[i - 1], tokens[rng.below(i)]);
    const auto count = static_cast<std::size_t>(
        std::ceil(o.token_fraction * static_cast<double>(n) - 1e-9));
    for (std::size_t i = 0; i < count; ++i) x(tokens[i], o.dim) = o.magnitude;
  }
  for (const PlantedValue& p : spec.planted_sinks) x(p.token, p.dim) = p.magnitude;
  return x;
}

Model scale_weights(Model model, double factor) {
  for (LayerWeights& w : model.layers) {
    for (Matrix* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.ffn_in, &w.ffn_out}) {
      for (double& v : m->data()) v *= factor;
    }
  }
  return model;
}

Model zero_ffn(Model model) {
  for (LayerWeights& w : model.layers) {
    std::fill(w.ffn_in.data().begin(), w.ffn_in.data().end(), 0.0);
    std::fill(w.ffn_out.data().begin(), w.ffn_out.data().end(), 0.0);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Constructions

SyntheticSpec planted_sink_spec(std::uint64_t seed, std::size_t hidden_dim,
                                std::size_t num_tokens) {
  SyntheticSpec spec;
  spec.layout = {num_tokens / 2, num_tokens - num_tokens / 2};
  spec.hidden_dim = hidden_dim;
  spec.base_scale = 0.2;
  spec.seed = seed;
  Rng pick(seed ^ 0x5151ULL);
  spec.planted_sinks.push_back(
      {static_cast<std::size_t>(pick.below(num_tokens)), static_cast<std::size_t>(pick.below(hidden_dim)), 500.0});
  return spec;
}

Construction over_identification_case(std::uint64_t seed) {
  DecoderConfig cfg{3, 1024, 4, 256, 64, seed};
  Construction c;
  c.model = scale_weights(init_seeded(cfg), 0.01);
  SyntheticSpec spec;
  spec.layout = {32, 8};
  spec.hidden_dim = cfg.hidden_dim;
  spec.base_scale = 0.2;
  spec.seed = seed + 1;
  spec.planted_outlier_dims = {{7, 20.0, 0.6}, {300, 20.0, 0.6}};
  spec.planted_sinks = {{0, 7, 500.0}};
  c.x0 = gen_synthetic_sequence(spec);
  c.layout = spec.layout;
  c.detection.sink_dims = {7, 300};
  return c;
}

Construction zero_k_case(std::uint64_t seed) {
  DecoderConfig cfg{2, 64, 2, 32, 64, seed};
  Construction c;
  c.model = scale_weights(init_seeded(cfg), 0.01);
  LayerWeights& w = c.model.layers[0];
  std::fill(w.w_q.data().begin(), w.w_q.data().end(), 0.0);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    w.w_q(1, h * cfg.head_dim) = 1.0;  // every query reads the constant feature
    w.w_k(0, h * cfg.head_dim) = 1.0;  // the sink's massive feature lands in key dim 0
  }
  SyntheticSpec spec;
  spec.layout = {12, 4};
  spec.hidden_dim = cfg.hidden_dim;
  spec.seed = seed + 1;
  spec.planted_outlier_dims = {{1, 1.0, 1.0}};
  spec.planted_sinks = {{0, 0, 500.0}};
  c.x0 = gen_synthetic_sequence(spec);
  c.layout = spec.layout;
  c.constructed_layer = 0;
  c.constructed_heads = {0, 1};
  return c;
}

Construction proxy_correlation_case(std::uint64_t seed, double noise) {
  DecoderConfig cfg{1, 64, 4, 16, 16, seed};
  Construction c;
  c.model = zero_ffn(init_seeded(cfg));
  LayerWeights& w = c.model.layers[0];
  Rng rng(seed + 2);
  std::fill(w.w_q.data().begin(), w.w_q.data().end(), 0.0);
  std::fill(w.w_k.data().begin(), w.w_k.data().end(), 0.0);
  for (double& v : w.w_v.data()) v = rng.uniform(-noise, noise);
  constexpr double kSinkMagnitude = 500.0;
  constexpr std::size_t kRampDim = 1;
  constexpr std::size_t kCommonDim = 2;
  const double dh = static_cast<double>(cfg.head_dim);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const std::size_t col = h * cfg.head_dim;
    w.w_q(kRampDim, col) = 1.0;
    // sink logit = 4 * ramp
    w.w_k(0, col) = 4.0 * std::sqrt(dh) / kSinkMagnitude;
    // u: the sink's value direction. c: a unit vector orthogonal to u that
    // every non-sink token writes, so alignment with u tracks sink mass.
    Vector u(cfg.head_dim);
    Vector common(cfg.head_dim);
    for (double& e : u) e = rng.uniform(-1.0, 1.0);
    for (double& e : common) e = rng.uniform(-1.0, 1.0);
    const double uu = l2_norm(u);
    for (double& e : u) e /= uu;
    const double along = dot(common, u);
    for (std::size_t k = 0; k < cfg.head_dim; ++k) common[k] -= along * u[k];
    const double cc = l2_norm(common);
    for (std::size_t k = 0; k < cfg.head_dim; ++k) {
      w.w_v(0, col + k) = u[k] / kSinkMagnitude;
      w.w_v(kCommonDim, col + k) = common[k] / cc;
    }
  }
  SyntheticSpec spec;
  spec.layout = {24, 8};
  spec.hidden_dim = cfg.hidden_dim;
  spec.seed = seed + 1;
  spec.planted_sinks = {{0, 0, kSinkMagnitude}};
  c.x0 = gen_synthetic_sequence(spec);
  const std::size_t n = spec.layout.total();
  for (std::size_t i = 0; i < n; ++i) {
    c.x0(i, kRampDim) = -1.0 + 2.5 * static_cast<double>(i) / static_cast<double>(n - 1);
    c.x0(i, kCommonDim) = i == 0 ? 0.0 : 1.0;
  }
  c.layout = spec.layout;
  c.constructed_heads = {0, 1, 2, 3};
  return c;
}

AblationCase ablation_case(std::uint64_t seed) {
  DecoderConfig cfg{1, 32, 4, 8, 16, seed};
  AblationCase ac;
  ac.source_dim = 5;
  ac.readout_dim = 9;
  Construction& c = ac.construction;
  c.model = zero_ffn(scale_weights(init_seeded(cfg), 0.3));
  LayerWeights& w = c.model.layers[0];
  for (std::size_t r = 0; r < cfg.hidden_dim; ++r) {
    for (std::size_t k = 0; k < cfg.head_dim; ++k) {
      w.w_q(r, k) = 0.0;
      w.w_k(r, k) = 0.0;
      w.w_v(r, k) = 0.0;
    }
    w.w_o(r, ac.readout_dim) = 0.0;
  }
  for (std::size_t k = 0; k < cfg.head_dim; ++k) {
    for (std::size_t col = 0; col < cfg.hidden_dim; ++col) w.w_o(k, col) = 0.0;
  }
  w.w_v(ac.source_dim, 0) = 1.0;
  w.w_o(0, ac.readout_dim) = 1.0;

  SyntheticSpec spec;
  spec.layout = {12, 4};
  spec.hidden_dim = cfg.hidden_dim;
  spec.seed = seed + 1;
  spec.planted_sinks = {{0, 3, 500.0}};
  c.x0 = gen_synthetic_sequence(spec);
  c.layout = spec.layout;
  c.constructed_heads = {0};

  const std::size_t n = c.x0.rows();
  ac.task.readout.assign(cfg.hidden_dim, 0.0);
  ac.task.readout[ac.readout_dim] = 1.0;
  double running = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    running += c.x0(i, ac.source_dim);
    ac.task.targets.push_back(c.x0(i, ac.readout_dim) + running / static_cast<double>(i + 1));
  }
  return ac;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

InterventionConfig analysis_config() {
  InterventionConfig cfg;
  cfg.gamma = 0.0;
  cfg.rotation_enabled = false;
  cfg.relaxation_enabled = false;
  cfg.recheck_decode_sinks = false;
  return cfg;
}

InterventionHooks analysis_hooks(const Model& model, const DetectionParams& params,
                                 std::size_t zero_k = 0, std::vector<HeadId> pruned = {}) {
  InterventionConfig cfg = analysis_config();
  cfg.zero_k = zero_k;
  cfg.pruned_heads = std::move(pruned);
  return InterventionHooks(cfg, params, SinkCriterion::kLlm, model.config);
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

ZeroKCurve sink_attention_curve(const ForwardPass& pass, std::size_t k) {
  ZeroKCurve curve;
  curve.k = k;
  for (const AttentionState& state : pass.attention) {
    const auto scores = compute_sink_score(state, state.sinks);
    curve.mean_sink_attention.push_back(mean(scores));
    curve.per_head.push_back(scores);
  }
  return curve;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(harness_threads(), std::max<std::size_t>(count, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < count; i += workers) fn(i);
    });
  }
  for (std::thread& th : pool) th.join();
}

}  // namespace

std::size_t harness_threads() {
  if (const char* env = std::getenv("SINKLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

CensusResult run_sink_census(const Model& model, const Matrix& x0, const DetectionParams& params) {
  const ForwardPass pass = forward_all(x0, model);
  CensusResult census;
  const bool with_vlm = !params.sink_dims.empty();
  if (with_vlm) census.total_vlm = 0;
  for (std::size_t l = 0; l < pass.hidden.layers.size(); ++l) {
    const Matrix& states = pass.hidden.layers[l];
    CensusRow row;
    row.layer = l;
    row.num_tokens = states.rows();
    const SinkSet llm = detect_sinks_llm(states, params, l);
    row.llm_sinks = llm.indices;
    row.llm_threshold = llm.threshold;
    census.total_llm += llm.size();
    if (with_vlm) {
      row.vlm_sinks = detect_sinks_vlm(states, params, l).indices;
      *census.total_vlm += row.vlm_sinks->size();
    }
    if (l < pass.attention.size()) {
      census.sink_scores.scores.push_back(compute_sink_score(pass.attention[l], llm));
    }
    census.rows.push_back(std::move(row));
  }
  const std::vector<HiddenStates> runs{pass.hidden};
  census.outliers = find_outlier_dims(runs, OutlierCriterion{});
  return census;
}

CensusResult run_sink_census(const Model& model, const SyntheticSpec& spec,
                             const DetectionParams& params) {
  return run_sink_census(model, gen_synthetic_sequence(spec), params);
}

ZeroKStudy run_zero_k_study(const Model& model, const Matrix& x0, const DetectionParams& params,
                            std::span<const std::size_t> ks) {
  ZeroKStudy study;
  const ForwardPass base = forward_all(x0, model, analysis_hooks(model, params));
  study.baseline = sink_attention_curve(base, 0);
  for (std::size_t idx = 0; idx < ks.size(); ++idx) {
    const std::size_t k = ks[idx];
    const ForwardPass run = forward_all(x0, model, analysis_hooks(model, params, k));
    study.curves.push_back(sink_attention_curve(run, k));
    if (idx != 0) continue;
    for (std::size_t l = 0; l < base.attention.size(); ++l) {
      const AttentionState& a = base.attention[l];
      const AttentionState& b = run.attention[l];
      if (a.num_tokens() != b.num_tokens()) continue;
      for (std::size_t h = 0; h < a.heads.size(); ++h) {
        double sink_sum = 0.0;
        double other_sum = 0.0;
        std::size_t sink_n = 0;
        std::size_t other_n = 0;
        for (std::size_t i = 0; i < a.num_tokens(); ++i) {
          for (std::size_t j = 0; j <= i; ++j) {
            const double d = std::abs(b.heads[h].attn(i, j) - a.heads[h].attn(i, j));
            if (a.sinks.contains(j)) {
              sink_sum += d;
              ++sink_n;
            } else {
              other_sum += d;
              ++other_n;
            }
          }
        }
        study.diffs.push_back({l, h, sink_n ? sink_sum / static_cast<double>(sink_n) : 0.0,
                               other_n ? other_sum / static_cast<double>(other_n) : 0.0});
      }
    }
  }
  return study;
}

void write_attention_diff_csv(const std::filesystem::path& path, const Model& model,
                              const Matrix& x0, const DetectionParams& params, std::size_t k) {
  const ForwardPass base = forward_all(x0, model, analysis_hooks(model, params));
  const ForwardPass run = forward_all(x0, model, analysis_hooks(model, params, k));
  CsvWriter csv(path, {"layer", "head", "row", "col", "baseline", "intervened", "delta"});
  for (std::size_t l = 0; l < base.attention.size(); ++l) {
    const AttentionState& a = base.attention[l];
    const AttentionState& b = run.attention[l];
    if (a.num_tokens() != b.num_tokens()) continue;
    for (std::size_t h = 0; h < a.heads.size(); ++h) {
      for (std::size_t i = 0; i < a.num_tokens(); ++i) {
        for (std::size_t j = 0; j < a.num_tokens(); ++j) {
          const double before = a.heads[h].attn(i, j);
          const double after = b.heads[h].attn(i, j);
          csv.cell(l).cell(h).cell(i).cell(j).cell(before).cell(after).cell(after - before);
          csv.end_row();
        }
      }
    }
  }
}

ProbeTask linear_probe_task(const Matrix& x0, std::uint64_t seed) {
  Rng rng(seed);
  ProbeTask task;
  task.readout.resize(x0.cols());
  for (double& b : task.readout) b = rng.uniform(-1.0, 1.0);
  const double norm = l2_norm(task.readout);
  for (double& b : task.readout) b /= norm;
  for (std::size_t i = 0; i < x0.rows(); ++i) task.targets.push_back(dot(x0.row(i), task.readout));
  return task;
}

double probe_mse(const Matrix& final_hidden, const ProbeTask& task) {
  if (final_hidden.rows() != task.targets.size()) {
    throw InvalidArgument("probe_mse: target count != token count");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < final_hidden.rows(); ++i) {
    const double err = dot(final_hidden.row(i), task.readout) - task.targets[i];
    acc += err * err;
  }
  return acc / static_cast<double>(final_hidden.rows());
}

AblationResult run_ablation_sweep(const Model& model, const Matrix& x0, const ProbeTask& task,
                                  const DetectionParams& params, std::span<const HeadId> heads) {
  std::vector<HeadId> targets(heads.begin(), heads.end());
  if (targets.empty()) {
    for (std::size_t l = 0; l < model.config.num_layers; ++l) {
      for (std::size_t h = 0; h < model.config.num_heads; ++h) targets.emplace_back(l, h);
    }
  }
  const ForwardPass base = forward_all(x0, model, analysis_hooks(model, params));
  AblationResult result;
  result.baseline_mse = probe_mse(base.hidden.layers.back(), task);
  std::vector<std::vector<double>> scores;
  for (const AttentionState& state : base.attention) {
    scores.push_back(compute_sink_score(state, state.sinks));
  }
  result.entries.resize(targets.size());
  parallel_for(targets.size(), [&](std::size_t i) {
    const auto [l, h] = targets[i];
    const ForwardPass run = forward_all(x0, model, analysis_hooks(model, params, 0, {targets[i]}));
    const double mse = probe_mse(run.hidden.layers.back(), task);
    result.entries[i] = {l, h, scores.at(l).at(h), mse, mse - result.baseline_mse};
  });
  std::stable_sort(result.entries.begin(), result.entries.end(),
                   [](const AblationEntry& a, const AblationEntry& b) {
                     return a.sink_score > b.sink_score;
                   });
  return result;
}

std::vector<PruningSweepPoint> run_pruning_fraction_sweep(const Model& model, const Matrix& x0,
                                                          const ProbeTask& task,
                                                          const DetectionParams& params,
                                                          std::span<const double> fractions,
                                                          std::uint64_t seed) {
  const ForwardPass base = forward_all(x0, model, analysis_hooks(model, params));
  std::vector<std::pair<double, HeadId>> ranked;
  for (const AttentionState& state : base.attention) {
    const auto scores = compute_sink_score(state, state.sinks);
    for (std::size_t h = 0; h < scores.size(); ++h) ranked.push_back({scores[h], {state.layer, h}});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<HeadId> shuffled;
  for (const auto& r : ranked) shuffled.push_back(r.second);
  std::sort(shuffled.begin(), shuffled.end());
  Rng rng(seed);
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);

  std::vector<PruningSweepPoint> points;
  for (double fraction : fractions) {
    const auto count = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(ranked.size()) + 1e-9));
    std::vector<HeadId> by_score;
    for (std::size_t i = 0; i < count && i < ranked.size(); ++i) by_score.push_back(ranked[i].second);
    std::vector<HeadId> random(shuffled.begin(),
                               shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(count, shuffled.size())));
    const auto mse_for = [&](std::vector<HeadId> pruned) {
      const ForwardPass run = forward_all(x0, model, analysis_hooks(model, params, 0, std::move(pruned)));
      return probe_mse(run.hidden.layers.back(), task);
    };
    points.push_back({fraction, count, mse_for(by_score), mse_for(random)});
  }
  return points;
}

CorrelationResult run_proxy_correlation(const Model& model, const Matrix& x0,
                                        const DetectionParams& params) {
  const ForwardPass pass = forward_all(x0, model, analysis_hooks(model, params));
  CorrelationResult result;
  double total = 0.0;
  for (const AttentionState& state : pass.attention) {
    if (state.sinks.empty()) continue;
    const auto dir = sink_value_direction(state, state.sinks);
    for (std::size_t h = 0; h < state.heads.size(); ++h) {
      const HeadState& head = state.heads[h];
      const Vector& vbar = dir->heads[h];
      if (l2_norm(vbar) == 0.0) {
        ++result.skipped_heads;
        continue;
      }
      Vector mass;
      Vector alignment;
      for (std::size_t i = 0; i < head.out.rows(); ++i) {
        if (state.sinks.contains(i) || l2_norm(head.out.row(i)) == 0.0) continue;
        double m = 0.0;
        for (std::size_t s : state.sinks.indices) m += head.attn(i, s);
        mass.push_back(m);
        alignment.push_back(cosine(head.out.row(i), vbar));
      }
      try {
        const double r = pearson(mass, alignment);
        result.entries.push_back({state.layer, h, mass.size(), r});
        total += r;
      } catch (const UndefinedCorrelation&) {
        ++result.skipped_heads;
      } catch (const InvalidArgument&) {
        ++result.skipped_heads;
      }
    }
  }
  if (!result.entries.empty()) total /= static_cast<double>(result.entries.size());
  if (!result.entries.empty()) result.mean_r = total;
  return result;
}

double LatencyResult::ratio(const std::string& variant) const {
  for (const LatencyEntry& e : entries) {
    if (e.variant == variant) return e.relative;
  }
  throw InvalidArgument("latency: no variant " + variant);
}

LatencyResult latency_bench(const Model& model, const Matrix& x0, const TokenLayout& layout,
                            const DetectionParams& params, const LatencyConfig& config) {
  using Clock = std::chrono::steady_clock;
  struct Variant {
    std::string name;
    std::unique_ptr<InterventionHooks> hooks;
    DecodeCache cache;
    std::size_t prefill_tokens = 0;
    std::vector<double> samples;
  };
  std::vector<Variant> variants;
  variants.push_back({"baseline", nullptr, {}, 0, {}});
  const auto make = [&](const std::string& name, InterventionConfig cfg) {
    variants.push_back({name,
                        std::make_unique<InterventionHooks>(cfg, params, SinkCriterion::kLlm,
                                                            model.config, layout),
                        {}, 0, {}});
  };
  InterventionConfig outro = config.outro;
  outro.keep_fraction = 1.0;
  make("outro", outro);
  if (config.include_gamma_zero) {
    InterventionConfig zero = outro;
    zero.gamma = 0.0;
    zero.relaxation_enabled = false;
    make("outro_gamma0", zero);
  }
  InterventionConfig pruned = outro;
  pruned.keep_fraction = config.prune_keep_fraction;
  make("outro_prune", pruned);

  for (Variant& v : variants) {
    const LayerHooks& hooks = v.hooks ? static_cast<const LayerHooks&>(*v.hooks) : no_hooks();
    const ForwardPass pass = forward_all(x0, model, hooks);
    v.cache = make_decode_cache(pass);
    v.prefill_tokens = pass.hidden.layers.back().rows();
    v.samples.reserve(config.timed_steps);
  }

  Rng rng(config.seed);
  Vector row(model.config.hidden_dim);
  for (std::size_t step = 0; step < config.warmup_steps + config.timed_steps; ++step) {
    for (double& e : row) e = rng.uniform(-0.2, 0.2);
    // Round-robin so slow drift on the host hits every variant alike.
    for (Variant& v : variants) {
      const LayerHooks& hooks = v.hooks ? static_cast<const LayerHooks&>(*v.hooks) : no_hooks();
      const auto start = Clock::now();
      const Vector out = decode_step(model, v.cache, row, hooks);
      const auto stop = Clock::now();
      if (step >= config.warmup_steps) {
        v.samples.push_back(std::chrono::duration<double>(stop - start).count());
      }
      (void)out;
    }
  }

  LatencyResult result;
  double base_median = 0.0;
  for (Variant& v : variants) {
    std::vector<double>& s = v.samples;
    double median = 0.0;
    if (!s.empty()) {
      std::sort(s.begin(), s.end());
      median = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
    }
    if (v.name == "baseline") base_median = median;
    result.entries.push_back(
        {v.name, v.prefill_tokens, v.cache.layers.empty() ? 0 : v.cache.layers.back().length(),
         median, 0.0});
  }
  for (LatencyEntry& e : result.entries) {
    e.relative = base_median > 0.0 ? e.median_seconds_per_token / base_median : 0.0;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

json census_json(const CensusResult& c) {
  json rows = json::array();
  for (const CensusRow& r : c.rows) {
    json row = {{"layer", r.layer},
                {"num_tokens", r.num_tokens},
                {"llm_count", r.llm_sinks.size()},
                {"llm_sinks", r.llm_sinks},
                {"llm_threshold", r.llm_threshold}};
    if (r.vlm_sinks) {
      row["vlm_count"] = r.vlm_sinks->size();
      row["vlm_sinks"] = *r.vlm_sinks;
    }
    rows.push_back(row);
  }
  json outliers = json::array();
  for (const OutlierDim& o : c.outliers) {
    outliers.push_back({{"dim", o.dim},
                        {"max_activation", o.max_activation},
                        {"layer_pct", o.layer_pct},
                        {"token_pct", o.token_pct}});
  }
  json doc = {{"layers", rows},
              {"total_llm", c.total_llm},
              {"sink_scores", c.sink_scores.scores},
              {"outlier_dims", outliers}};
  if (c.total_vlm) doc["total_vlm"] = *c.total_vlm;
  return doc;
}

json curve_json(const ZeroKCurve& c) {
  return {{"k", c.k}, {"mean_sink_attention", c.mean_sink_attention}, {"per_head", c.per_head}};
}

}  // namespace

json ExperimentReport::to_json(bool include_timings) const {
  json doc = {{"experiment", experiment}, {"config", config}};
  if (census) doc["census"] = census_json(*census);
  if (zero_k) {
    json curves = json::array();
    for (const ZeroKCurve& c : zero_k->curves) curves.push_back(curve_json(c));
    json diffs = json::array();
    for (const AttentionDiffSummary& d : zero_k->diffs) {
      diffs.push_back({{"layer", d.layer},
                       {"head", d.head},
                       {"mean_abs_delta_sink", d.mean_abs_delta_sink},
                       {"mean_abs_delta_non_sink", d.mean_abs_delta_non_sink}});
    }
    doc["zero_k"] = {{"baseline", curve_json(zero_k->baseline)},
                     {"curves", curves},
                     {"attention_diff", diffs}};
  }
  if (ablation) {
    json entries = json::array();
    for (const AblationEntry& e : ablation->entries) {
      entries.push_back({{"layer", e.layer},
                         {"head", e.head},
                         {"sink_score", e.sink_score},
                         {"pruned_mse", e.pruned_mse},
                         {"delta", e.delta}});
    }
    doc["ablation"] = {{"baseline_mse", ablation->baseline_mse}, {"entries", entries}};
  }
  if (correlation) {
    json entries = json::array();
    for (const CorrelationEntry& e : correlation->entries) {
      entries.push_back(
          {{"layer", e.layer}, {"head", e.head}, {"samples", e.samples}, {"pearson_r", e.pearson_r}});
    }
    doc["correlation"] = {{"entries", entries},
                          {"mean_r", correlation->mean_r ? json(*correlation->mean_r) : json(nullptr)},
                          {"skipped_heads", correlation->skipped_heads}};
  }
  if (latency) {
    json entries = json::array();
    for (const LatencyEntry& e : latency->entries) {
      json entry = {{"variant", e.variant},
                    {"prefill_tokens", e.prefill_tokens},
                    {"cached_tokens_last_layer", e.cached_tokens_last_layer}};
      if (include_timings) {
        entry["median_seconds_per_token"] = e.median_seconds_per_token;
        entry["relative"] = e.relative;
      }
      entries.push_back(entry);
    }
    doc["latency"] = entries;
  }
  if (!extra.is_null()) doc["details"] = extra;
  return doc;
}

void write_census_csv(const std::filesystem::path& path, const CensusResult& census) {
  CsvWriter csv(path, {"layer", "num_tokens", "llm_count", "vlm_count", "llm_threshold"});
  for (const CensusRow& r : census.rows) {
    csv.cell(r.layer).cell(r.num_tokens).cell(r.llm_sinks.size());
    if (r.vlm_sinks) {
      csv.cell(r.vlm_sinks->size());
    } else {
      csv.cell("");
    }
    csv.cell(r.llm_threshold).end_row();
  }
}

void write_sink_scores_csv(const std::filesystem::path& path, const SinkScoreTable& table) {
  CsvWriter csv(path, {"layer", "head", "sink_score"});
  for (std::size_t l = 0; l < table.scores.size(); ++l) {
    for (std::size_t h = 0; h < table.scores[l].size(); ++h) {
      csv.cell(l).cell(h).cell(table.scores[l][h]).end_row();
    }
  }
}

void write_zero_k_csv(const std::filesystem::path& path, const ZeroKStudy& study) {
  CsvWriter csv(path, {"k", "layer", "mean_sink_attention"});
  const auto emit = [&](const ZeroKCurve& c) {
    for (std::size_t l = 0; l < c.mean_sink_attention.size(); ++l) {
      csv.cell(c.k).cell(l).cell(c.mean_sink_attention[l]).end_row();
    }
  };
  emit(study.baseline);
  for (const ZeroKCurve& c : study.curves) emit(c);
}

void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result) {
  CsvWriter csv(path, {"layer", "head", "sink_score", "baseline_mse", "pruned_mse", "delta"});
  for (const AblationEntry& e : result.entries) {
    csv.cell(e.layer).cell(e.head).cell(e.sink_score).cell(result.baseline_mse);
    csv.cell(e.pruned_mse).cell(e.delta).end_row();
  }
}

void write_correlation_csv(const std::filesystem::path& path, const CorrelationResult& result) {
  CsvWriter csv(path, {"layer", "head", "samples", "pearson_r"});
  for (const CorrelationEntry& e : result.entries) {
    csv.cell(e.layer).cell(e.head).cell(e.samples).cell(e.pearson_r).end_row();
  }
}

void write_latency_csv(const std::filesystem::path& path, const LatencyResult& result) {
  CsvWriter csv(path, {"variant", "prefill_tokens", "cached_tokens_last_layer",
                       "median_seconds_per_token", "relative"});
  for (const LatencyEntry& e : result.entries) {
    csv.cell(e.variant).cell(e.prefill_tokens).cell(e.cached_tokens_last_layer);
    csv.cell(e.median_seconds_per_token).cell(e.relative).end_row();
  }
}

}  // namespace sinklab
