#pragma once

// Synthetic inputs with controllable sink structure and the experiment
// drivers built on them.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinklab/decoder.hpp"
#include "sinklab/interventions.hpp"
#include "sinklab/sink_detect.hpp"

namespace sinklab {

struct PlantedValue {
  std::size_t token = 0;
  std::size_t dim = 0;
  double magnitude = 0.0;
};

struct PlantedOutlierDim {
  std::size_t dim = 0;
  double magnitude = 0.0;
  double token_fraction = 1.0;  // fraction of tokens carrying the value
};

struct SyntheticSpec {
  TokenLayout layout;
  std::size_t hidden_dim = 64;
  double base_scale = 0.2;
  std::vector<PlantedValue> planted_sinks;
  std::vector<PlantedOutlierDim> planted_outlier_dims;
  std::uint64_t seed = 0;

  void validate() const;
};

// Base entries uniform in [-base_scale, base_scale); outlier dims written
// next on a seeded subset of tokens; planted sink values written last.
Matrix gen_synthetic_sequence(const SyntheticSpec& spec);

// Copy of model with every weight multiplied by factor.
Model scale_weights(Model model, double factor);
// Sets every FFN weight to zero so each layer's FFN is the identity.
Model zero_ffn(Model model);

// A model and an input built so that one mechanism is expected to show.
struct Construction {
  Model model;
  Matrix x0;
  TokenLayout layout;
  DetectionParams detection;
  std::size_t constructed_layer = 0;
  std::vector<std::size_t> constructed_heads;
};

// One 500-magnitude value on a uniform(+-0.2) background.
SyntheticSpec planted_sink_spec(std::uint64_t seed, std::size_t hidden_dim = 64,
                                std::size_t num_tokens = 32);

// 60% of tokens carry D_sink values far above their RMS (but below the LLM
// threshold) plus one massive token; residual-dominated small weights keep
// the pattern across layers.
Construction over_identification_case(std::uint64_t seed);

// Every query has a single non-zero component, and the sink key carries the
// whole query.key product in one dimension.
Construction zero_k_case(std::uint64_t seed);

// One sink whose value vector is a fixed direction u per head; a ramp feature
// makes attention to the sink vary smoothly across positions. `noise` scales
// the non-sink value vectors.
Construction proxy_correlation_case(std::uint64_t seed, double noise = 0.5);

// ---------------------------------------------------------------------------
// Reports

struct CensusRow {
  std::size_t layer = 0;  // index into HiddenStates::layers
  std::size_t num_tokens = 0;
  std::vector<std::size_t> llm_sinks;
  std::optional<std::vector<std::size_t>> vlm_sinks;  // absent without D_sink
  double llm_threshold = 0.0;
};

struct CensusResult {
  std::vector<CensusRow> rows;
  std::size_t total_llm = 0;
  std::optional<std::size_t> total_vlm;
  SinkScoreTable sink_scores;  // LLM sinks of each attention layer's input
  std::vector<OutlierDim> outliers;
};

struct ZeroKCurve {
  std::size_t k = 0;
  std::vector<double> mean_sink_attention;  // per attention layer, averaged over heads
  std::vector<std::vector<double>> per_head;
};

struct AttentionDiffSummary {
  std::size_t layer = 0;
  std::size_t head = 0;
  double mean_abs_delta_sink = 0.0;
  double mean_abs_delta_non_sink = 0.0;
};

struct ZeroKStudy {
  ZeroKCurve baseline;
  std::vector<ZeroKCurve> curves;  // one per requested k
  std::vector<AttentionDiffSummary> diffs;  // for the first k
};

struct ProbeTask {
  Vector readout;   // prediction_i = final_hidden_i . readout
  Vector targets;   // one per token
};

// Head 0 of the single layer averages feature `source_dim` uniformly and
// writes it into `readout_dim`; the other heads never touch `readout_dim`.
// The task asks for x_i[readout] + mean_{j<=i} x_j[source], which the
// unpruned model reproduces exactly.
struct AblationCase {
  Construction construction;
  ProbeTask task;
  std::size_t source_dim = 0;
  std::size_t readout_dim = 0;
};
AblationCase ablation_case(std::uint64_t seed);

struct AblationEntry {
  std::size_t layer = 0;
  std::size_t head = 0;
  double sink_score = 0.0;
  double pruned_mse = 0.0;
  double delta = 0.0;  // pruned - baseline
};

struct AblationResult {
  double baseline_mse = 0.0;
  std::vector<AblationEntry> entries;  // sorted by sink score, descending
};

struct PruningSweepPoint {
  double fraction = 0.0;
  std::size_t heads_pruned = 0;
  double sink_score_mse = 0.0;
  double random_mse = 0.0;
};

struct CorrelationEntry {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t samples = 0;
  double pearson_r = 0.0;
};

struct CorrelationResult {
  std::vector<CorrelationEntry> entries;
  std::optional<double> mean_r;
  std::size_t skipped_heads = 0;
};

struct LatencyConfig {
  std::size_t warmup_steps = 20;
  std::size_t timed_steps = 200;
  InterventionConfig outro;
  double prune_keep_fraction = 0.4;
  bool include_gamma_zero = true;
  std::uint64_t seed = 0;
};

struct LatencyEntry {
  std::string variant;
  std::size_t prefill_tokens = 0;
  std::size_t cached_tokens_last_layer = 0;
  double median_seconds_per_token = 0.0;
  double relative = 0.0;  // median / baseline median
};

struct LatencyResult {
  std::vector<LatencyEntry> entries;
  double ratio(const std::string& variant) const;
};

struct ExperimentReport {
  std::string experiment;
  nlohmann::json config;
  std::optional<CensusResult> census;
  std::optional<ZeroKStudy> zero_k;
  std::optional<AblationResult> ablation;
  std::optional<CorrelationResult> correlation;
  std::optional<LatencyResult> latency;
  nlohmann::json extra;

  nlohmann::json to_json(bool include_timings = true) const;
};

// ---------------------------------------------------------------------------
// Experiments

// Worker count for experiments that fan out: SINKLAB_THREADS if set, else the
// hardware concurrency.
std::size_t harness_threads();

CensusResult run_sink_census(const Model& model, const Matrix& x0, const DetectionParams& params);
CensusResult run_sink_census(const Model& model, const SyntheticSpec& spec,
                             const DetectionParams& params);

ZeroKStudy run_zero_k_study(const Model& model, const Matrix& x0, const DetectionParams& params,
                            std::span<const std::size_t> ks);
// layer,head,row,col,baseline,intervened,delta for every attention entry of
// the baseline and Zero-K(k) passes.
void write_attention_diff_csv(const std::filesystem::path& path, const Model& model,
                              const Matrix& x0, const DetectionParams& params, std::size_t k);

// Random unit readout beta and targets x0 . beta.
ProbeTask linear_probe_task(const Matrix& x0, std::uint64_t seed);
double probe_mse(const Matrix& final_hidden, const ProbeTask& task);
// heads empty = every (layer, head) of the model.
AblationResult run_ablation_sweep(const Model& model, const Matrix& x0, const ProbeTask& task,
                                  const DetectionParams& params, std::span<const HeadId> heads = {});
// Prunes the top fraction of heads by sink score and a random set of the same size.
std::vector<PruningSweepPoint> run_pruning_fraction_sweep(const Model& model, const Matrix& x0,
                                                          const ProbeTask& task,
                                                          const DetectionParams& params,
                                                          std::span<const double> fractions,
                                                          std::uint64_t seed);

CorrelationResult run_proxy_correlation(const Model& model, const Matrix& x0,
                                        const DetectionParams& params);

LatencyResult latency_bench(const Model& model, const Matrix& x0, const TokenLayout& layout,
                            const DetectionParams& params, const LatencyConfig& config);

void write_census_csv(const std::filesystem::path& path, const CensusResult& census);
void write_sink_scores_csv(const std::filesystem::path& path, const SinkScoreTable& table);
void write_zero_k_csv(const std::filesystem::path& path, const ZeroKStudy& study);
void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result);
void write_correlation_csv(const std::filesystem::path& path, const CorrelationResult& result);
void write_latency_csv(const std::filesystem::path& path, const LatencyResult& result);

}  // namespace sinklab
