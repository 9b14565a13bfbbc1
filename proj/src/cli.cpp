#include "sinklab/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sinklab/csv.hpp"
#include "sinklab/error.hpp"
#include "sinklab/harness.hpp"
#include "sinklab/rng.hpp"

namespace sinklab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitSchema = 3;
constexpr int kExitNumeric = 4;

// Everything a subcommand can be told on the command line. Unset optionals
// fall back to the config file, then to built-in defaults.
struct Flags {
  std::string config_path;
  std::string weights_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "sinklab_out";
  std::optional<double> gamma;
  std::optional<double> gate_temp;
  std::optional<std::size_t> enh_layer;
  std::optional<std::size_t> skip_final;
  std::optional<std::size_t> zero_k;
  std::optional<double> keep_fraction;
  std::optional<std::string> criterion;
  std::vector<std::size_t> sink_dims;
  bool disable_rotation = false;
  bool disable_relaxation = false;
  std::string manifest_path;
  std::optional<std::string> rerun_out;
};

// Resolved run inputs shared by every experiment.
struct RunSetup {
  json config;  // echo of the resolved settings, goes into report.json
  Model model;
  Matrix x0;
  TokenLayout layout;
  double input_scale = 0.2;
  std::uint64_t input_seed = 0;
  DetectionParams detection;
  SinkCriterion criterion = SinkCriterion::kLlm;
  InterventionConfig interventions;
  std::size_t decode_steps = 4;
  std::vector<std::size_t> zero_k_list{1, 5, 10};
  LatencyConfig bench;
};

template <typename T>
T field(const json& section, const char* key, T fallback) {
  if (!section.is_object() || !section.contains(key) || section.at(key).is_null()) return fallback;
  try {
    return section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

json section(const json& doc, const char* key) {
  if (!doc.contains(key) || doc.at(key).is_null()) return json::object();
  if (!doc.at(key).is_object()) throw ConfigError(std::string("config section '") + key + "' must be an object");
  return doc.at(key);
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw ConfigError("config file " + path + " is not a JSON object");
  }
  return doc;
}

RunSetup resolve(const Flags& flags) {
  const json doc = load_config(flags.config_path);
  const json model_sec = section(doc, "model");
  const json input_sec = section(doc, "input");
  const json det_sec = section(doc, "detection");
  const json bench_sec = section(doc, "bench");

  const bool has_weights = !flags.weights_path.empty() || model_sec.contains("weights");
  const bool has_seed = flags.seed.has_value() || model_sec.contains("seed");
  if (!flags.weights_path.empty() && flags.seed) {
    throw ConfigError("give exactly one of --weights and --seed");
  }
  if (!has_weights && !has_seed) throw ConfigError("one of --weights or --seed is required");

  RunSetup s;
  std::uint64_t model_seed = 0;
  std::string weights = flags.weights_path;
  if (weights.empty() && !flags.seed) weights = field<std::string>(model_sec, "weights", "");
  if (!weights.empty()) {
    s.model = load_weights(weights);
    model_seed = s.model.config.seed;
  } else {
    DecoderConfig cfg;
    cfg.num_layers = field(model_sec, "num_layers", cfg.num_layers);
    cfg.hidden_dim = field(model_sec, "hidden_dim", cfg.hidden_dim);
    cfg.num_heads = field(model_sec, "num_heads", cfg.num_heads);
    cfg.head_dim = field(model_sec, "head_dim", cfg.head_dim);
    cfg.ffn_dim = field(model_sec, "ffn_dim", cfg.ffn_dim);
    cfg.seed = flags.seed ? *flags.seed : field<std::uint64_t>(model_sec, "seed", 0);
    model_seed = cfg.seed;
    const double scale = field(model_sec, "weight_scale", 1.0);
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("model.weight_scale must be > 0");
    s.model = init_seeded(cfg);
    if (scale != 1.0) s.model = scale_weights(std::move(s.model), scale);
  }
  const DecoderConfig& mc = s.model.config;

  SyntheticSpec spec;
  spec.layout.num_modality = field<std::size_t>(input_sec, "num_modality", 24);
  spec.layout.num_text = field<std::size_t>(input_sec, "num_text", 8);
  spec.hidden_dim = mc.hidden_dim;
  spec.base_scale = field(input_sec, "base_scale", 0.2);
  spec.seed = field<std::uint64_t>(input_sec, "seed", model_seed + 1);
  if (input_sec.contains("planted_sinks")) {
    for (const json& p : input_sec.at("planted_sinks")) {
      spec.planted_sinks.push_back({field<std::size_t>(p, "token", 0), field<std::size_t>(p, "dim", 0),
                                    field(p, "magnitude", 500.0)});
    }
  } else {
    spec.planted_sinks.push_back({0, 0, 500.0});
  }
  if (input_sec.contains("planted_outlier_dims")) {
    for (const json& p : input_sec.at("planted_outlier_dims")) {
      spec.planted_outlier_dims.push_back({field<std::size_t>(p, "dim", 0), field(p, "magnitude", 0.0),
                                           field(p, "token_fraction", 1.0)});
    }
  }
  s.x0 = gen_synthetic_sequence(spec);
  s.layout = spec.layout;
  s.input_scale = spec.base_scale;
  s.input_seed = spec.seed;

  s.detection.llm_abs_floor = field(det_sec, "llm_abs_floor", s.detection.llm_abs_floor);
  s.detection.llm_median_mult = field(det_sec, "llm_median_mult", s.detection.llm_median_mult);
  s.detection.vlm_tau = field(det_sec, "vlm_tau", s.detection.vlm_tau);
  s.detection.sink_dims = flags.sink_dims.empty()
                              ? field(det_sec, "sink_dims", std::vector<std::size_t>{})
                              : flags.sink_dims;
  const std::string criterion =
      flags.criterion ? *flags.criterion : field<std::string>(det_sec, "criterion", "llm");
  if (criterion == "llm") {
    s.criterion = SinkCriterion::kLlm;
  } else if (criterion == "vlm") {
    s.criterion = SinkCriterion::kVlm;
    if (s.detection.sink_dims.empty()) throw ConfigError("--criterion vlm requires sink dims");
  } else {
    throw ConfigError("unknown criterion '" + criterion + "'");
  }
  s.detection.validate(mc.hidden_dim);

  InterventionConfig& iv = s.interventions;
  if (doc.contains("interventions")) iv = InterventionConfig::from_json(doc.at("interventions"));
  if (flags.gamma) iv.gamma = *flags.gamma;
  if (flags.gate_temp) iv.gate_temperature = *flags.gate_temp;
  if (flags.enh_layer) iv.enh_layer = *flags.enh_layer;
  if (flags.skip_final) iv.skip_final_layers = *flags.skip_final;
  if (flags.zero_k) iv.zero_k = *flags.zero_k;
  if (flags.keep_fraction) iv.keep_fraction = *flags.keep_fraction;
  if (flags.disable_rotation) iv.rotation_enabled = false;
  if (flags.disable_relaxation) iv.relaxation_enabled = false;
  iv.validate(mc);

  s.decode_steps = field(doc, "decode_steps", s.decode_steps);
  if (flags.zero_k) {
    s.zero_k_list = {*flags.zero_k};
  } else if (doc.contains("zero_k_list")) {
    s.zero_k_list = field(doc, "zero_k_list", s.zero_k_list);
  } else {
    // Narrow heads keep only the default k values they can hold.
    std::erase_if(s.zero_k_list, [&](std::size_t k) { return k > mc.head_dim; });
  }
  for (std::size_t k : s.zero_k_list) {
    if (k > mc.head_dim) throw ConfigError("zero_k_list entry exceeds head_dim");
  }

  s.bench.warmup_steps = field(bench_sec, "warmup_steps", s.bench.warmup_steps);
  s.bench.timed_steps = field(bench_sec, "timed_steps", s.bench.timed_steps);
  s.bench.prune_keep_fraction = field(bench_sec, "prune_keep_fraction", s.bench.prune_keep_fraction);
  s.bench.include_gamma_zero = field(bench_sec, "include_gamma_zero", s.bench.include_gamma_zero);
  s.bench.seed = field<std::uint64_t>(bench_sec, "seed", s.input_seed + 2);
  s.bench.outro = iv;
  if (!(s.bench.prune_keep_fraction > 0.0 && s.bench.prune_keep_fraction <= 1.0)) {
    throw ConfigError("bench.prune_keep_fraction must lie in (0, 1]");
  }

  json det = {{"criterion", criterion},
              {"llm_abs_floor", s.detection.llm_abs_floor},
              {"llm_median_mult", s.detection.llm_median_mult},
              {"vlm_tau", s.detection.vlm_tau},
              {"sink_dims", s.detection.sink_dims}};
  s.config = {{"model", {{"num_layers", mc.num_layers},
                         {"hidden_dim", mc.hidden_dim},
                         {"num_heads", mc.num_heads},
                         {"head_dim", mc.head_dim},
                         {"ffn_dim", mc.ffn_dim},
                         {"seed", mc.seed}}},
              {"input", {{"num_modality", s.layout.num_modality},
                         {"num_text", s.layout.num_text},
                         {"base_scale", s.input_scale},
                         {"seed", s.input_seed}}},
              {"detection", det},
              {"interventions", iv.to_json()},
              {"decode_steps", s.decode_steps},
              {"zero_k_list", s.zero_k_list}};
  return s;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path prepare_out_dir(const std::string& dir) {
  const fs::path out(dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  const fs::path probe = out / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("output directory " + dir + " is not writable");
  }
  fs::remove(probe, ec);
  return out;
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << doc.dump(2) << '\n';
}

void write_manifest(const fs::path& out, const std::string& command,
                    const std::vector<std::string>& args, const Flags& flags) {
  json manifest = {{"command", command},
                   {"argv", args},
                   {"config_path", flags.config_path.empty() ? json(nullptr) : json(flags.config_path)},
                   {"weights_path", flags.weights_path.empty() ? json(nullptr) : json(flags.weights_path)},
                   {"seed", flags.seed ? json(*flags.seed) : json(nullptr)},
                   {"output_dir", flags.out_dir},
                   {"timestamp", utc_timestamp()},
                   {"version", kToolVersion}};
  write_json(out / "manifest.json", manifest);
}

void cmd_census(const RunSetup& s, const fs::path& out, std::ostream& log) {
  ExperimentReport report;
  report.experiment = "census";
  report.config = s.config;
  report.census = run_sink_census(s.model, s.x0, s.detection);
  const CensusResult& c = *report.census;
  write_census_csv(out / "census.csv", c);
  write_sink_scores_csv(out / "sink_scores.csv", c.sink_scores);
  // D_sink for the outlier table: configured dims, else outliers carried by LLM sinks.
  const ForwardPass pass = forward_all(s.x0, s.model);
  std::vector<std::size_t> llm_dims;
  for (std::size_t l = 0; l < pass.hidden.layers.size(); ++l) {
    const SinkSet sinks = detect_sinks_llm(pass.hidden.layers[l], s.detection, l);
    for (std::size_t d : sink_argmax_dims(pass.hidden.layers[l], sinks)) llm_dims.push_back(d);
  }
  write_outlier_csv(out / "outliers.csv", c.outliers, s.detection.sink_dims, llm_dims);
  write_json(out / "report.json", report.to_json());
  log << "census: " << c.total_llm << " LLM sink(s)";
  if (c.total_vlm) log << ", " << *c.total_vlm << " VLM sink(s)";
  log << " over " << c.rows.size() << " hidden states\n";
}

void cmd_outro(const RunSetup& s, const fs::path& out, std::ostream& log) {
  const InterventionHooks hooks(s.interventions, s.detection, s.criterion, s.model.config, s.layout);
  log << "enh_layer: " << hooks.enh_layer() << "\n";
  const ForwardPass pass = forward_all(s.x0, s.model, hooks);
  DecodeCache cache = make_decode_cache(pass);

  const std::size_t d = s.model.config.hidden_dim;
  std::vector<std::string> header{"phase", "position"};
  for (std::size_t j = 0; j < d; ++j) header.push_back("h" + std::to_string(j));
  std::ofstream csv_file(out / "outro_hidden.csv");
  if (!csv_file) throw ConfigError("cannot write outro_hidden.csv");
  for (std::size_t j = 0; j < header.size(); ++j) csv_file << (j ? "," : "") << header[j];
  csv_file << '\n';
  const Matrix& last = pass.hidden.layers.back();
  const auto& positions = pass.hidden.positions.back();
  for (std::size_t r = 0; r < last.rows(); ++r) {
    csv_file << "prefill," << positions[r];
    for (double v : last.row(r)) csv_file << ',' << format_number(v);
    csv_file << '\n';
  }
  Rng rng(s.input_seed + 2);
  Vector row(d);
  for (std::size_t step = 0; step < s.decode_steps; ++step) {
    for (double& v : row) v = rng.uniform(-s.input_scale, s.input_scale);
    const Vector h = decode_step(s.model, cache, row, hooks);
    csv_file << "decode," << s.layout.total() + step;
    for (double v : h) csv_file << ',' << format_number(v);
    csv_file << '\n';
  }

  json layers = json::array();
  for (const AttentionState& a : pass.attention) {
    layers.push_back({{"layer", a.layer},
                      {"tokens", a.num_tokens()},
                      {"sinks", a.sinks.indices},
                      {"rotated", hooks.rotates_layer(a.layer)},
                      {"relaxed", !a.relaxed_attn.empty()}});
  }
  ExperimentReport report;
  report.experiment = "outro";
  report.config = s.config;
  report.extra = {{"enh_layer", hooks.enh_layer()},
                  {"skip_final_layers", s.interventions.resolved_skip_final(s.model.config.num_layers)},
                  {"layers", layers},
                  {"retained_tokens", last.rows()},
                  {"decoded_tokens", cache.decoded_tokens}};
  write_json(out / "report.json", report.to_json());
  log << "outro: " << last.rows() << " token(s) retained, " << s.decode_steps
      << " decode step(s)\n";
}

void cmd_bench(const RunSetup& s, const fs::path& out, std::ostream& log) {
  ExperimentReport report;
  report.experiment = "bench";
  report.config = s.config;
  report.config["bench"] = {{"warmup_steps", s.bench.warmup_steps},
                            {"timed_steps", s.bench.timed_steps},
                            {"prune_keep_fraction", s.bench.prune_keep_fraction},
                            {"include_gamma_zero", s.bench.include_gamma_zero},
                            {"seed", s.bench.seed}};
  report.latency = latency_bench(s.model, s.x0, s.layout, s.detection, s.bench);
  write_latency_csv(out / "latency.csv", *report.latency);
  write_json(out / "report.json", report.to_json());
  for (const LatencyEntry& e : report.latency->entries) {
    log << "bench: " << e.variant << " " << format_number(e.median_seconds_per_token)
        << " s/token (x" << format_number(e.relative) << ")\n";
  }
}

void cmd_ablate(const RunSetup& s, const fs::path& out, std::ostream& log) {
  const ProbeTask task = linear_probe_task(s.x0, s.input_seed + 3);
  ExperimentReport report;
  report.experiment = "ablate";
  report.config = s.config;
  report.ablation = run_ablation_sweep(s.model, s.x0, task, s.detection);
  const std::vector<double> fractions{0.1, 0.25, 0.5};
  json sweep = json::array();
  for (const PruningSweepPoint& p :
       run_pruning_fraction_sweep(s.model, s.x0, task, s.detection, fractions, s.input_seed + 4)) {
    sweep.push_back({{"fraction", p.fraction},
                     {"heads_pruned", p.heads_pruned},
                     {"sink_score_mse", p.sink_score_mse},
                     {"random_mse", p.random_mse}});
  }
  report.extra = {{"pruning_sweep", sweep}};
  write_ablation_csv(out / "ablation.csv", *report.ablation);
  write_json(out / "report.json", report.to_json());
  log << "ablate: " << report.ablation->entries.size() << " head(s), baseline mse "
      << format_number(report.ablation->baseline_mse) << "\n";
}

void cmd_zerok(const RunSetup& s, const fs::path& out, std::ostream& log) {
  ExperimentReport report;
  report.experiment = "zerok";
  report.config = s.config;
  report.zero_k = run_zero_k_study(s.model, s.x0, s.detection, s.zero_k_list);
  write_zero_k_csv(out / "zero_k.csv", *report.zero_k);
  if (!s.zero_k_list.empty()) {
    write_attention_diff_csv(out / "attention_diff.csv", s.model, s.x0, s.detection,
                             s.zero_k_list.front());
  }
  write_json(out / "report.json", report.to_json());
  log << "zerok: " << s.zero_k_list.size() << " k value(s)\n";
}

void cmd_correlate(const RunSetup& s, const fs::path& out, std::ostream& log) {
  ExperimentReport report;
  report.experiment = "correlate";
  report.config = s.config;
  report.correlation = run_proxy_correlation(s.model, s.x0, s.detection);
  write_correlation_csv(out / "correlation.csv", *report.correlation);
  write_json(out / "report.json", report.to_json());
  log << "correlate: " << report.correlation->entries.size() << " head(s), "
      << report.correlation->skipped_heads << " skipped";
  if (report.correlation->mean_r) log << ", mean r " << format_number(*report.correlation->mean_r);
  log << "\n";
}

void add_run_flags(CLI::App& cmd, Flags& f) {
  cmd.add_option("--config", f.config_path, "JSON config file");
  cmd.add_option("--weights", f.weights_path, "JSON weight file");
  cmd.add_option("--seed", f.seed, "seed for weights (input uses seed + 1)");
  cmd.add_option("--out", f.out_dir, "output directory")->capture_default_str();
  cmd.add_option("--gamma", f.gamma, "rotation strength");
  cmd.add_option("--gate-temp", f.gate_temp, "gate temperature (default 0.1)");
  cmd.add_option("--enh-layer", f.enh_layer, "enhancement layer");
  cmd.add_option("--skip-final", f.skip_final, "final layers exempt from rotation");
  cmd.add_option("--zero-k", f.zero_k, "sink key dims to zero");
  cmd.add_option("--keep-fraction", f.keep_fraction, "modality tokens kept after the enhancement layer");
  cmd.add_option("--criterion", f.criterion, "sink criterion")->check(CLI::IsMember({"llm", "vlm"}));
  cmd.add_option("--sink-dims", f.sink_dims, "comma-separated sink dimensions")->delimiter(',');
  cmd.add_flag("--disable-rotation", f.disable_rotation, "turn off head-output rotation");
  cmd.add_flag("--disable-relaxation", f.disable_relaxation, "turn off mask relaxation");
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             int depth);

int run_rerun(const Flags& flags, std::ostream& out, std::ostream& err, int depth) {
  if (depth > 0) throw ConfigError("a manifest cannot point at another rerun");
  std::ifstream in(flags.manifest_path);
  if (!in) throw ConfigError("cannot open manifest " + flags.manifest_path);
  const json manifest = json::parse(in, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("argv") || !manifest.at("argv").is_array()) {
    throw SchemaError("manifest " + flags.manifest_path + " has no argv array");
  }
  std::vector<std::string> argv;
  try {
    argv = manifest.at("argv").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest argv: ") + e.what());
  }
  if (flags.rerun_out) {
    bool replaced = false;
    for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
      if (argv[i] == "--out") {
        argv[i + 1] = *flags.rerun_out;
        replaced = true;
      }
    }
    if (!replaced) {
      argv.push_back("--out");
      argv.push_back(*flags.rerun_out);
    }
  }
  return dispatch(argv, out, err, depth + 1);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             int depth) {
  CLI::App app{"Attention-sink analysis and intervention toolkit", "sinklab"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  Flags flags;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"census", "count sink tokens per layer under both criteria"},
      {"outro", "prefill and decode with head-output rotation and mask relaxation"},
      {"bench", "decode latency with and without interventions"},
      {"ablate", "per-head pruning deltas on a linear probe task"},
      {"zerok", "sink attention under Zero-K for each k"},
      {"correlate", "Pearson r of sink mass against value-direction alignment"}};
  for (const auto& [name, help] : commands) add_run_flags(*app.add_subcommand(name, help), flags);
  CLI::App* rerun = app.add_subcommand("rerun", "repeat a run from its manifest.json");
  rerun->add_option("--manifest", flags.manifest_path, "manifest.json of an earlier run")->required();
  rerun->add_option("--out", flags.rerun_out, "output directory (default: the recorded one)");

  std::vector<const char*> argv{"sinklab"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = e.get_exit_code();
    if (code == 0) {
      out << (e.get_name() == "CallForVersion" ? std::string(kToolVersion) + "\n" : app.help());
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (command == "rerun") return run_rerun(flags, out, err, depth);

  RunSetup setup;
  try {
    setup = resolve(flags);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n" << app.get_subcommands().front()->help();
    return kExitUsage;
  }
  const fs::path dir = prepare_out_dir(flags.out_dir);
  write_manifest(dir, command, args, flags);
  if (command == "census") cmd_census(setup, dir, out);
  if (command == "outro") cmd_outro(setup, dir, out);
  if (command == "bench") cmd_bench(setup, dir, out);
  if (command == "ablate") cmd_ablate(setup, dir, out);
  if (command == "zerok") cmd_zerok(setup, dir, out);
  if (command == "correlate") cmd_correlate(setup, dir, out);
  out << "wrote " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err, 0);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const Error& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "filesystem error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace sinklab
