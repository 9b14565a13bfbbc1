#include "sinklab/decoder.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

#include "sinklab/error.hpp"
#include "sinklab/rng.hpp"

namespace sinklab {

using nlohmann::json;

void DecoderConfig::validate() const {
  if (hidden_dim == 0 || num_heads == 0 || head_dim == 0 || ffn_dim == 0) {
    throw ConfigError("decoder config: hidden_dim, num_heads, head_dim and ffn_dim must be >= 1");
  }
  if (hidden_dim != num_heads * head_dim) {
    throw ConfigError("decoder config: hidden_dim " + std::to_string(hidden_dim) +
                      " != num_heads * head_dim = " + std::to_string(num_heads * head_dim));
  }
}

void TokenLayout::validate() const {
  if (total() == 0) throw ConfigError("token layout: sequence must hold at least one token");
}

namespace {

void check_tensor(const Matrix& m, std::size_t rows, std::size_t cols, std::size_t layer,
                  const char* name) {
  const std::string where = "layer " + std::to_string(layer) + " tensor " + name;
  if (m.rows() != rows || m.cols() != cols) {
    throw SchemaError(where + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                      ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  if (!all_finite(m)) throw SchemaError(where + ": non-finite value");
}

void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (double& w : m.data()) w = rng.uniform(-bound, bound);
}

}  // namespace

void Model::validate() const {
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(e.what());
  }
  if (layers.size() != config.num_layers) {
    throw SchemaError("model: config declares " + std::to_string(config.num_layers) +
                      " layers, found " + std::to_string(layers.size()));
  }
  const std::size_t d = config.hidden_dim;
  const std::size_t f = config.ffn_dim;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerWeights& w = layers[l];
    check_tensor(w.w_q, d, d, l, "W_Q");
    check_tensor(w.w_k, d, d, l, "W_K");
    check_tensor(w.w_v, d, d, l, "W_V");
    check_tensor(w.w_o, d, d, l, "W_O");
    check_tensor(w.ffn_in, d, f, l, "ffn_in");
    check_tensor(w.ffn_out, f, d, l, "ffn_out");
  }
}

const LayerHooks& no_hooks() {
  static const LayerHooks hooks;
  return hooks;
}

SinkSet LayerHooks::detect_sinks(std::size_t layer, const Matrix& /*input*/) const {
  SinkSet none;
  none.layer = layer;
  return none;
}

Model init_seeded(const DecoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.hidden_dim;
  const std::size_t f = config.ffn_dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Model model{config, {}};
  model.layers.reserve(config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights w{Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, f),
                   Matrix(f, d)};
    for (Matrix* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.ffn_in, &w.ffn_out}) {
      fill_uniform(*m, rng, bound);
    }
    model.layers.push_back(std::move(w));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Weight file I/O

namespace {

constexpr const char* kTensorNames[] = {"W_Q", "W_K", "W_V", "W_O", "ffn_in", "ffn_out"};

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r);
    rows.push_back(json(std::vector<double>(src.begin(), src.end())));
  }
  return rows;
}

Matrix matrix_from_json(const json& doc, std::size_t rows, std::size_t cols, std::size_t layer,
                        const char* name) {
  const std::string where = "layer " + std::to_string(layer) + " tensor " + name;
  if (!doc.is_array() || doc.size() != rows) {
    throw SchemaError(where + ": expected " + std::to_string(rows) + " rows");
  }
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const json& row = doc[r];
    if (!row.is_array() || row.size() != cols) {
      throw SchemaError(where + ": row " + std::to_string(r) + " expected " +
                        std::to_string(cols) + " columns");
    }
    for (std::size_t c = 0; c < cols; ++c) {
      if (!row[c].is_number()) throw SchemaError(where + ": non-numeric entry");
      const double v = row[c].get<double>();
      if (!std::isfinite(v)) throw SchemaError(where + ": non-finite value");
      m(r, c) = v;
    }
  }
  return m;
}

std::size_t count_field(const json& cfg, const char* key) {
  if (!cfg.contains(key)) throw SchemaError(std::string("config: missing field ") + key);
  const json& v = cfg.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw SchemaError(std::string("config: field ") + key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

Model load_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("weight file: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    // parse errors and out-of-range literals such as 1e999
    throw SchemaError("weight file: " + std::string(e.what()));
  }
  if (!doc.is_object() || !doc.contains("config") || !doc.at("config").is_object()) {
    throw SchemaError("weight file: missing config object");
  }
  const json& cfg = doc.at("config");
  Model model;
  model.config.num_layers = count_field(cfg, "num_layers");
  model.config.hidden_dim = count_field(cfg, "hidden_dim");
  model.config.num_heads = count_field(cfg, "num_heads");
  model.config.head_dim = count_field(cfg, "head_dim");
  model.config.ffn_dim = count_field(cfg, "ffn_dim");
  if (cfg.contains("seed")) {
    if (!cfg.at("seed").is_number_unsigned()) throw SchemaError("weight file: config.seed must be an unsigned integer");
    model.config.seed = cfg.at("seed").get<std::uint64_t>();
  }
  try {
    model.config.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("weight file: ") + e.what());
  }
  if (!doc.contains("layers") || !doc.at("layers").is_array()) {
    throw SchemaError("weight file: missing layers array");
  }
  const json& layers = doc.at("layers");
  if (layers.size() != model.config.num_layers) {
    throw SchemaError("weight file: config declares " + std::to_string(model.config.num_layers) +
                      " layers, found " + std::to_string(layers.size()));
  }
  const std::size_t d = model.config.hidden_dim;
  const std::size_t f = model.config.ffn_dim;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const json& lw = layers[l];
    for (const char* name : kTensorNames) {
      if (!lw.is_object() || !lw.contains(name)) {
        throw SchemaError("layer " + std::to_string(l) + " tensor " + name + ": missing");
      }
    }
    LayerWeights w;
    w.w_q = matrix_from_json(lw.at("W_Q"), d, d, l, "W_Q");
    w.w_k = matrix_from_json(lw.at("W_K"), d, d, l, "W_K");
    w.w_v = matrix_from_json(lw.at("W_V"), d, d, l, "W_V");
    w.w_o = matrix_from_json(lw.at("W_O"), d, d, l, "W_O");
    w.ffn_in = matrix_from_json(lw.at("ffn_in"), d, f, l, "ffn_in");
    w.ffn_out = matrix_from_json(lw.at("ffn_out"), f, d, l, "ffn_out");
    model.layers.push_back(std::move(w));
  }
  return model;
}

void save_weights(const Model& model, const std::filesystem::path& path) {
  model.validate();
  json cfg = {{"num_layers", model.config.num_layers},
              {"hidden_dim", model.config.hidden_dim},
              {"num_heads", model.config.num_heads},
              {"head_dim", model.config.head_dim},
              {"ffn_dim", model.config.ffn_dim},
              {"seed", model.config.seed}};
  json layers = json::array();
  for (const LayerWeights& w : model.layers) {
    layers.push_back({{"W_Q", matrix_to_json(w.w_q)},
                      {"W_K", matrix_to_json(w.w_k)},
                      {"W_V", matrix_to_json(w.w_v)},
                      {"W_O", matrix_to_json(w.w_o)},
                      {"ffn_in", matrix_to_json(w.ffn_in)},
                      {"ffn_out", matrix_to_json(w.ffn_out)}});
  }
  std::ofstream out(path);
  if (!out) throw SchemaError("weight file: cannot write " + path.string());
  out << json{{"config", cfg}, {"layers", layers}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Forward pass

Matrix causal_mask(std::size_t n) {
  Matrix mask(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) mask(i, j) = kMasked;
  }
  return mask;
}

Matrix apply_ffn(const Matrix& x, const LayerWeights& weights) {
  Matrix hidden = matmul(x, weights.ffn_in);
  for (double& h : hidden.data()) h = std::tanh(h);
  return add(x, matmul(hidden, weights.ffn_out));
}

namespace {

[[noreturn]] void numeric_failure(std::size_t layer, std::optional<std::size_t> head,
                                  const char* what) {
  std::string msg = "non-finite " + std::string(what) + " at layer " + std::to_string(layer);
  if (head) msg += " head " + std::to_string(*head);
  throw NumericError(msg);
}

void compute_head(HeadState& head, const Matrix& mask, double scale, std::size_t layer,
                  std::size_t h) {
  head.logits = matmul_transposed(head.q, head.k);
  const std::size_t n = head.logits.rows();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = head.logits.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (mask(i, j) == kMasked) {
        row[j] = kMasked;
      } else {
        row[j] = row[j] * scale + mask(i, j);
        if (!std::isfinite(row[j])) numeric_failure(layer, h, "attention logits");
      }
    }
  }
  head.attn = Matrix(n, head.logits.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const Vector probs = softmax_row(head.logits.row(i));
    std::copy(probs.begin(), probs.end(), head.attn.row(i).begin());
  }
  head.out = matmul(head.attn, head.v);
}

}  // namespace

LayerOutput forward_layer(const Matrix& x, const Model& model, std::size_t layer,
                          const LayerHooks& hooks) {
  const DecoderConfig& cfg = model.config;
  if (layer >= model.layers.size()) throw InvalidArgument("forward_layer: layer out of range");
  if (x.cols() != cfg.hidden_dim) throw InvalidArgument("forward_layer: input width != hidden_dim");
  if (x.rows() == 0) throw InvalidArgument("forward_layer: empty sequence");
  if (!all_finite(x)) numeric_failure(layer, std::nullopt, "layer input");
  const LayerWeights& w = model.layers[layer];
  const std::size_t dh = cfg.head_dim;

  AttentionState state;
  state.layer = layer;
  state.mask = causal_mask(x.rows());
  state.sinks = hooks.detect_sinks(layer, x);
  state.sinks.layer = layer;

  const Matrix q = matmul(x, w.w_q);
  const Matrix k = matmul(x, w.w_k);
  const Matrix v = matmul(x, w.w_v);
  state.heads.resize(cfg.num_heads);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    state.heads[h].q = column_block(q, h * dh, dh);
    state.heads[h].k = column_block(k, h * dh, dh);
    state.heads[h].v = column_block(v, h * dh, dh);
  }
  hooks.on_projections(state);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    HeadState& head = state.heads[h];
    compute_head(head, state.mask, scale, layer, h);
    if (!all_finite(head.out)) numeric_failure(layer, h, "head output");
  }
  hooks.on_head_outputs(state);

  Matrix concat(x.rows(), cfg.hidden_dim);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    if (!all_finite(state.heads[h].out)) numeric_failure(layer, h, "hooked head output");
    set_column_block(concat, h * dh, state.heads[h].out);
  }
  state.projected = matmul(concat, w.w_o);
  Matrix out = apply_ffn(add(x, state.projected), w);
  if (!all_finite(out)) numeric_failure(layer, std::nullopt, "layer output");
  return {std::move(out), std::move(state)};
}

ForwardPass forward_all(const Matrix& x0, const Model& model, const LayerHooks& hooks) {
  if (x0.cols() != model.config.hidden_dim) {
    throw InvalidArgument("forward_all: input width != hidden_dim");
  }
  ForwardPass pass;
  std::vector<std::size_t> positions(x0.rows());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  pass.hidden.layers.push_back(x0);
  pass.hidden.positions.push_back(positions);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerOutput step = forward_layer(pass.hidden.layers.back(), model, l, hooks);
    if (auto keep = hooks.retain_tokens(step.attention, step.hidden)) {
      std::vector<std::size_t> kept_positions;
      kept_positions.reserve(keep->size());
      for (std::size_t row : *keep) kept_positions.push_back(positions.at(row));
      positions = std::move(kept_positions);
      step.hidden = select_rows(step.hidden, *keep);
    }
    pass.hidden.layers.push_back(std::move(step.hidden));
    pass.hidden.positions.push_back(positions);
    pass.attention.push_back(std::move(step.attention));
  }
  return pass;
}

Matrix attention_naive_oracle(const Matrix& q, const Matrix& k, const Matrix& v,
                              const Matrix& mask) {
  const std::size_t n = q.rows();
  const std::size_t m = k.rows();
  const std::size_t d = q.cols();
  if (k.cols() != d || v.rows() != m || mask.rows() != n || mask.cols() != m) {
    throw InvalidArgument("attention_naive_oracle: inconsistent shapes");
  }
  const double inf = std::numeric_limits<double>::infinity();
  Matrix out(n, v.cols());
  std::vector<double> weights(m);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -inf;
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q(i, t) * k(j, t);
      weights[j] = mask(i, j) == -inf ? -inf : s / std::sqrt(static_cast<double>(d)) + mask(i, j);
      if (weights[j] > best) best = weights[j];
    }
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      weights[j] = weights[j] == -inf ? 0.0 : std::exp(weights[j] - best);
      total += weights[j];
    }
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += weights[j] / total * v(j, c);
      out(i, c) = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecodeCache make_decode_cache(const ForwardPass& prefill) {
  DecodeCache cache;
  cache.layers.reserve(prefill.attention.size());
  for (const AttentionState& state : prefill.attention) {
    LayerCache layer;
    layer.sinks = state.sinks;
    for (const HeadState& head : state.heads) {
      layer.keys.push_back(head.k);
      layer.values.push_back(head.v);
    }
    cache.layers.push_back(std::move(layer));
  }
  return cache;
}

Vector decode_step(const Model& model, DecodeCache& cache, std::span<const double> x_row,
                   const LayerHooks& hooks) {
  const DecoderConfig& cfg = model.config;
  if (cache.layers.size() != model.layers.size()) {
    throw InvalidState("decode_step: cache has " + std::to_string(cache.layers.size()) +
                       " layers, model has " + std::to_string(model.layers.size()));
  }
  if (x_row.size() != cfg.hidden_dim) throw InvalidArgument("decode_step: row width != hidden_dim");
  const std::size_t dh = cfg.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Vector x(x_row.begin(), x_row.end());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& w = model.layers[l];
    LayerCache& lc = cache.layers[l];
    if (lc.keys.size() != cfg.num_heads || lc.values.size() != cfg.num_heads) {
      throw InvalidState("decode_step: layer " + std::to_string(l) + " cache head count mismatch");
    }
    if (!all_finite(x)) numeric_failure(l, std::nullopt, "layer input");

    const Vector q = vecmat(x, w.w_q);
    const Vector k = vecmat(x, w.w_k);
    const Vector v = vecmat(x, w.w_v);
    const std::size_t pos = lc.length();
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      lc.keys[h].append_row(std::span<const double>(k).subspan(h * dh, dh));
      lc.values[h].append_row(std::span<const double>(v).subspan(h * dh, dh));
    }
    if (auto trigger = hooks.decode_sink_trigger(l, x, lc)) {
      lc.sinks.indices.push_back(pos);
      lc.sinks.trigger_values.push_back(*trigger);
    }

    std::vector<Vector> outs(cfg.num_heads, Vector(dh, 0.0));
    Vector logits(pos + 1);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto qh = std::span<const double>(q).subspan(h * dh, dh);
      for (std::size_t j = 0; j <= pos; ++j) logits[j] = dot(qh, lc.keys[h].row(j)) * scale;
      if (!all_finite(logits)) numeric_failure(l, h, "attention logits");
      const Vector probs = softmax_row(logits);
      Vector& o = outs[h];
      for (std::size_t j = 0; j <= pos; ++j) {
        const auto vr = lc.values[h].row(j);
        for (std::size_t c = 0; c < dh; ++c) o[c] += probs[j] * vr[c];
      }
    }
    hooks.on_decode_head_outputs(l, lc, outs);

    Vector concat(cfg.hidden_dim);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      if (!all_finite(outs[h])) numeric_failure(l, h, "head output");
      std::copy(outs[h].begin(), outs[h].end(), concat.begin() + static_cast<std::ptrdiff_t>(h * dh));
    }
    const Vector projected = vecmat(concat, w.w_o);
    Vector mid(cfg.hidden_dim);
    for (std::size_t c = 0; c < mid.size(); ++c) mid[c] = x[c] + projected[c];
    Vector hidden = vecmat(mid, w.ffn_in);
    for (double& hv : hidden) hv = std::tanh(hv);
    const Vector ffn = vecmat(hidden, w.ffn_out);
    for (std::size_t c = 0; c < mid.size(); ++c) x[c] = mid[c] + ffn[c];
  }
  if (!all_finite(x)) numeric_failure(model.layers.size(), std::nullopt, "decode output");
  ++cache.decoded_tokens;
  return x;
}

}  // namespace sinklab
