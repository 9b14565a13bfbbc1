#include <cmath>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "sinklab/decoder.hpp"
#include "sinklab/error.hpp"
#include "sinklab/interventions.hpp"
#include "test_util.hpp"

using namespace sinklab;
using testutil::max_abs_diff;

namespace {

Model zero_model(const DecoderConfig& cfg) {
  Model m = init_seeded(cfg);
  for (LayerWeights& w : m.layers) {
    for (Matrix* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.ffn_in, &w.ffn_out}) {
      std::fill(t->data().begin(), t->data().end(), 0.0);
    }
  }
  return m;
}

// Straight-line softmax(QK^T/sqrt(d) + causal) V used as the oracle for
// attention weights.
Matrix causal_attention_weights(const Matrix& q, const Matrix& k) {
  const std::size_t n = q.rows();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < q.cols(); ++t) s += q(i, t) * k(j, t);
      a(i, j) = std::exp(s / std::sqrt(static_cast<double>(q.cols())));
      total += a(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) a(i, j) /= total;
  }
  return a;
}

InterventionHooks gamma_zero_hooks(const DecoderConfig& cfg, bool relaxation) {
  InterventionConfig iv;
  iv.gamma = 0.0;
  iv.relaxation_enabled = relaxation;
  return InterventionHooks(iv, DetectionParams{}, SinkCriterion::kLlm, cfg);
}

Matrix sink_input(std::uint64_t seed, std::size_t n, std::size_t d) {
  Rng rng(seed);
  Matrix x = testutil::random_matrix(rng, n, d, 0.2);
  x(0, 1) = 500.0;
  return x;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(DecoderConfig{}.validate());
  CHECK_THROWS_AS((DecoderConfig{2, 10, 3, 3, 4, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((DecoderConfig{2, 8, 2, 4, 0, 0}.validate()), ConfigError);
  CHECK_NOTHROW((DecoderConfig{0, 8, 2, 4, 4, 0}.validate()));
  CHECK_THROWS_AS((TokenLayout{0, 0}.validate()), ConfigError);
}

TEST_CASE("init_seeded") {
  const DecoderConfig cfg{2, 8, 2, 4, 6, 17};
  const Model a = init_seeded(cfg);
  CHECK(a == init_seeded(cfg));
  DecoderConfig other = cfg;
  other.seed = 18;
  CHECK_FALSE(a.layers[0].w_q == init_seeded(other).layers[0].w_q);

  const double bound = 1.0 / std::sqrt(8.0);
  for (const LayerWeights& w : a.layers) {
    CHECK(w.w_q.rows() == 8);
    CHECK(w.w_q.cols() == 8);
    CHECK(w.ffn_in.cols() == 6);
    CHECK(w.ffn_out.rows() == 6);
    for (double v : w.w_k.data()) CHECK(std::abs(v) <= bound);
    const Matrix block = column_block(w.w_q, 4, 4);
    CHECK(block.rows() == 8);
    CHECK(block.cols() == 4);
  }
}

TEST_CASE("weight file round trip and schema errors") {
  testutil::TempDir dir("weights");
  const Model model = init_seeded({2, 8, 2, 4, 6, 5});
  const auto path = dir.path() / "w.json";
  save_weights(model, path);
  CHECK(load_weights(path) == model);

  const std::string text = testutil::slurp(path);
  {
    std::ofstream(dir.path() / "trunc.json") << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_weights(dir.path() / "trunc.json"), SchemaError);
  }
  nlohmann::json doc = nlohmann::json::parse(text);
  {
    nlohmann::json bad = doc;
    bad["config"]["hidden_dim"] = 10;
    std::ofstream(dir.path() / "dim.json") << bad.dump();
    CHECK_THROWS_AS(load_weights(dir.path() / "dim.json"), SchemaError);
  }
  {
    nlohmann::json bad = doc;
    bad["layers"][1].erase("W_K");
    std::ofstream(dir.path() / "missing.json") << bad.dump();
    try {
      load_weights(dir.path() / "missing.json");
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("layer 1") != std::string::npos);
      CHECK(msg.find("W_K") != std::string::npos);
    }
  }
  {
    nlohmann::json bad = doc;
    bad["layers"][0]["W_O"][0].erase(0);
    std::ofstream(dir.path() / "shape.json") << bad.dump();
    CHECK_THROWS_AS(load_weights(dir.path() / "shape.json"), SchemaError);
  }
  {
    nlohmann::json bad = doc;
    bad["layers"][0]["ffn_in"][0][0] = "NaN";
    std::ofstream(dir.path() / "nan.json") << bad.dump();
    CHECK_THROWS_AS(load_weights(dir.path() / "nan.json"), SchemaError);
  }
  {
    std::string inf_text = doc.dump();
    const auto at = inf_text.find("\"W_Q\":[[") + 8;
    inf_text.insert(at, "1e999,");
    std::ofstream(dir.path() / "inf.json") << inf_text;
    CHECK_THROWS_AS(load_weights(dir.path() / "inf.json"), SchemaError);
  }
  CHECK_THROWS_AS(load_weights(dir.path() / "absent.json"), SchemaError);
}

TEST_CASE("forward_layer basics") {
  const DecoderConfig cfg{1, 8, 2, 4, 6, 1};
  Rng rng(2);
  const Matrix x = testutil::random_matrix(rng, 5, 8);
  SUBCASE("zero weights pass the input through") {
    const LayerOutput out = forward_layer(x, zero_model(cfg), 0);
    CHECK(out.hidden == x);
  }
  SUBCASE("single token attends to itself") {
    const Matrix one = select_rows(x, std::vector<std::size_t>{0});
    const LayerOutput out = forward_layer(one, init_seeded(cfg), 0);
    for (const HeadState& h : out.attention.heads) CHECK(h.attn(0, 0) == 1.0);
  }
  SUBCASE("masked entries are exactly zero and rows sum to one") {
    const LayerOutput out = forward_layer(x, init_seeded(cfg), 0);
    for (const HeadState& h : out.attention.heads) {
      for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          if (j > i) {
            CHECK(h.attn(i, j) == 0.0);
            CHECK(h.logits(i, j) == kMasked);
          }
          sum += h.attn(i, j);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
    }
  }
  SUBCASE("non-finite values raise a numeric error") {
    Matrix bad = x;
    bad(2, 3) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(forward_layer(bad, init_seeded(cfg), 0), NumericError);
    Model huge = init_seeded(cfg);
    for (double& v : huge.layers[0].w_q.data()) v *= 1e305;
    for (double& v : huge.layers[0].w_k.data()) v *= 1e305;
    CHECK_THROWS_AS(forward_layer(x, huge, 0), NumericError);
  }
  CHECK_THROWS_AS(forward_layer(x, init_seeded(cfg), 1), InvalidArgument);
}

TEST_CASE("forward_layer matches independent oracles") {
  const DecoderConfig cfg{1, 12, 3, 4, 5, 8};
  const Model model = init_seeded(cfg);
  Rng rng(4);
  const Matrix x = testutil::random_matrix(rng, 4, 12);
  const LayerOutput out = forward_layer(x, model, 0);
  const LayerWeights& w = model.layers[0];

  Matrix concat(4, 12);
  for (std::size_t h = 0; h < 3; ++h) {
    Matrix q(4, 4);
    Matrix k(4, 4);
    Matrix v(4, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t r = 0; r < 12; ++r) {
          q(i, c) += x(i, r) * w.w_q(r, h * 4 + c);
          k(i, c) += x(i, r) * w.w_k(r, h * 4 + c);
          v(i, c) += x(i, r) * w.w_v(r, h * 4 + c);
        }
      }
    }
    const HeadState& head = out.attention.heads[h];
    CHECK(max_abs_diff(head.attn, causal_attention_weights(q, k)) <= 1e-12);
    CHECK(max_abs_diff(head.out, attention_naive_oracle(q, k, v, causal_mask(4))) <= 1e-9);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 4; ++c) concat(i, h * 4 + c) = head.out(i, c);
    }
  }
  // Residual and FFN by explicit loops.
  for (std::size_t i = 0; i < 4; ++i) {
    Vector mid(12);
    for (std::size_t c = 0; c < 12; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < 12; ++r) acc += concat(i, r) * w.w_o(r, c);
      mid[c] = x(i, c) + acc;
    }
    Vector hidden(5);
    for (std::size_t f = 0; f < 5; ++f) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 12; ++c) acc += mid[c] * w.ffn_in(c, f);
      hidden[f] = std::tanh(acc);
    }
    for (std::size_t c = 0; c < 12; ++c) {
      double acc = 0.0;
      for (std::size_t f = 0; f < 5; ++f) acc += hidden[f] * w.ffn_out(f, c);
      CHECK(std::abs(out.hidden(i, c) - (mid[c] + acc)) <= 1e-12);
    }
  }
}

TEST_CASE("attention_naive_oracle") {
  const Matrix q = Matrix::from_rows({{1, 2}, {0.5, -1}, {3, 0}});
  const Matrix same_k = Matrix::from_rows({{0.2, 0.4}, {0.2, 0.4}, {0.2, 0.4}});
  const Matrix v = Matrix::from_rows({{1, 0}, {0, 2}, {4, 4}});
  const Matrix uniform = attention_naive_oracle(q, same_k, v, causal_mask(3));
  CHECK(uniform(0, 0) == doctest::Approx(1.0));
  CHECK(uniform(1, 0) == doctest::Approx(0.5));
  CHECK(uniform(1, 1) == doctest::Approx(1.0));
  CHECK(uniform(2, 0) == doctest::Approx(5.0 / 3.0));
  CHECK(uniform(2, 1) == doctest::Approx(2.0));

  Matrix only_first(3, 3, kMasked);
  for (std::size_t i = 0; i < 3; ++i) only_first(i, 0) = 0.0;
  const Matrix first = attention_naive_oracle(q, same_k, v, only_first);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(first(i, 0) == 1.0);
    CHECK(first(i, 1) == 0.0);
  }
  CHECK_THROWS_AS(attention_naive_oracle(q, Matrix(3, 3), v, causal_mask(3)), InvalidArgument);
}

TEST_CASE("oracle equivalence on a random 3 x 2 case") {
  const DecoderConfig cfg{1, 4, 2, 2, 3, 21};
  const Model model = init_seeded(cfg);
  Rng rng(22);
  const LayerOutput out = forward_layer(testutil::random_matrix(rng, 3, 4), model, 0);
  for (const HeadState& h : out.attention.heads) {
    CHECK(max_abs_diff(h.out, attention_naive_oracle(h.q, h.k, h.v, out.attention.mask)) <= 1e-12);
  }
}

TEST_CASE("forward_all") {
  SUBCASE("no layers keeps only the input") {
    const Model model = init_seeded({0, 8, 2, 4, 4, 0});
    Rng rng(1);
    const Matrix x = testutil::random_matrix(rng, 3, 8);
    const ForwardPass pass = forward_all(x, model);
    REQUIRE(pass.hidden.layers.size() == 1);
    CHECK(pass.hidden.layers[0] == x);
    CHECK(pass.attention.empty());
  }
  SUBCASE("layer count includes the input") {
    const Model model = init_seeded({3, 8, 2, 4, 4, 0});
    Rng rng(1);
    const ForwardPass pass = forward_all(testutil::random_matrix(rng, 3, 8), model);
    CHECK(pass.hidden.layers.size() == 4);
    CHECK(pass.attention.size() == 3);
  }
  SUBCASE("gamma = 0 with relaxation off equals empty hooks") {
    const DecoderConfig cfg{4, 16, 2, 8, 8, 3};
    const Model model = init_seeded(cfg);
    const Matrix x = sink_input(5, 10, 16);
    const ForwardPass a = forward_all(x, model);
    const ForwardPass b = forward_all(x, model, gamma_zero_hooks(cfg, false));
    REQUIRE(b.attention[0].sinks.size() == 1);
    for (std::size_t l = 0; l < a.hidden.layers.size(); ++l) {
      CHECK(testutil::bitwise_equal(a.hidden.layers[l].data(), b.hidden.layers[l].data()));
    }
  }
  SUBCASE("planted sink persists through residual-dominated layers") {
    const DecoderConfig cfg{3, 16, 2, 8, 8, 3};
    Model model = init_seeded(cfg);
    for (LayerWeights& w : model.layers) {
      for (Matrix* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.ffn_in, &w.ffn_out}) {
        for (double& v : t->data()) v *= 0.01;
      }
    }
    const ForwardPass pass = forward_all(sink_input(6, 10, 16), model, gamma_zero_hooks(cfg, false));
    for (const AttentionState& a : pass.attention) {
      CHECK(a.sinks.indices == std::vector<std::size_t>{0});
    }
  }
}

TEST_CASE("causality under perturbation") {
  const DecoderConfig cfg{3, 8, 2, 4, 6, 31};
  const Model model = init_seeded(cfg);
  Rng rng(32);
  for (std::size_t n = 2; n <= 8; ++n) {
    const Matrix x = testutil::random_matrix(rng, n, 8);
    for (std::size_t j = 0; j < n; ++j) {
      Matrix y = x;
      for (double& v : y.row(j)) v += 0.5;
      const ForwardPass a = forward_all(x, model);
      const ForwardPass b = forward_all(y, model);
      for (std::size_t l = 0; l < a.hidden.layers.size(); ++l) {
        for (std::size_t i = 0; i < j; ++i) {
          CHECK(testutil::bitwise_equal(a.hidden.layers[l].row(i), b.hidden.layers[l].row(i)));
        }
      }
    }
  }
}

TEST_CASE("head additivity") {
  const DecoderConfig cfg{1, 16, 4, 4, 8, 41};
  const Model model = init_seeded(cfg);
  Rng rng(42);
  const LayerOutput out = forward_layer(testutil::random_matrix(rng, 6, 16), model, 0);
  Matrix sum(6, 16);
  for (std::size_t h = 0; h < 4; ++h) {
    Matrix padded(6, 16);
    set_column_block(padded, h * 4, out.attention.heads[h].out);
    const Matrix part = matmul(padded, model.layers[0].w_o);
    sum = add(sum, part);
  }
  CHECK(max_abs_diff(sum, out.attention.projected) <= 1e-9);
}

TEST_CASE("incremental decoding") {
  const DecoderConfig cfg{3, 16, 4, 4, 12, 51};
  const Model model = init_seeded(cfg);
  Rng rng(52);
  const Matrix full = testutil::random_matrix(rng, 9, 16);
  const Matrix prefix = select_rows(full, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});

  SUBCASE("prefill + decode equals the batch pass") {
    DecodeCache cache = make_decode_cache(forward_all(prefix, model));
    const Vector last = decode_step(model, cache, full.row(8));
    const ForwardPass batch = forward_all(full, model);
    const auto expected = batch.hidden.layers.back().row(8);
    for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(last[c] - expected[c]) <= 1e-9);
  }
  SUBCASE("cache grows by one per step") {
    DecodeCache cache = make_decode_cache(forward_all(prefix, model));
    decode_step(model, cache, full.row(8));
    decode_step(model, cache, full.row(0));
    for (const LayerCache& lc : cache.layers) CHECK(lc.length() == 10);
    CHECK(cache.decoded_tokens == 2);
  }
  SUBCASE("gamma = 0 hooks decode like empty hooks") {
    Matrix x = prefix;
    x(0, 2) = 500.0;
    const auto hooks = gamma_zero_hooks(cfg, true);
    const ForwardPass pass = forward_all(x, model, hooks);
    DecodeCache a = make_decode_cache(pass);
    DecodeCache b = make_decode_cache(pass);
    const Vector ya = decode_step(model, a, full.row(8));
    const Vector yb = decode_step(model, b, full.row(8), hooks);
    CHECK(testutil::bitwise_equal(ya, yb));
  }
  SUBCASE("cache that does not fit the model") {
    DecodeCache cache = make_decode_cache(forward_all(prefix, model));
    cache.layers.pop_back();
    CHECK_THROWS_AS(decode_step(model, cache, full.row(8)), InvalidState);
    DecodeCache heads = make_decode_cache(forward_all(prefix, model));
    heads.layers[1].keys.pop_back();
    CHECK_THROWS_AS(decode_step(model, heads, full.row(8)), InvalidState);
  }
}
