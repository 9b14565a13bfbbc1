#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "sinklab/error.hpp"
#include "sinklab/harness.hpp"
#include "sinklab/sink_detect.hpp"
#include "test_util.hpp"

using namespace sinklab;

namespace {

double sorted_median_abs(const Matrix& m) {
  std::vector<double> v;
  for (double x : m.data()) v.push_back(std::abs(x));
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

AttentionState state_with(std::vector<Matrix> attn, std::size_t layer = 0) {
  AttentionState s;
  s.layer = layer;
  s.mask = causal_mask(attn.front().rows());
  for (Matrix& a : attn) {
    HeadState h;
    h.attn = std::move(a);
    s.heads.push_back(std::move(h));
  }
  return s;
}

SinkSet sinks_at(std::vector<std::size_t> idx, std::size_t layer = 0) {
  SinkSet s;
  s.layer = layer;
  s.indices = std::move(idx);
  return s;
}

// One sequence whose every layer is `layer_states`.
HiddenStates repeated(const Matrix& layer_states, std::size_t layers) {
  HiddenStates hs;
  for (std::size_t l = 0; l < layers; ++l) hs.layers.push_back(layer_states);
  return hs;
}

}  // namespace

TEST_CASE("detect_sinks_llm") {
  const DetectionParams params;
  CHECK(detect_sinks_llm(Matrix(4, 8), params).empty());

  SUBCASE("one massive value on a small background") {
    Rng rng(1);
    Matrix x = testutil::random_matrix(rng, 16, 32, 0.2);
    x(5, 17) = 500.0;
    const double expected = std::max(100.0, 1000.0 * sorted_median_abs(x));
    CHECK(llm_threshold(x, params) == expected);
    CHECK(expected == doctest::Approx(100.0).epsilon(0.1));
    const SinkSet s = detect_sinks_llm(x, params, 3);
    CHECK(s.layer == 3);
    CHECK(s.criterion == SinkCriterion::kLlm);
    CHECK(s.indices == std::vector<std::size_t>{5});
    CHECK(s.trigger_values == std::vector<double>{500.0});
    CHECK(s.trigger_values[0] > s.threshold);
  }
  SUBCASE("floor dominates") {
    Matrix x(6, 4, 0.001);
    for (std::size_t i = 0; i < 6; ++i) x(i, i % 4) = -99.0;
    CHECK(detect_sinks_llm(x, params).empty());
  }
  SUBCASE("strict comparison at the threshold") {
    Matrix x(4, 4, 0.01);
    x(1, 0) = 100.0;
    x(2, 3) = std::nextafter(100.0, 200.0);
    CHECK(detect_sinks_llm(x, params).indices == std::vector<std::size_t>{2});
  }
  SUBCASE("median term dominates on a loud layer") {
    Matrix x(4, 4, 1.0);
    x(0, 0) = 999.0;
    x(3, 1) = 1001.0;
    CHECK(llm_threshold(x, params) == 1000.0);
    CHECK(detect_sinks_llm(x, params).indices == std::vector<std::size_t>{3});
  }
}

TEST_CASE("detect_sinks_llm scale law") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix x = testutil::random_matrix(rng, 12, 16, 0.2);
    for (int k = 0; k < 3; ++k) x(rng.below(12), rng.below(16)) = rng.uniform(50.0, 400.0);
    const double c = rng.uniform(0.1, 10.0);
    Matrix scaled = x;
    for (double& v : scaled.data()) v *= c;
    DetectionParams scaled_params;
    scaled_params.llm_abs_floor *= c;
    CHECK(detect_sinks_llm(scaled, scaled_params).indices ==
          detect_sinks_llm(x, DetectionParams{}).indices);

    // Fixed floor: growing c never loses a sink.
    std::vector<std::size_t> previous;
    for (double s : {0.5, 1.0, 2.0, 4.0}) {
      Matrix y = x;
      for (double& v : y.data()) v *= s;
      const auto now = detect_sinks_llm(y, DetectionParams{}).indices;
      CHECK(std::includes(now.begin(), now.end(), previous.begin(), previous.end()));
      previous = now;
    }
  }
}

TEST_CASE("detect_sinks_vlm") {
  DetectionParams params;
  params.sink_dims = {3};
  const std::size_t d = 1024;
  const auto token = [&](double peak) {
    // rms 1: peak^2 + (d - 1) * e^2 = d
    const double e = std::sqrt((static_cast<double>(d) - peak * peak) / static_cast<double>(d - 1));
    Vector row(d, e);
    row[3] = peak;
    return row;
  };
  Matrix x = Matrix::from_rows({token(25.0), token(19.9), Vector(d, 0.0)}, d);
  CHECK(rms(x.row(0)) == doctest::Approx(1.0));
  const SinkSet s = detect_sinks_vlm(x, params, 1);
  CHECK(s.indices == std::vector<std::size_t>{0});
  CHECK(s.trigger_values[0] == doctest::Approx(25.0));
  CHECK(s.zero_rms_tokens == 1);
  CHECK(s.criterion == SinkCriterion::kVlm);

  SUBCASE("inclusive comparison at tau") {
    Matrix y(1, 400, 0.0);
    y(0, 0) = 20.0;
    DetectionParams p;
    p.sink_dims = {0};
    CHECK(detect_sinks_vlm(y, p).indices == std::vector<std::size_t>{0});
  }
  SUBCASE("only configured dims count") {
    DetectionParams p;
    p.sink_dims = {4};
    CHECK(detect_sinks_vlm(x, p).empty());
  }
  CHECK_THROWS_AS(detect_sinks_vlm(x, DetectionParams{}), ConfigError);
  CHECK(detect_sinks(x, params, SinkCriterion::kVlm).indices == s.indices);
}

TEST_CASE("detect_sinks_vlm is invariant to per-token scale") {
  Rng rng(17);
  DetectionParams params;
  params.sink_dims = {1, 5};
  for (int trial = 0; trial < 100; ++trial) {
    Matrix x = testutil::random_matrix(rng, 6, 1024, 0.2);
    for (std::size_t i = 0; i < 6; ++i) x(i, 1 + 4 * (i % 2)) = rng.uniform(2.0, 12.0);
    const auto before = detect_sinks_vlm(x, params).indices;
    const std::size_t i = rng.below(6);
    const double c = rng.uniform(0.01, 100.0);
    for (double& v : x.row(i)) v *= c;
    CHECK(detect_sinks_vlm(x, params).indices == before);
  }
}

TEST_CASE("detection params validation") {
  DetectionParams p;
  CHECK_NOTHROW(p.validate(8));
  p.sink_dims = {8};
  CHECK_THROWS_AS(p.validate(8), ConfigError);
  DetectionParams q;
  q.vlm_tau = 0.0;
  CHECK_THROWS_AS(q.validate(), ConfigError);
}

TEST_CASE("find_outlier_dims reproduces the reference table shape") {
  // 53 of 61 tokens exceed the threshold in dim 458: 86.89% of tokens.
  Rng rng(3);
  Matrix x = testutil::random_matrix(rng, 61, 512, 1.0);
  for (std::size_t i = 0; i < 53; ++i) x(i, 458) = 40.0 + static_cast<double>(i);
  x(10, 458) = 8768.0;
  for (std::size_t i = 0; i < 61; ++i) x(i, 12) = 7.5;
  const std::vector<HiddenStates> runs{repeated(x, 5)};
  const auto dims = find_outlier_dims(runs, OutlierCriterion{});
  REQUIRE(dims.size() == 2);
  CHECK(dims[0].dim == 458);
  CHECK(dims[0].max_activation == 8768.0);
  CHECK(dims[0].layer_pct == 100.0);
  CHECK(std::round(dims[0].token_pct * 100.0) / 100.0 == 86.89);
  CHECK(dims[1].dim == 12);
}

TEST_CASE("find_outlier_dims edge cases") {
  Rng rng(4);
  SUBCASE("nothing above the magnitude threshold") {
    const std::vector<HiddenStates> runs{repeated(testutil::random_matrix(rng, 8, 16, 5.9), 3)};
    CHECK(find_outlier_dims(runs, OutlierCriterion{}).empty());
  }
  SUBCASE("one planted dim everywhere") {
    std::vector<HiddenStates> runs;
    for (int s = 0; s < 10; ++s) {
      Matrix x = testutil::random_matrix(rng, 8, 16, 1.0);
      for (std::size_t i = 0; i < 8; ++i) x(i, 9) = -30.0;
      runs.push_back(repeated(x, 4));
    }
    const auto dims = find_outlier_dims(runs, OutlierCriterion{});
    REQUIRE(dims.size() == 1);
    CHECK(dims[0].dim == 9);
    CHECK(dims[0].max_activation == 30.0);
  }
  SUBCASE("sequence quorum") {
    const auto run_set = [&](std::size_t qualifying) {
      std::vector<HiddenStates> runs;
      for (std::size_t s = 0; s < 100; ++s) {
        Matrix x(8, 4, 0.5);
        if (s < qualifying) {
          for (std::size_t i = 0; i < 8; ++i) x(i, 2) = 10.0;
        }
        runs.push_back(repeated(x, 2));
      }
      return find_outlier_dims(runs, OutlierCriterion{});
    };
    CHECK(run_set(89).empty());
    CHECK(run_set(90).size() == 1);
    CHECK(OutlierCriterion{}.required_sequences(10) == 9);
    CHECK(OutlierCriterion{}.required_sequences(11) == 10);
  }
  SUBCASE("fractions are strict") {
    // Exactly one layer in four (25%) exceeds: not more than 25%.
    HiddenStates hs = repeated(Matrix(20, 4, 0.0), 4);
    for (std::size_t i = 0; i < 20; ++i) hs.layers[0](i, 1) = 9.0;
    const std::vector<HiddenStates> runs{hs};
    CHECK(find_outlier_dims(runs, OutlierCriterion{}).empty());
    HiddenStates two = hs;
    for (std::size_t i = 0; i < 20; ++i) two.layers[1](i, 1) = 9.0;
    const std::vector<HiddenStates> runs2{two};
    CHECK(find_outlier_dims(runs2, OutlierCriterion{}).size() == 1);
  }
  CHECK_THROWS_AS(find_outlier_dims(std::span<const HiddenStates>{}, OutlierCriterion{}),
                  InvalidArgument);
  OutlierCriterion bad;
  bad.sequence_quorum = 101;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("compute_sink_score") {
  const Matrix uniform = Matrix::from_rows({{1.0, 0.0}, {0.5, 0.5}});
  CHECK(compute_sink_score(state_with({uniform}), sinks_at({0})) == std::vector<double>{0.75});
  CHECK(compute_sink_score(state_with({uniform, uniform}), sinks_at({})) ==
        std::vector<double>{0.0, 0.0});
  const Matrix all_on_sink = Matrix::from_rows({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}});
  CHECK(compute_sink_score(state_with({all_on_sink}), sinks_at({0})) == std::vector<double>{1.0});
  CHECK_THROWS_AS(compute_sink_score(state_with({uniform}, 2), sinks_at({0}, 1)), InvalidArgument);
}

TEST_CASE("compute_sink_score ignores the labelling of non-sink columns") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 6;
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vector p = softmax_row(testutil::random_vector(rng, n, 3.0));
      for (std::size_t j = 0; j < n; ++j) a(i, j) = p[j];
    }
    // Swap two non-sink columns (sinks at 0 and 3).
    Matrix b = a;
    for (std::size_t i = 0; i < n; ++i) std::swap(b(i, 1), b(i, 5));
    const auto sa = compute_sink_score(state_with({a}), sinks_at({0, 3}));
    const auto sb = compute_sink_score(state_with({b}), sinks_at({0, 3}));
    CHECK(sa == sb);
    CHECK(sa[0] >= 0.0);
    CHECK(sa[0] <= 1.0);
  }
}

TEST_CASE("derive_sink_dims and the outlier CSV") {
  Rng rng(29);
  Matrix x = testutil::random_matrix(rng, 20, 16, 0.2);
  for (std::size_t i = 0; i < 20; ++i) {
    x(i, 3) = 8.0;
    x(i, 11) = 9.0;
  }
  x(0, 3) = 600.0;
  const HiddenStates hs = repeated(x, 3);
  const std::vector<HiddenStates> runs{hs};
  const auto outliers = find_outlier_dims(runs, OutlierCriterion{});
  REQUIRE(outliers.size() == 2);
  CHECK(outliers[0].dim == 3);
  CHECK(derive_sink_dims(outliers, hs, DetectionParams{}, 4) == std::vector<std::size_t>{3});
  CHECK(derive_sink_dims(outliers, hs, DetectionParams{}, 0).empty());

  testutil::TempDir dir("outliers");
  const std::vector<std::size_t> vlm{3, 7};
  const std::vector<std::size_t> llm{3};
  write_outlier_csv(dir.path() / "o.csv", outliers, vlm, llm);
  const std::string text = testutil::slurp(dir.path() / "o.csv");
  CHECK(text.rfind("dim,max_activation,layer_pct,token_pct,is_outlier,is_sink_vlm,is_sink_llm\n", 0) == 0);
  CHECK(text.find("\n3,600,100,100,true,true,true\n") != std::string::npos);
  CHECK(text.find("\n11,9,100,100,true,false,false\n") != std::string::npos);
  CHECK(text.find("\n7,,,,false,true,false\n") != std::string::npos);
}

TEST_CASE("planted-sink generator: at most the planted token, always included") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SyntheticSpec spec = planted_sink_spec(seed);
    const Matrix x = gen_synthetic_sequence(spec);
    const SinkSet s = detect_sinks_llm(x, DetectionParams{});
    REQUIRE(s.size() <= spec.planted_sinks.size());
    CHECK(s.contains(spec.planted_sinks[0].token));
  }
}
