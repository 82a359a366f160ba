#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "usvkit/detection.hpp"
#include "usvkit/rng.hpp"

using namespace usv;

namespace {

SpectrogramGrid detection_grid(Matrix values) {
  SpectrogramGrid g;
  g.values = std::move(values);
  g.dt_s = 256.0 / 250000.0;
  g.df_hz = 976.5625;
  return g;
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int b : v) out.push_back(static_cast<std::uint8_t>(b));
  return out;
}

DetectionParams params(int ng, int nd) {
  DetectionParams p;
  p.gap_fuse_steps = ng;
  p.min_len_steps = nd;
  return p;
}

// Brute force over every one-to-one matching of positive-overlap pairs;
// keeps the matching whose descending overlap vector is lexicographically
// largest, which is what greedy max-overlap selection produces.
std::size_t brute_force_matches(const std::vector<CallEvent>& pred, const std::vector<CallEvent>& truth) {
  std::vector<double> best;
  std::vector<int> used(truth.size(), 0);
  std::vector<double> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == pred.size()) {
      auto s = cur;
      std::sort(s.rbegin(), s.rend());
      if (std::lexicographical_compare(best.begin(), best.end(), s.begin(), s.end())) best = s;
      return;
    }
    rec(i + 1);
    for (std::size_t j = 0; j < truth.size(); ++j) {
      const double ov = overlap_s(pred[i], truth[j]);
      if (used[j] || ov <= 0.0) continue;
      used[j] = 1;
      cur.push_back(ov);
      rec(i + 1);
      cur.pop_back();
      used[j] = 0;
    }
  };
  rec(0);
  return best.size();
}

std::vector<CallEvent> random_events(Rng& rng, int n) {
  std::vector<CallEvent> v;
  double t = rng.uniform(0, 0.1);
  for (int i = 0; i < n; ++i) {
    const double len = rng.uniform(0.01, 0.2);
    v.push_back({t, t + len});
    t += len + rng.uniform(0.001, 0.1);
  }
  return v;
}

}  // namespace

TEST(Features, BandHas73BinsAtDefaultResolution) {
  const auto g = detection_grid(Matrix::Ones(1, 129));
  const auto [lo, hi] = band_bins(g, DetectionParams{});
  EXPECT_EQ(lo, 41);
  EXPECT_EQ(hi, 113);
}

TEST(Features, DeltaAndUniformEntropy) {
  Matrix m = Matrix::Zero(2, 129);
  m(0, 60) = 5.0;
  m.row(1).segment(41, 73).setConstant(2.0);
  const auto f = compute_features(detection_grid(m), DetectionParams{});
  EXPECT_EQ(f.band_bins, 73);
  EXPECT_NEAR(f.entropy[0], 0.0, 1e-12);
  EXPECT_NEAR(f.entropy[1], std::log(73.0), 1e-9);
  EXPECT_NEAR(std::log(73.0), 4.2905, 1e-4);
}

TEST(Features, RatioAndSilentColumn) {
  Matrix m = Matrix::Zero(2, 129);
  m(0, 50) = 10.0;
  m(0, 10) = 2.0;
  const auto f = compute_features(detection_grid(m), DetectionParams{});
  EXPECT_NEAR(f.ratio[0], 5.0, 1e-11);
  EXPECT_DOUBLE_EQ(f.high_energy[0], 10.0);
  EXPECT_DOUBLE_EQ(f.low_energy[0], 2.0);
  EXPECT_DOUBLE_EQ(f.entropy[1], std::log(73.0));  // all-zero band
  EXPECT_EQ(indicator(f, DetectionParams{})[1], 0);
}

TEST(Features, EntropyBoundedAndBandErrors) {
  Rng rng(1);
  Matrix m(50, 129);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() * rng.uniform();
  const auto f = compute_features(detection_grid(m), DetectionParams{});
  for (double h : f.entropy) {
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(73.0));
  }
  DetectionParams p;
  p.band_high_hz = 200000;
  EXPECT_THROW(compute_features(detection_grid(m), p), std::invalid_argument);
  auto db = detection_grid(m);
  db.scale = Scale::Decibel;
  EXPECT_THROW(compute_features(db, DetectionParams{}), std::invalid_argument);
}

TEST(Indicator, DirectRule) {
  FeatureSeries f;
  f.entropy = {0.5, 4.2, 0.5, 3.5};
  f.ratio = {10, 10, 1.0, 2.0};
  EXPECT_EQ(indicator(f, DetectionParams{}), bits({1, 0, 0, 1}));
}

TEST(Indicator, ToneVersusNoiseColumn) {
  const int rate = 250000;
  Rng rng(2);
  std::vector<double> s(512);
  for (int i = 0; i < 256; ++i) s[i] = 0.5 * std::sin(2 * std::numbers::pi * 70000.0 * i / rate);
  for (int i = 256; i < 512; ++i) s[i] = rng.normal(0, 0.1);
  const Recording rec("tn", s, rate);
  const auto f = compute_features(stft_energy(rec, StftParams::detection()), DetectionParams{});
  EXPECT_EQ(indicator(f, DetectionParams{}), bits({1, 0}));
}

TEST(FuseAndFilter, Examples) {
  EXPECT_EQ(fuse_and_filter(bits({1, 1, 0, 1, 1}), params(2, 1)), (std::vector<StepInterval>{{0, 5}}));
  EXPECT_EQ(fuse_and_filter(bits({1, 0, 0, 1}), params(2, 1)), (std::vector<StepInterval>{{0, 1}, {3, 4}}));
  EXPECT_EQ(fuse_and_filter(bits({1, 1, 0, 0, 0, 1}), params(2, 2)), (std::vector<StepInterval>{{0, 2}}));
  EXPECT_TRUE(fuse_and_filter(bits({0, 0, 0}), params(2, 2)).empty());
  EXPECT_TRUE(fuse_and_filter({}, params(2, 2)).empty());
}

TEST(FuseAndFilter, IdempotentAndMinimumLength) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> ind(static_cast<std::size_t>(rng.uniform_int(0, 80)));
    for (auto& b : ind) b = rng.uniform() < 0.4;
    const auto p = params(static_cast<int>(rng.uniform_int(0, 6)), static_cast<int>(rng.uniform_int(0, 6)));
    const auto out = fuse_and_filter(ind, p);
    std::vector<std::uint8_t> re(ind.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      ASSERT_GE(out[i].end - out[i].start, static_cast<std::size_t>(p.min_len_steps));
      if (i) {
        ASSERT_GT(out[i].start, out[i - 1].end);
      }
      std::fill(re.begin() + out[i].start, re.begin() + out[i].end, 1);
    }
    ASSERT_EQ(fuse_and_filter(re, p), out);
  }
}

TEST(DetectCalls, SilenceGivesNothing) {
  EXPECT_TRUE(detect_calls(Recording("s", std::vector<double>(250000, 0.0), 250000), DetectionParams{}).empty());
}

TEST(DetectCalls, IntervalsAreSortedDisjointAndLongEnough) {
  const int rate = 250000;
  Rng rng(4);
  std::vector<double> s(rate / 2);
  for (auto& v : s) v = rng.normal(0, 0.003);
  for (double t0 : {0.05, 0.2, 0.35}) {
    const auto a = static_cast<std::size_t>(t0 * rate);
    for (std::size_t i = a; i < a + rate / 50; ++i) s[i] += 0.3 * std::sin(2 * std::numbers::pi * 65000.0 * i / rate);
  }
  const Recording rec("d", s, rate);
  const DetectionParams p;
  const auto ev = detect_calls(rec, p);
  ASSERT_EQ(ev.size(), 3u);
  for (std::size_t i = 0; i < ev.size(); ++i) {
    EXPECT_GE(ev[i].end_s - ev[i].start_s, p.min_len_steps * 256.0 / rate - 1e-12);
    if (i) {
      EXPECT_GT(ev[i].start_s, ev[i - 1].end_s);
    }
  }
}

TEST(ExtractSnippet, PaddingAndClamping) {
  const Recording rec("x", std::vector<double>(500000, 0.0), 250000);
  const auto s = extract_snippet(rec, {1.000, 1.050}, 10.0);
  EXPECT_EQ(s.waveform.size(), 17500u);
  EXPECT_NEAR(s.duration_ms, 50.0, 1e-9);
  const auto e = extract_snippet(rec, {0.002, 0.012}, 10.0);
  EXPECT_EQ(e.waveform.size(), static_cast<std::size_t>(0.022 * 250000));
  EXPECT_NEAR(extract_snippet(rec, {0.100, 0.1497}, 0.0).duration_ms, 49.7, 1e-9);
  EXPECT_THROW(extract_snippet(rec, {1.9, 2.5}, 10.0), std::invalid_argument);
  EXPECT_THROW(extract_snippet(rec, {0.5, 0.4}, 10.0), std::invalid_argument);
}

TEST(EvaluateDetection, LargeCountsRecallAndPrecision) {
  // 2146 matched calls, 15 spurious predictions, 114 missed calls
  std::vector<CallEvent> truth, pred;
  for (int i = 0; i < 2260; ++i) truth.push_back({i * 1.0, i * 1.0 + 0.05});
  for (int i = 0; i < 2146; ++i) pred.push_back({i * 1.0 + 0.001, i * 1.0 + 0.052});
  for (int i = 0; i < 15; ++i) pred.push_back({3000.0 + i, 3000.0 + i + 0.01});
  const auto r = evaluate_detection(pred, truth);
  EXPECT_EQ(r.true_positives, 2146u);
  EXPECT_NEAR(r.recall, 0.9496, 5e-5);
  EXPECT_NEAR(r.precision, 0.9931, 5e-5);
  EXPECT_NEAR(r.mean_start_delay_ms, 1.0, 1e-6);
  EXPECT_NEAR(r.mean_end_delay_ms, 2.0, 1e-6);
}

TEST(EvaluateDetection, IdentityAndMergedCalls) {
  const std::vector<CallEvent> truth{{0.1, 0.2}, {0.25, 0.3}, {0.5, 0.6}};
  const auto same = evaluate_detection(truth, truth);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.mean_start_delay_ms, 0.0);
  EXPECT_EQ(same.mean_end_delay_ms, 0.0);

  const auto merged = evaluate_detection({{0.1, 0.3}, {0.5, 0.6}}, truth);
  EXPECT_EQ(merged.two_as_one, 1u);
  EXPECT_EQ(merged.true_positives, 2u);

  const auto split = evaluate_detection({{0.1, 0.14}, {0.15, 0.2}}, {{0.1, 0.2}});
  EXPECT_EQ(split.one_as_two, 1u);
  EXPECT_EQ(split.true_positives, 1u);
  EXPECT_EQ(split.false_positives, 1u);

  EXPECT_THROW(evaluate_detection({{0.1, 0.3}, {0.2, 0.4}}, truth), std::invalid_argument);
}

TEST(EvaluateDetection, GreedyMatchesBruteForceOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    const auto truth = random_events(rng, static_cast<int>(rng.uniform_int(0, 5)));
    const auto pred = random_events(rng, static_cast<int>(rng.uniform_int(0, 5)));
    const auto r = evaluate_detection(pred, truth);
    ASSERT_EQ(r.true_positives, brute_force_matches(pred, truth)) << trial;
  }
}

TEST(DetectionParamsJson, KeysRoundTripAndValidation) {
  DetectionParams p;
  p.ratio_threshold = 3.0;
  p.gap_fuse_steps = 7;
  const nlohmann::json j = p;
  for (const char* k : {"entropy_threshold", "ratio_threshold", "gap_fuse_steps", "min_len_steps", "band_low_hz",
                        "band_high_hz", "snippet_pad_ms"})
    EXPECT_TRUE(j.contains(k)) << k;
  const auto q = j.get<DetectionParams>();
  EXPECT_EQ(q.ratio_threshold, 3.0);
  EXPECT_EQ(q.gap_fuse_steps, 7);
  EXPECT_THROW((nlohmann::json{{"bogus", 1}}.get<DetectionParams>()), std::invalid_argument);
  EXPECT_THROW((nlohmann::json{{"band_low_hz", 120000.0}}.get<DetectionParams>()), std::invalid_argument);
}
