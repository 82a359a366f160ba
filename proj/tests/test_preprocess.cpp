#include <gtest/gtest.h>

#include <cmath>

#include "usvkit/preprocess.hpp"
#include "usvkit/synth.hpp"

using namespace usv;

namespace {

constexpr int kRate = 250000;

// Tone call embedded in light noise and padded like extract_snippet would.
CallSnippet make_snippet(double dur_ms, double pad_ms, std::uint64_t seed = 1, double freq = 70000.0) {
  SynthCallSpec s;
  s.call_class = dur_ms < 5.0 ? CallClass::Short : CallClass::Flat;
  s.duration_ms = dur_ms;
  s.base_freq_hz = freq;
  s.modulation_depth_hz = 2000.0;
  const auto call = generate_call(s, kRate);
  const auto pad = static_cast<std::size_t>(std::lround(pad_ms * 1e-3 * kRate));
  CallSnippet snip;
  snip.waveform.assign(call.size() + 2 * pad, 0.0);
  Rng rng(seed);
  for (auto& v : snip.waveform) v = rng.normal(0.0, 1e-3);
  for (std::size_t i = 0; i < call.size(); ++i) snip.waveform[pad + i] += call[i];
  snip.pad_ms = pad_ms;
  snip.duration_ms = dur_ms;
  snip.event = {pad_ms * 1e-3, pad_ms * 1e-3 + dur_ms * 1e-3};
  return snip;
}

Matrix brute_partition_mean(const Matrix& in, int r, int c) {
  Matrix out = Matrix::Zero(r, c);
  Matrix cnt = Matrix::Zero(r, c);
  for (Eigen::Index i = 0; i < in.rows(); ++i)
    for (Eigen::Index j = 0; j < in.cols(); ++j) {
      // cell (i, j) belongs to the output cell whose [floor(k*R/r), floor((k+1)*R/r)) holds it
      int oi = 0, oj = 0;
      while ((oi + 1) * in.rows() / r <= i) ++oi;
      while ((oj + 1) * in.cols() / c <= j) ++oj;
      out(oi, oj) += in(i, j);
      cnt(oi, oj) += 1.0;
    }
  return out.cwiseQuotient(cnt);
}

}  // namespace

TEST(Downsample, Constants) {
  EXPECT_EQ(downsample_mean(Matrix::Ones(4, 4), 2, 2), Matrix::Ones(2, 2));
  Matrix m(2, 2);
  m << 0, 2, 4, 6;
  EXPECT_DOUBLE_EQ(downsample_mean(m, 1, 1)(0, 0), 3.0);
}

TEST(Downsample, MatchesBruteForcePartition) {
  Rng rng(3);
  Matrix m(129, 51);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
  const Matrix got = downsample_mean(m, 48, 8);
  EXPECT_LE((got - brute_partition_mean(m, 48, 8)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Downsample, EqualPartitionsPreserveMean) {
  Rng rng(4);
  Matrix m(96, 40);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  EXPECT_NEAR(downsample_mean(m, 48, 8).mean(), m.mean(), 1e-12);
}

TEST(Downsample, Errors) {
  EXPECT_THROW(downsample_mean(Matrix::Ones(4, 4), 0, 2), std::invalid_argument);
  EXPECT_THROW(downsample_mean(Matrix::Ones(4, 4), 5, 2), std::invalid_argument);
}

TEST(FnnPreprocess, DurationFeature) {
  Rng rng(0);
  EXPECT_DOUBLE_EQ(fnn_preprocess(make_snippet(75.0, 10.0), Mode::Eval, rng).T, 0.5);
  EXPECT_DOUBLE_EQ(relative_duration(150.0), 1.0);
  EXPECT_DOUBLE_EQ(relative_duration(180.0), 1.0);
}

TEST(FnnPreprocess, ValuesInUnitRangeAndToneBandLit) {
  Rng rng(5);
  for (auto mode : {Mode::Eval, Mode::Train})
    for (double dur : {3.0, 30.0, 120.0}) {
      const auto in = fnn_preprocess(make_snippet(dur, 10.0), mode, rng);
      for (double v : in.S) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  // 70-72 kHz over 129 bins of 977 Hz -> row ~ 72/129*48 ~ 26
  const auto in = fnn_preprocess(make_snippet(60.0, 10.0), Mode::Eval, rng);
  int best = 0;
  double best_v = -1.0;
  for (int f = 0; f < kFnnRows; ++f) {
    double s = 0.0;
    for (int t = 0; t < kFnnCols; ++t) s += in.S[f * kFnnCols + t];
    if (s > best_v) best_v = s, best = f;
  }
  EXPECT_NEAR(best, 26, 1);
}

TEST(FnnPreprocess, EvalDeterministicTrainSeeded) {
  const auto snip = make_snippet(40.0, 10.0);
  Rng a(1), b(2);
  EXPECT_EQ(fnn_preprocess(snip, Mode::Eval, a).S, fnn_preprocess(snip, Mode::Eval, b).S);
  Rng c(7), d(7), e(8);
  const auto x = fnn_preprocess(snip, Mode::Train, c);
  EXPECT_EQ(x.S, fnn_preprocess(snip, Mode::Train, d).S);
  EXPECT_NE(x.S, fnn_preprocess(snip, Mode::Train, e).S);
}

TEST(FnnPreprocess, EvalMatchesManualPipeline) {
  const auto snip = make_snippet(30.0, 10.0);
  const auto energy = stft_energy(snip.waveform, kRate, StftParams::detection());
  Matrix db = to_db(energy, 80.0).values.transpose();
  db = (db.array() - db.minCoeff()) / (db.maxCoeff() - db.minCoeff());
  const Matrix trimmed = db.middleCols(4, db.cols() - 8);
  const Matrix small = brute_partition_mean(trimmed, 48, 8);
  Rng rng(0);
  const auto in = fnn_preprocess(snip, Mode::Eval, rng);
  for (int f = 0; f < 48; ++f)
    for (int t = 0; t < 8; ++t) EXPECT_NEAR(in.S[f * 8 + t], small(f, t), 1e-12);
}

TEST(FnnPreprocess, ConstantSpectrogramGivesZeros) {
  CallSnippet s;
  s.waveform.assign(5000, 0.0);
  s.duration_ms = 0.0;
  Rng rng(0);
  const auto in = fnn_preprocess(s, Mode::Eval, rng);
  for (double v : in.S) EXPECT_EQ(v, 0.0);
  const auto t = in.to_tensor();
  EXPECT_EQ(t.shape, (std::vector<int>{385}));
}

TEST(FnnPreprocess, VeryShortSnippetStillYieldsEightColumns) {
  CallSnippet s = make_snippet(3.0, 0.5);  // 4 ms, 4 columns
  Rng rng(1);
  for (auto mode : {Mode::Eval, Mode::Train}) EXPECT_NO_THROW(fnn_preprocess(s, mode, rng));
}

TEST(CnnPreprocess, ShapesAndTimeChannel) {
  DatasetStats st{{1.0, -30.0}, {10.0, 15.0}};
  Rng rng(3);
  for (double dur : {3.0, 40.0, 140.0}) {
    const auto snip = make_snippet(dur, 60.0, 2);
    const auto e = cnn_preprocess(snip, Mode::Eval, st, rng);
    EXPECT_EQ(e.shape, (std::vector<int>{3, 201, 170}));
    const auto t = cnn_preprocess(snip, Mode::Train, st, rng);
    EXPECT_EQ(t.shape, (std::vector<int>{3, 201, 150}));
    for (const auto* x : {&e, &t}) {
      const std::size_t plane = 201u * static_cast<std::size_t>(x->shape[2]);
      for (std::size_t i = 2 * plane; i < 3 * plane; ++i) ASSERT_EQ((*x)[i], relative_duration(dur));
    }
  }
}

TEST(CnnPreprocess, CropWidthRule) {
  EXPECT_EQ(cnn_crop_width(250), 150);
  EXPECT_EQ(cnn_crop_width(300), 170);
  EXPECT_EQ(cnn_crop_width(101), 1);
}

TEST(CnnPreprocess, TooShortSnippetRejected) {
  const auto snip = make_snippet(10.0, 10.0);  // ~30 columns
  Rng rng(0);
  EXPECT_THROW(cnn_preprocess(snip, Mode::Eval, {}, rng), std::invalid_argument);
}

// Eval output equals a hand-assembled crop / normalize / replicate-pad / crop.
TEST(CnnPreprocess, EvalMatchesManualPipeline) {
  const auto snip = make_snippet(40.0, 60.0, 4);
  const auto energy = stft_energy(snip.waveform, kRate, StftParams::classification());
  const Matrix ch0 = energy.values.transpose();
  const Matrix ch1 = to_db(energy, 60.0).values.transpose();
  const auto len = static_cast<int>(ch0.cols());
  const int w = std::min(len - 100, 170);
  const int start = (len - w) / 2;
  const DatasetStats st{{0.5, -20.0}, {3.0, 12.0}};
  Rng rng(0);
  const auto x = cnn_preprocess(snip, Mode::Eval, st, rng);
  const int left = (190 - w) / 2;
  double worst = 0.0;
  for (int c = 0; c < 2; ++c) {
    const Matrix& m = c == 0 ? ch0 : ch1;
    for (int f = 0; f < 201; ++f)
      for (int j = 0; j < 170; ++j) {
        const int col = std::clamp(j + 10 - left, 0, w - 1);
        const double want = (m(f, start + col) - st.mean[c]) / st.std[c];
        worst = std::max(worst, std::abs(x[(c * 201 + f) * 170 + j] - want));
      }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(CnnPreprocess, TrainDeterministicPerSeed) {
  const auto snip = make_snippet(50.0, 60.0);
  const DatasetStats st{{1.0, -30.0}, {10.0, 15.0}};
  Rng a(11), b(11), c(12);
  const auto x = cnn_preprocess(snip, Mode::Train, st, a);
  EXPECT_EQ(x, cnn_preprocess(snip, Mode::Train, st, b));
  EXPECT_NE(x, cnn_preprocess(snip, Mode::Train, st, c));
  Rng d(1), e(2);
  EXPECT_EQ(cnn_preprocess(snip, Mode::Eval, st, d), cnn_preprocess(snip, Mode::Eval, st, e));
}

TEST(CnnPreprocess, TrainNoiseAndShiftStayBounded) {
  // Constant normalized input: every augmentation except noise is the
  // identity, so the residual has the noise standard deviation.
  CnnSpectra s;
  s.channel[0] = Matrix::Constant(201, 200, 2.0);
  s.channel[1] = Matrix::Constant(201, 200, 2.0);
  s.duration_ms = 80.0;
  const DatasetStats st{{2.0, 2.0}, {1.0, 1.0}};
  Rng rng(5);
  const auto x = cnn_from_spectra(s, Mode::Train, st, rng);
  double ss = 0.0;
  const std::size_t n = 2u * 201 * 150;
  for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
  EXPECT_NEAR(std::sqrt(ss / n), 0.01, 0.0005);
}

TEST(CnnPreprocess, FrequencyShiftUsesReplication) {
  CnnSpectra s;
  s.channel[0] = Matrix::Zero(201, 200);
  for (int f = 0; f < 201; ++f) s.channel[0].row(f).setConstant(f);
  s.channel[1] = s.channel[0];
  const DatasetStats st{{0.0, 0.0}, {1.0, 1.0}};
  // every row stays constant across time and adjacent rows differ by 0 or 1
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto x = cnn_from_spectra(s, Mode::Train, st, rng);
    for (int f = 1; f < 201; ++f) {
      const double step = x[f * 150 + 75] - x[(f - 1) * 150 + 75];
      EXPECT_TRUE(std::abs(step) < 0.1 || std::abs(step - 1.0) < 0.1) << step;
    }
    const double shift = x[100 * 150 + 75] - 100.0;
    EXPECT_LE(std::abs(shift), 10.1);
  }
}

TEST(CnnPreprocess, PerSpectrogramNormalization) {
  const auto snip = make_snippet(40.0, 60.0);
  Rng rng(0);
  CnnOptions o;
  o.per_spectrogram_norm = true;
  const auto x = cnn_preprocess(snip, Mode::Eval, {}, rng, o);
  EXPECT_EQ(x.shape, (std::vector<int>{3, 201, 170}));
  // the crop itself sits at [left - 10, left - 10 + w) of the output
  const int w = cnn_crop_width(static_cast<int>(cnn_spectra(snip).columns()));
  const int from = (190 - w) / 2 - 10;
  double sum = 0.0;
  for (int f = 0; f < 201; ++f)
    for (int j = from; j < from + w; ++j) sum += x[f * 170 + j];
  EXPECT_NEAR(sum / (201.0 * w), 0.0, 1e-9);
}

TEST(Stats, TrivialCases) {
  CnnSpectra a, b;
  for (auto* s : {&a, &b}) s->channel = {Matrix::Zero(2, 2), Matrix::Zero(2, 2)};
  b.channel[0].setConstant(2.0);
  b.channel[1].setConstant(2.0);
  const auto st = compute_stats(std::vector<const CnnSpectra*>{&a, &b});
  EXPECT_DOUBLE_EQ(st.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(st.std[0], 1.0);
  EXPECT_THROW(compute_stats(std::vector<const CnnSpectra*>{&a}), std::invalid_argument);
  EXPECT_THROW(compute_stats(std::vector<const CnnSpectra*>{}), std::invalid_argument);
}

TEST(Stats, MatchesTwoPassOracle) {
  std::vector<CallSnippet> snippets;
  for (int i = 0; i < 6; ++i) snippets.push_back(make_snippet(20.0 + 15.0 * i, 60.0, i + 1, 55000.0 + 5000.0 * i));
  const auto st = compute_stats(snippets);
  for (int c = 0; c < 2; ++c) {
    std::vector<double> all;
    for (const auto& s : snippets) {
      const auto sp = cnn_spectra(s);
      all.insert(all.end(), sp.channel[c].data(), sp.channel[c].data() + sp.channel[c].size());
    }
    double mean = 0.0;
    for (double v : all) mean += v;
    mean /= static_cast<double>(all.size());
    double var = 0.0;
    for (double v : all) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(all.size()));
    EXPECT_NEAR(st.mean[c], mean, 1e-9 * std::max(1.0, std::abs(mean)));
    EXPECT_NEAR(st.std[c], sd, 1e-9 * std::max(1.0, sd));
  }
}

TEST(Stats, JsonRoundTripAndValidation) {
  const DatasetStats st{{1.5, -2.0}, {0.5, 3.0}};
  const auto j = nlohmann::json(st);
  EXPECT_EQ(j["mean"][1], -2.0);
  const auto back = j.get<DatasetStats>();
  EXPECT_EQ(back.std, st.std);
  EXPECT_THROW(nlohmann::json::parse(R"({"mean":[0,0],"std":[1,0]})").get<DatasetStats>(), std::invalid_argument);
}

TEST(Datasets, SampleMatchesDirectPreprocessing) {
  std::vector<CallSnippet> fs{make_snippet(30.0, 10.0), make_snippet(4.0, 10.0)};
  FnnDataset fd(fs, {CallClass::Flat, CallClass::Short});
  Rng a(3), b(3);
  EXPECT_EQ(fd.sample(1, Mode::Train, a), fnn_preprocess(fs[1], Mode::Train, b).to_tensor());
  EXPECT_EQ(fd.label(1), CallClass::Short);

  std::vector<CallSnippet> cs{make_snippet(30.0, 60.0, 1), make_snippet(70.0, 60.0, 2)};
  CnnDataset cd(cs, {CallClass::Flat, CallClass::Flat});
  cd.set_stats(cd.fit_stats({0, 1}));
  Rng c(4), d(4);
  EXPECT_EQ(cd.sample(0, Mode::Train, c), cnn_preprocess(cs[0], Mode::Train, cd.stats(), d));
  EXPECT_THROW(FnnDataset(fs, {CallClass::Flat}), std::invalid_argument);
}
