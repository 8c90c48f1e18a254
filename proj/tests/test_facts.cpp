#include <gtest/gtest.h>

#include "comem/facts.hpp"
#include "support.hpp"

using namespace comem;
using namespace comem::testing;

namespace {

PyramidConfig small(std::size_t levels, std::size_t din = 3, std::size_t ch = 4) {
  PyramidConfig c;
  c.input_dim = din;
  c.channels = ch;
  c.levels = levels;
  return c;
}

template <typename T>
ParameterStore<T> pyramid_store(const PyramidConfig& cfg, std::uint64_t seed) {
  ParameterStore<T> s;
  register_pyramid(s, "pyr", cfg);
  Rng rng(seed);
  glorot_init(s, rng);
  return s;
}

}  // namespace

TEST(Pyramid, LengthsHalveWithCeiling) {
  EXPECT_EQ(pyramid_lengths(34, small(3)), (std::vector<std::size_t>{34, 17, 9}));
  EXPECT_EQ(pyramid_lengths(4, small(2)), (std::vector<std::size_t>{4, 2}));
  EXPECT_EQ(pyramid_lengths(1, small(1)), (std::vector<std::size_t>{1}));
  EXPECT_THROW(pyramid_lengths(3, small(3)), GeometryError);
  EXPECT_THROW(pyramid_lengths(2, small(3)), GeometryError);
}

TEST(Pyramid, RegisteredShapes) {
  PyramidConfig c;  // 2048 -> 1024, three levels
  ParameterStore<float> s;
  register_pyramid(s, "pyr.a", c);
  EXPECT_EQ(s.value("pyr.a.conv1.K").shape(), (Shape{3, 2048, 1024}));
  EXPECT_EQ(s.value("pyr.a.conv3.K").shape(), (Shape{3, 1024, 1024}));
  EXPECT_EQ(s.value("pyr.a.up3_2.K").shape(), (Shape{2, 1024, 1024}));
  EXPECT_TRUE(s.contains("pyr.a.up3_1.b"));
  EXPECT_TRUE(s.contains("pyr.a.up2_1.K"));
  EXPECT_FALSE(s.contains("pyr.a.up1_0.K"));
}

TEST(Pyramid, EveryLevelKeepsFullResolution) {
  const auto cfg = small(3, 5, 6);
  auto store = pyramid_store<double>(cfg, 1);
  Tape<double> tape;
  auto p = bind_pyramid(tape, store, "pyr", cfg);
  auto facts = build_contextual_facts(tape.constant(random_tensor<double>(Shape{34, 5}, 2)), p);
  ASSERT_EQ(facts.size(), 3u);
  for (const auto& f : facts.levels) EXPECT_EQ(f.shape(), (Shape{34, 6}));
  for (const auto& f : facts.levels)
    for (auto v : f.value()) EXPECT_GE(v, 0.0);
}

TEST(Pyramid, SingleLevelIsReluConv) {
  const auto cfg = small(1);
  auto store = pyramid_store<double>(cfg, 3);
  store.value("pyr.conv1.b") = random_tensor<double>(Shape{4}, 4);
  Tape<double> tape;
  auto p = bind_pyramid(tape, store, "pyr", cfg);
  auto x = tape.constant(random_tensor<double>(Shape{6, 3}, 5));
  auto facts = build_contextual_facts(x, p);
  auto ref = relu(add_bias(conv1d_temporal(x, p.conv_kernel[0], 1, 1), p.conv_bias[0]));
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_EQ(facts.levels[0].value()[k], ref.value()[k]);
}

TEST(Pyramid, RejectsWrongFeatureWidth) {
  const auto cfg = small(2);
  auto store = pyramid_store<double>(cfg, 6);
  Tape<double> tape;
  auto p = bind_pyramid(tape, store, "pyr", cfg);
  EXPECT_THROW(build_contextual_facts(tape.zeros(Shape{8, 4}), p), DimensionError);
}

TEST(ReceptiveField, AnalyticValues) {
  PyramidConfig c;
  EXPECT_EQ(receptive_field(1, c), 3u);
  EXPECT_EQ(receptive_field(2, c), 8u);
  EXPECT_EQ(receptive_field(3, c), 18u);
}

// Perturbation oracle: with strictly positive weights every path is live,
// so the set of output steps that change when one input unit is bumped is
// exactly the receptive field. Its widest extent over all input positions
// is the field size.
TEST(ReceptiveField, PerturbationOracleMatchesAnalytic) {
  const auto cfg = small(3, 2, 2);
  ParameterStore<double> store;
  register_pyramid(store, "pyr", cfg);
  Rng rng(17);
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store.value(i).storage()) v = 0.5 + rng.uniform();
  const std::size_t L = 40;
  auto base = random_tensor<double>(Shape{L, 2}, 18);
  for (auto& v : base.storage()) v = std::abs(v);
  auto run = [&](const Tensor<double>& x) {
    Tape<double> tape(false);
    auto p = bind_pyramid(tape, store, "pyr", cfg);
    auto f = build_contextual_facts(tape.constant(x), p);
    std::vector<std::vector<double>> out;
    for (const auto& lv : f.levels) out.emplace_back(lv.value().begin(), lv.value().end());
    return out;
  };
  const auto ref = run(base);
  for (std::size_t level = 1; level <= 3; ++level) {
    // For output step j, collect the input units whose bump changes it.
    std::vector<std::size_t> lo(L, L), hi(L, 0);
    for (std::size_t u = 0; u < L; ++u) {
      auto x = base;
      x.at(u, 0) += 100.0;
      const auto out = run(x);
      for (std::size_t j = 0; j < L; ++j) {
        const bool changed = out[level - 1][j * 2] != ref[level - 1][j * 2] || out[level - 1][j * 2 + 1] != ref[level - 1][j * 2 + 1];
        if (changed) {
          lo[j] = std::min(lo[j], u);
          hi[j] = std::max(hi[j], u);
        }
      }
    }
    std::size_t widest = 0;
    for (std::size_t j = 0; j < L; ++j)
      if (lo[j] <= hi[j]) widest = std::max(widest, hi[j] - lo[j] + 1);
    EXPECT_EQ(widest, receptive_field(level, cfg)) << "level " << level;
  }
}

class PyramidGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PyramidGradients, FullPyramid) {
  const auto seed = GetParam();
  const auto cfg = small(3, 2, 3);
  ParameterStore<wide_t> store;
  register_pyramid(store, "pyr", cfg);
  store.add("x", Shape{9, 2});
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = random_tensor<wide_t>(store.value(i).shape(), derive_seed(seed, i), 0.6);
  auto build = [&](Tape<wide_t>& t, const ParameterStore<wide_t>& s) {
    auto f = build_contextual_facts(t.param(s, "x"), bind_pyramid(t, s, "pyr", cfg));
    return concat(f.levels, 0);
  };
  EXPECT_LE(op_grad_error(store, build, seed), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PyramidGradients, ::testing::Range<std::uint64_t>(1, 11));
