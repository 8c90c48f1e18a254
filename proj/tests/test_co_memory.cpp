#include <gtest/gtest.h>

#include "comem/co_memory.hpp"
#include "support.hpp"

using namespace comem;
using namespace comem::testing;

namespace {

CoMemoryConfig small_cfg() { return {4, 5, 3, 3, 4, 2}; }

struct Fixture {
  CoMemoryConfig cfg = small_cfg();
  ParameterStore<double> store;
  Tape<double> tape;
  CoMemoryParams<double> p;
  ContextualFactSet<double> a, b;
  Var<double> q;

  Fixture(std::uint64_t seed, std::size_t levels = 2, std::size_t len = 6) {
    register_co_memory(store, "cm", cfg);
    for (std::size_t i = 0; i < store.size(); ++i)
      store.value(i) = random_tensor<double>(store.value(i).shape(), derive_seed(seed, i), 0.5);
    p = bind_co_memory(tape, store, "cm", cfg);
    for (std::size_t n = 0; n < levels; ++n) {
      a.levels.push_back(tape.constant(random_tensor<double>(Shape{len, cfg.fact_dim}, derive_seed(seed, 100 + n))));
      b.levels.push_back(tape.constant(random_tensor<double>(Shape{len, cfg.fact_dim}, derive_seed(seed, 200 + n))));
    }
    b.modality = Modality::Motion;
    q = tape.constant(random_tensor<double>(Shape{cfg.question_dim}, derive_seed(seed, 300)));
  }
};

}  // namespace

TEST(CoMemory, RegisteredShapes) {
  ParameterStore<float> s;
  register_co_memory(s, "comem", CoMemoryConfig{});
  EXPECT_EQ(s.value("comem.a.W1").shape(), (Shape{1536, 1024}));
  EXPECT_EQ(s.value("comem.a.W2").shape(), (Shape{1024, 512}));
  EXPECT_EQ(s.value("comem.b.W3").shape(), (Shape{1536, 512}));
  EXPECT_EQ(s.value("comem.b.W4").shape(), (Shape{512, 1}));
  EXPECT_EQ(s.value("comem.a.update.W").shape(), (Shape{1024 + 512 + 512, 1024}));
  EXPECT_EQ(s.value("comem.a.init.P").shape(), (Shape{512, 1024}));
}

TEST(CoMemory, InitMemoryIsReluOfProjection) {
  Fixture f(1);
  auto m = init_memory(f.q, f.p);
  auto ref = relu(matmul(f.q, f.p.a.init_proj));
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_EQ(m.m_a.value()[k], ref.value()[k]);
  EXPECT_EQ(m.m_b.shape(), Shape{5});
  EXPECT_THROW(init_memory(f.tape.zeros(Shape{4}), f.p), DimensionError);
}

// Independent loop evaluation of the attention gates.
TEST(CoMemory, GatesMatchLoopOracle) {
  Fixture f(2);
  auto m = init_memory(f.q, f.p);
  auto maps = co_attention(f.a, f.b, m, f.q, f.p);
  const auto& cfg = f.cfg;
  auto val = [](const Var<double>& v) { return std::vector<double>(v.value().begin(), v.value().end()); };
  const auto W1 = val(f.p.a.w1), W2 = val(f.p.a.w2), W3 = val(f.p.a.w3), W4 = val(f.p.a.w4);
  std::vector<double> own = val(m.m_a), other = val(m.m_b), qv = val(f.q);
  own.insert(own.end(), qv.begin(), qv.end());
  other.insert(other.end(), qv.begin(), qv.end());
  const std::size_t mq = own.size();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const auto fact = val(f.a.levels[i]);
      double g = 0;
      for (std::size_t z = 0; z < cfg.attention_dim; ++z) {
        double pre = 0;
        for (std::size_t c = 0; c < cfg.fact_dim; ++c) {
          double inner = fact[j * cfg.fact_dim + c];
          for (std::size_t k = 0; k < mq; ++k) inner += own[k] * W1[k * cfg.fact_dim + c];
          pre += inner * W2[c * cfg.attention_dim + z];
        }
        double outer = 0;
        for (std::size_t k = 0; k < mq; ++k) outer += other[k] * W3[k * cfg.attention_dim + z];
        g += (std::tanh(pre) + outer) * W4[z];
      }
      EXPECT_NEAR(maps.ga.value()[i * 6 + j], g, 1e-10);
    }
}

TEST(CoMemory, NormalizationOverLevelsAndSteps) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Fixture f(seed, 3, 7);
    auto ep = run_episodes(f.a, f.b, f.q, f.p, 2);
    ASSERT_EQ(ep.maps.size(), 2u);
    for (const auto& m : ep.maps) {
      for (const auto* lw : {&m.level_weights_a, &m.level_weights_b})
        for (std::size_t j = 0; j < 7; ++j) {
          double col = 0;
          for (std::size_t i = 0; i < 3; ++i) col += lw->value()[i * 7 + j];
          EXPECT_NEAR(col, 1.0, 1e-12);
        }
      for (const auto* sg : {&m.step_gates_a, &m.step_gates_b}) {
        double s = 0;
        for (auto v : sg->value()) s += v;
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Ensemble, SingleLevelIsIdentity) {
  Fixture f(3, 1);
  auto fused = dynamic_fact_ensemble(f.a, f.tape.constant(Shape{1, 6}, std::vector<double>(6, 1.0)));
  for (std::size_t k = 0; k < fused.size(); ++k) EXPECT_EQ(fused.value()[k], f.a.levels[0].value()[k]);
}

TEST(Ensemble, UniformWeightsGiveLevelMean) {
  Fixture f(4, 3);
  auto fused = dynamic_fact_ensemble(f.a, f.tape.constant(Shape{3, 6}, std::vector<double>(18, 1.0 / 3.0)));
  for (std::size_t k = 0; k < fused.size(); ++k) {
    const double mean = (f.a.levels[0].value()[k] + f.a.levels[1].value()[k] + f.a.levels[2].value()[k]) / 3.0;
    EXPECT_NEAR(fused.value()[k], mean, 1e-12);
  }
}

TEST(Ensemble, WeightedSumLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Fixture f(seed, 2);
    auto w = softmax(f.tape.constant(random_tensor<double>(Shape{2, 6}, seed)), 0);
    auto fused = dynamic_fact_ensemble(f.a, w);
    for (std::size_t j = 0; j < 6; ++j)
      for (std::size_t c = 0; c < 4; ++c) {
        double ref = 0;
        for (std::size_t i = 0; i < 2; ++i) ref += w.value()[i * 6 + j] * f.a.levels[i].value()[j * 4 + c];
        EXPECT_NEAR(fused.value()[j * 4 + c], ref, 1e-12);
      }
  }
}

TEST(Ensemble, RejectsUnnormalizedWeights) {
  Fixture f(5, 2);
  EXPECT_THROW(dynamic_fact_ensemble(f.a, f.tape.constant(Shape{2, 6}, std::vector<double>(12, 0.7))), DomainError);
  EXPECT_THROW(dynamic_fact_ensemble(f.a, f.tape.constant(Shape{3, 6}, std::vector<double>(18, 1.0 / 3))), DimensionError);
}

TEST(CoMemory, CycleShapesAndUpdate) {
  Fixture f(6);
  auto m0 = init_memory(f.q, f.p);
  auto r = memory_cycle(f.a, f.b, m0, f.q, f.p);
  EXPECT_EQ(r.c_a.shape(), Shape{4});
  EXPECT_EQ(r.memory.m_a.shape(), Shape{5});
  auto ref = relu(affine(concat<double>({m0.m_a, f.q, r.c_a}), f.p.a.update_w, f.p.a.update_b));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r.memory.m_a.value()[k], ref.value()[k]);
  auto ep = run_episodes(f.a, f.b, f.q, f.p, 3);
  EXPECT_EQ(ep.m_h.shape(), Shape{10});
  EXPECT_EQ(ep.maps.back().cycle, 3u);
  EXPECT_THROW(run_episodes(f.a, f.b, f.q, f.p, 0), DomainError);
}

TEST(CoMemory, ZeroStepGatesGiveZeroContext) {
  Fixture f(7);
  EpisodeOptions opt;
  opt.zero_step_gates = true;
  auto r = memory_cycle(f.a, f.b, init_memory(f.q, f.p), f.q, f.p, opt);
  for (auto v : r.c_a.value()) EXPECT_EQ(v, 0.0);
  for (auto v : r.c_b.value()) EXPECT_EQ(v, 0.0);
}

TEST(CoMemory, MismatchedModalitiesRejected) {
  Fixture f(8, 2, 6);
  Fixture g(9, 3, 6);
  auto m = init_memory(f.q, f.p);
  EXPECT_THROW(co_attention(f.a, g.b, m, f.q, f.p), DimensionError);
}

// Does gate entry e of one modality depend on the other modality's memory?
bool cross_entry_nonzero(const Fixture& f, const MemoryState<double>& m, bool appearance, std::size_t e) {
  Tape<double> tape;
  auto p = bind_co_memory(tape, f.store, "cm", f.cfg);
  ContextualFactSet<double> a, b;
  for (const auto& l : f.a.levels) a.levels.push_back(tape.constant(l.tensor()));
  for (const auto& l : f.b.levels) b.levels.push_back(tape.constant(l.tensor()));
  MemoryState<double> mm{tape.variable(m.m_a.tensor()), tape.variable(m.m_b.tensor()), 0};
  auto maps = co_attention(a, b, mm, tape.constant(f.q.tensor()), p);
  auto g = appearance ? maps.ga : maps.gb;
  tape.backward(element(reshape(g, Shape{g.size()}), e));
  for (auto v : tape.grad_of(appearance ? mm.m_b : mm.m_a))
    if (v != 0.0) return true;
  return false;
}

// Jacobian of ga w.r.t. m_b (and gb w.r.t. m_a): nonzero iff W3 != 0.
TEST(CoMemory, CrossModalJacobian) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (bool zero_w3 : {false, true}) {
      Fixture f(seed);
      if (zero_w3) {
        for (auto& v : f.store.value("cm.a.W3").storage()) v = 0;
        for (auto& v : f.store.value("cm.b.W3").storage()) v = 0;
      }
      const MemoryState<double> m{f.tape.constant(random_tensor<double>(Shape{5}, seed + 50)),
                                  f.tape.constant(random_tensor<double>(Shape{5}, seed + 60)), 0};
      for (std::size_t e = 0; e < 12; ++e) {
        EXPECT_EQ(cross_entry_nonzero(f, m, true, e), !zero_w3) << "seed " << seed << " ga entry " << e;
        EXPECT_EQ(cross_entry_nonzero(f, m, false, e), !zero_w3) << "seed " << seed << " gb entry " << e;
      }
    }
  }
}

class CoMemoryGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(CoMemoryGradients, TwoCycles) {
  const auto seed = GetParam();
  const auto cfg = small_cfg();
  ParameterStore<wide_t> store;
  register_co_memory(store, "cm", cfg);
  store.add("fa0", Shape{5, 4});
  store.add("fa1", Shape{5, 4});
  store.add("fb0", Shape{5, 4});
  store.add("fb1", Shape{5, 4});
  store.add("q", Shape{3});
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = random_tensor<wide_t>(store.value(i).shape(), derive_seed(seed, i), 0.5);
  auto build = [&](Tape<wide_t>& t, const ParameterStore<wide_t>& s) {
    ContextualFactSet<wide_t> a, b;
    a.levels = {t.param(s, "fa0"), t.param(s, "fa1")};
    b.levels = {t.param(s, "fb0"), t.param(s, "fb1")};
    return run_episodes(a, b, t.param(s, "q"), bind_co_memory(t, s, "cm", cfg), 2).m_h;
  };
  EXPECT_LE(op_grad_error(store, build, seed), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, CoMemoryGradients, ::testing::Range<std::uint64_t>(1, 11));
