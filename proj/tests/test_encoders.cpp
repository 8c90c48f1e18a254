#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "comem/encoders.hpp"
#include "support.hpp"

using namespace comem;
using namespace comem::testing;

namespace {

ParameterStore<double> gru_store(std::size_t din, std::size_t h, bool update_gate, std::uint64_t seed) {
  ParameterStore<double> store;
  register_gru(store, "g", din, h, update_gate);
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = random_tensor<double>(store.value(i).shape(), derive_seed(seed, i), 0.7);
  return store;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Gru, RegistersNamedWeights) {
  ParameterStore<float> s;
  register_gru(s, "qenc.l1", 300, 512);
  EXPECT_EQ(s.value("qenc.l1.Wz").shape(), (Shape{300, 512}));
  EXPECT_EQ(s.value("qenc.l1.Uh").shape(), (Shape{512, 512}));
  EXPECT_EQ(s.value("qenc.l1.bh").shape(), Shape{512});
  ParameterStore<float> a;
  register_gru(a, "att", 8, 4, false);
  EXPECT_FALSE(a.contains("att.Wz"));
}

// Scalar-dimension runs against a hand-written recurrence.
TEST(Gru, ScalarRecurrenceOracle) {
  auto store = gru_store(1, 1, true, 5);
  auto v = [&](const char* n) { return store.value(std::string("g.") + n)[0]; };
  const std::vector<double> xs{0.3, -1.2, 0.8, 2.0};
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto hs = gru_sequence(tape.constant(Shape{4, 1}, xs), p);
  double h = 0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const double z = sig(xs[j] * v("Wz") + h * v("Uz") + v("bz"));
    const double r = sig(xs[j] * v("Wr") + h * v("Ur") + v("br"));
    const double c = std::tanh(xs[j] * v("Wh") + r * h * v("Uh") + v("bh"));
    h = z * c + (1 - z) * h;
    EXPECT_NEAR(hs.value()[j], h, 1e-9) << "step " << j;
  }
}

TEST(Gru, StepMatchesSequence) {
  auto store = gru_store(3, 4, true, 6);
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto xs = tape.constant(random_tensor<double>(Shape{3, 3}, 7));
  auto hs = gru_sequence(xs, p);
  auto h = tape.zeros(Shape{4});
  for (std::size_t j = 0; j < 3; ++j) h = gru_step(row(xs, j), h, p);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(h.value()[k], hs.value()[8 + k], 1e-12);
}

TEST(AttentionGru, ScalarRecurrenceOracle) {
  auto store = gru_store(1, 1, false, 8);
  auto v = [&](const char* n) { return store.value(std::string("g.") + n)[0]; };
  const std::vector<double> facts{0.5, -0.4, 1.1, 0.2, -2.0};
  const std::vector<double> gates{0.1, 0.3, 0.0, 0.4, 0.2};
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto c = attention_gru_encode(tape.constant(Shape{5, 1}, facts), tape.constant(Shape{5}, gates), p);
  double h = 0;
  for (std::size_t j = 0; j < facts.size(); ++j) {
    const double r = sig(facts[j] * v("Wr") + h * v("Ur") + v("br"));
    const double cand = std::tanh(facts[j] * v("Wh") + r * h * v("Uh") + v("bh"));
    h = gates[j] * cand + (1 - gates[j]) * h;
  }
  EXPECT_NEAR(c.item(), h, 1e-9);
}

TEST(AttentionGru, ZeroGatesGiveZeroVector) {
  auto store = gru_store(4, 3, false, 9);
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto c = attention_gru_encode(tape.constant(random_tensor<double>(Shape{6, 4}, 10)), tape.zeros(Shape{6}), p);
  for (auto x : c.value()) EXPECT_EQ(x, 0.0);
}

TEST(AttentionGru, OneHotGateGivesThatStepsCandidate) {
  auto store = gru_store(4, 3, false, 11);
  const std::size_t hot = 3;
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto facts = tape.constant(random_tensor<double>(Shape{6, 4}, 12));
  std::vector<double> g(6, 0.0);
  g[hot] = 1.0;
  auto c = attention_gru_encode(facts, tape.constant(Shape{6}, g), p);
  // With h_{hot-1} = 0 the candidate is tanh(f Wh + bh).
  auto ref = tanh(add_bias(matmul(row(facts, hot), p.wh), p.bh));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(c.value()[k], ref.value()[k], 1e-12);
}

TEST(AttentionGru, RejectsGatesOutsideUnitInterval) {
  auto store = gru_store(2, 2, false, 13);
  Tape<double> tape;
  auto p = bind_gru(tape, store, "g");
  auto facts = tape.zeros(Shape{2, 2});
  EXPECT_THROW(attention_gru_encode(facts, tape.constant(Shape{2}, {0.5, 1.5}), p), DomainError);
  EXPECT_THROW(attention_gru_encode(facts, tape.constant(Shape{2}, {-0.1, 0.5}), p), DomainError);
  EXPECT_THROW(attention_gru_encode(facts, tape.zeros(Shape{3}), p), DimensionError);
}

TEST(QuestionEncoder, ShapesAndErrors) {
  ParameterStore<double> store;
  store.add("embed", Shape{10, 5});
  register_gru(store, "l1", 5, 6);
  register_gru(store, "l2", 6, 6);
  Rng rng(3);
  glorot_init(store, rng);
  Tape<double> tape;
  auto table = tape.param(store, "embed");
  auto l1 = bind_gru(tape, store, "l1"), l2 = bind_gru(tape, store, "l2");
  EXPECT_EQ(encode_question({1, 2, 3}, table, l1, l2).shape(), Shape{6});
  EXPECT_EQ(encode_question({4}, table, l1, l2).shape(), Shape{6});
  EXPECT_THROW(encode_question({}, table, l1, l2), DomainError);
  EXPECT_THROW(encode_question({1, 10}, table, l1, l2), VocabularyError);
  // Candidates share the question weights.
  const auto q = encode_question({1, 2}, table, l1, l2);
  const auto a = encode_answer_candidate({1, 2}, table, l1, l2);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(q.value()[k], a.value()[k]);
}

TEST(PretrainedEmbeddings, LoadsKnownWordsAndReportsBadLines) {
  std::map<std::string, std::size_t> vocab{{"cat", 0}, {"dog", 2}};
  Tensor<float> table(Shape{3, 2});
  std::istringstream ok("cat 0.5 -1\nbird 1 1\ndog 2 3\n");
  EXPECT_EQ(load_pretrained_embeddings(ok, vocab, table), 2u);
  EXPECT_EQ(table.at(0, 1), -1.f);
  EXPECT_EQ(table.at(2, 0), 2.f);
  std::istringstream bad("cat 0.5\n");
  try {
    load_pretrained_embeddings(bad, vocab, table);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
}

class EncoderGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(EncoderGradients, GruAndAttentionGru) {
  const auto seed = GetParam();
  ParameterStore<wide_t> store;
  register_gru(store, "g", 3, 4);
  register_gru(store, "a", 3, 4, false);
  store.add("x", Shape{5, 3});
  store.add("gl", Shape{5});
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = random_tensor<wide_t>(store.value(i).shape(), derive_seed(seed, i), 0.8);
  auto build = [](Tape<wide_t>& t, const ParameterStore<wide_t>& s) {
    auto x = t.param(s, "x");
    auto hs = gru_sequence(x, bind_gru(t, s, "g"));
    auto gates = softmax(t.param(s, "gl"));
    auto c = attention_gru_encode(x, gates, bind_gru(t, s, "a"));
    return concat<wide_t>({reshape(hs, Shape{20}), c});
  };
  EXPECT_LE(op_grad_error(store, build, seed), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, EncoderGradients, ::testing::Range<std::uint64_t>(1, 11));
