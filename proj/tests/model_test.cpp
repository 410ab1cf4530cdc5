#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>

#include "gradcheck.hpp"
#include "tg/model.hpp"

using namespace tg;
using namespace tg::model;
using tg::testing::max_grad_error;
using tg::testing::numeric_grad;
using tg::testing::rel_error;
using VarD = ad::Var<double>;

namespace {

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = 264;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_sentence_tokens = 4;
  c.span = 4;
  c.memory_capacity = 2;
  c.sentence_layer = 1;
  c.context = 32;
  c.dropout_token = c.dropout_sentence = c.dropout_attention = 0;
  return c;
}

// Widens the init so signals survive a few layers.
void widen(Params<double>& p, double f) {
  for (auto& [n, v] : p.named) {
    if (n.find("norm") != std::string::npos || n.find("gate") != std::string::npos) continue;
    auto x = v.mutable_value();
    for (auto& e : x) e *= f;
  }
}

void jitter(Params<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 0.1);
  for (auto& [n, v] : p.named) {
    if (n.find("gate") != std::string::npos) continue;
    for (auto& e : v.mutable_value()) e += nd(rng);
  }
}

SentenceTensor sent(std::vector<std::uint32_t> lex, std::size_t L = 4, bool fin = false) {
  return text::make_sentence_tensor(lex, L, fin);
}

SentenceStream stream_of(std::vector<SentenceTensor> s) {
  SentenceStream st;
  st.sentences = std::move(s);
  return st;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

std::vector<double> row(const VarD& v, std::size_t r) {
  return {v.value().begin() + r * v.cols(), v.value().begin() + (r + 1) * v.cols()};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Independent scalar reference pieces.
std::vector<double> ref_layer_norm(std::vector<double> x, std::span<const double> g, std::span<const double> b) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return x;
}

double ref_gelu(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))); }

// y = x·W + b for a row vector.
std::vector<double> ref_affine(std::span<const double> x, const VarD& W, const VarD* b) {
  std::vector<double> y(W.cols(), 0.0);
  for (std::size_t j = 0; j < W.cols(); ++j) {
    for (std::size_t i = 0; i < W.rows(); ++i) y[j] += x[i] * W(i, j);
    if (b) y[j] += b->value()[j];
  }
  return y;
}

std::vector<double> ref_ffn(std::vector<double> h, const Layer<double>& L) {
  auto n = ref_layer_norm(h, L.ffn_norm.gain.value(), L.ffn_norm.bias.value());
  auto a = ref_affine(n, L.ffn_in.w, &L.ffn_in.b);
  for (auto& v : a) v = ref_gelu(v);
  auto o = ref_affine(a, L.ffn_out.w, &L.ffn_out.b);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += o[i];
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

TEST(InitParams, SameSeedIsBitwiseIdentical) {
  auto c = tiny(Variant::tg);
  auto a = init_params<double>(c, 11), b = init_params<double>(c, 11);
  ASSERT_EQ(a.named.size(), b.named.size());
  for (std::size_t i = 0; i < a.named.size(); ++i) {
    EXPECT_EQ(a.named[i].first, b.named[i].first);
    EXPECT_TRUE(std::equal(a.named[i].second.value().begin(), a.named[i].second.value().end(),
                           b.named[i].second.value().begin()));
  }
}

TEST(InitParams, GatesNormsAndBiases) {
  auto c = tiny(Variant::tg_self_then_cross);
  auto p = init_params<double>(c, 3);
  for (const auto& [n, v] : p.named) {
    if (n.ends_with(".gate")) {
      EXPECT_EQ(v.item(), 1.0) << n;
    } else if (n.ends_with(".gain")) {
      for (double x : v.value()) EXPECT_EQ(x, 1.0) << n;
    } else if (n.ends_with(".bias") || n.ends_with(".b")) {
      for (double x : v.value()) EXPECT_EQ(x, 0.0) << n;
    }
  }
  EXPECT_EQ(gate_values(p).size(), 2u);
}

TEST(InitParams, WeightStdMatches) {
  ModelConfig c;
  c.vocab_size = 300;
  c.n_layers = 1;
  c.sentence_layer = 1;
  auto p = init_params<float>(c, 5);
  const auto& w = p.get("layers.1.self_attn.q.w");
  ASSERT_EQ(w.size(), 768u * 768u);
  double s = 0, s2 = 0;
  for (float x : w.value()) {
    s += x;
    s2 += double(x) * x;
  }
  const double n = w.size(), mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(sd, 0.02, 0.001);
}

TEST(CountParams, ReferenceScaleTotals) {
  ModelConfig c;  // 12 × 768, alternating self/cross
  const double tg_count = count_nonembedding_params(c);
  EXPECT_NEAR(tg_count / 85.6e6, 1.0, 0.01);
  c.variant = Variant::tg_self_then_cross;
  EXPECT_NEAR(count_nonembedding_params(c) / 114e6, 1.0, 0.02);
}

TEST(CountParams, HandCountedTinyModel) {
  ModelConfig c;
  c.vocab_size = 260;
  c.n_layers = 1;
  c.d_model = 2;
  c.n_heads = 1;
  c.ffn_mult = 1;
  c.sentence_layer = 1;
  // self norm 2+2, four 2×2 projections with 2-wide biases 4·6, ffn norm 2+2,
  // ffn in 2×2+2, ffn out 2×2+2, sentence head 2×2, final norm 2+2.
  EXPECT_EQ(count_nonembedding_params(c), 4u + 24u + 4u + 6u + 6u + 4u + 4u);
}

TEST(CountParams, MatchesAllocatedExtentsOnRandomConfigs) {
  std::mt19937_64 rng(99);
  const Variant vs[] = {Variant::tg, Variant::gpt2, Variant::gpt2_boundary, Variant::tg_fixed_span,
                        Variant::gpt2_gist, Variant::tg_detach, Variant::tg_incontext, Variant::tg_self_then_cross,
                        Variant::tg_parallel, Variant::tg_last_layer, Variant::tg_no_seed};
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.variant = vs[rng() % std::size(vs)];
    c.vocab_size = 260 + rng() % 40;
    c.n_layers = 1 + rng() % 5;
    c.n_heads = 1 + rng() % 3;
    c.d_model = c.n_heads * (1 + rng() % 4);
    c.ffn_mult = 1 + rng() % 4;
    c.sentence_layer = 1 + rng() % c.n_layers;
    c.sentence_head_depth = 1 + rng() % 3;
    c.context = 8;
    auto p = init_params<float>(c, trial);
    std::uint64_t n = 0;
    for (const auto& [name, v] : p.named)
      if (name != "tok_emb" && name != "pos_emb") n += v.rows() * v.cols();
    EXPECT_EQ(count_nonembedding_params(c), n) << variant_name(c.variant);
  }
}

TEST(ModelConfig, ValidationRejects) {
  auto c = tiny(Variant::tg);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny(Variant::tg);
  c.sentence_layer = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny(Variant::tg);
  c.memory_capacity = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny(Variant::gpt2);
  c.memory_capacity = 0;
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, TextRoundTrip) {
  auto c = tiny(Variant::tg_parallel);
  c.gate_init = 0.25;
  c.dropout_attention = 0.1;
  auto back = model_config_from_text(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_THROW(model_config_from_text("bogus_key = 1\n"), std::invalid_argument);
}

TEST(LayerSchedule, AlternatesSelfAndCross) {
  ModelConfig c;
  auto k = layer_schedule(c);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(k[i], (i + 1) % 2 == 1 ? LayerKind::self : LayerKind::cross);
  auto p = init_params<float>(tiny(Variant::tg), 0);
  auto g = gate_values(p);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0].first, 2u);
}

// ---------------------------------------------------------------------------
// Embedding and memory

TEST(EmbedAndSeed, EmptyMemoryUsesStaticBos) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 1);
  SentenceMemory<double> mem(2);
  auto x = embed_and_seed(sent({10, 11}), mem, p, c);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(x(0, j), p.tok_emb(kBos, j) + p.pos_emb(0, j));
}

TEST(EmbedAndSeed, SeedReplacesRowZero) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 1);
  SentenceMemory<double> mem(2);
  std::vector<double> m(8);
  for (std::size_t j = 0; j < 8; ++j) m[j] = 0.5 + j;
  mem.push(VarD::constant(1, 8, m));
  auto x = embed_and_seed(sent({10, 11}), mem, p, c);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(x(0, j), m[j] + p.pos_emb(0, j));
    EXPECT_EQ(x(1, j), p.tok_emb(10, j) + p.pos_emb(1, j));
  }
  auto cn = tiny(Variant::tg_no_seed);
  auto xn = embed_and_seed(sent({10, 11}), mem, p, cn);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(xn(0, j), p.tok_emb(kBos, j) + p.pos_emb(0, j));
}

TEST(MemoryKV, EmptyMemoryGivesNoRows) {
  SentenceMemory<double> mem(3);
  EXPECT_EQ(build_memory_kv(mem, 8).size(), 0u);
}

TEST(MemoryKV, KeysCarrySinusoidsValuesDoNot) {
  const std::size_t d = 6;
  SentenceMemory<double> mem(3);
  std::mt19937_64 rng(4);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 4; ++i) {
    rows.push_back(vec(tg::testing::random_param(1, d, rng).value()));
  }
  for (auto& r : rows) mem.push(VarD::constant(1, d, r));
  auto kv = build_memory_kv(mem, d);
  ASSERT_EQ(kv.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& m = rows[s + 1];  // oldest surviving entry is slot 1
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_EQ(kv.values(s, j), m[j]);
      const double k = std::floor(j / 2.0) * 2;
      const double ang = (s + 1) / std::pow(10000.0, k / d);
      const double pe = j % 2 == 0 ? std::sin(ang) : std::cos(ang);
      EXPECT_NEAR(kv.keys(s, j) - kv.values(s, j), pe, 1e-15);
    }
  }
}

TEST(SentenceMemory, FifoEviction) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 2);
  SentenceMemory<double> mem(2);
  std::vector<VarD> ms;
  for (auto lex : {std::vector<std::uint32_t>{10}, {11, 12}, {13}}) ms.push_back(forward_sentence_step(p, sent(lex), mem, c).sentence_vector);
  ASSERT_EQ(mem.size(), 2u);
  EXPECT_EQ(mem.entries()[0].node(), ms[1].node());
  EXPECT_EQ(mem.entries()[1].node(), ms[2].node());
}

// ---------------------------------------------------------------------------
// Blocks

TEST(SelfAttentionBlock, SinglePositionHandTrace) {
  auto c = tiny(Variant::gpt2);
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  auto p = init_params<double>(c, 8);
  widen(p, 20);
  jitter(p, 9);
  const auto& L = p.layers[0];
  std::vector<double> h0 = {0.7, -1.3};
  auto out = self_attention_block<double>(VarD::constant(1, 2, h0), L, std::vector<double>{0.0}, c);
  // One position: the softmax weight is 1, so the increment is the V path.
  auto n = ref_layer_norm(h0, L.self_norm.gain.value(), L.self_norm.bias.value());
  auto v = ref_affine(n, L.self_attn.v.w, &L.self_attn.v.b);
  auto o = ref_affine(v, L.self_attn.o.w, &L.self_attn.o.b);
  auto expect = ref_ffn({h0[0] + o[0], h0[1] + o[1]}, L);
  EXPECT_NEAR(out(0, 0), expect[0], 1e-12);
  EXPECT_NEAR(out(0, 1), expect[1], 1e-12);
}

TEST(SelfAttentionBlock, RowsSumToOneAndPadsGetZero) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 3);
  widen(p, 10);
  Trace<double> tr;
  Pass<double> pass;
  pass.trace = &tr;
  SentenceMemory<double> mem(2);
  auto st = sent({20, 21});  // [BOS 20 21 PAD PAD PAD EOS]
  forward_sentence_step(p, st, mem, c, pass);
  ASSERT_FALSE(tr.attention.empty());
  for (const auto& w : tr.attention) {
    ASSERT_EQ(w.cols(), st.length());
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < w.cols(); ++j) {
        s += w(i, j);
        if (!st.valid[j] || j > i) {
          EXPECT_EQ(w(i, j), 0.0);
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(CrossAttentionBlock, EmptyMemoryIsFeedForwardOnly) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 3);
  widen(p, 10);
  std::mt19937_64 rng(1);
  auto H = tg::testing::random_param(7, 8, rng);
  auto out = cross_attention_block(H, MemoryKV<double>{}, p.layers[1], c);
  for (std::size_t i = 0; i < 7; ++i) {
    auto expect = ref_ffn(row(H, i), p.layers[1]);
    EXPECT_LT(max_abs_diff(row(out, i), expect), 1e-12);
  }
}

TEST(CrossAttentionBlock, EqualEntriesGiveQueryIndependentIncrement) {
  auto c = tiny(Variant::tg);
  c.d_model = 4;
  c.n_heads = 2;
  auto p = init_params<double>(c, 6);
  widen(p, 20);
  jitter(p, 7);
  const auto& L = p.layers[1];
  std::vector<double> mbar = {0.3, -0.2, 1.1, 0.4};
  SentenceMemory<double> mem(3);
  for (int i = 0; i < 3; ++i) mem.push(VarD::constant(1, 4, mbar));
  auto kv = build_memory_kv(mem, 4);
  std::mt19937_64 rng(2);
  auto H = tg::testing::random_param(5, 4, rng);
  auto inc = detail::cross_increment(detail::apply(H, L.cross_norm), L.cross_attn, kv, c.n_heads, Pass<double>{});
  auto v = ref_affine(mbar, L.cross_attn.v.w, &L.cross_attn.v.b);
  auto expect = ref_affine(v, L.cross_attn.o.w, &L.cross_attn.o.b);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_LT(max_abs_diff(row(inc, i), expect), 1e-12);
}

TEST(CrossAttentionBlock, ZeroGateSuppressesIncrement) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 3);
  widen(p, 10);
  p.layers[1].gate.mutable_value()[0] = 0.0;
  SentenceMemory<double> mem(2);
  mem.push(VarD::constant(1, 8, 0.9));
  std::mt19937_64 rng(5);
  auto H = tg::testing::random_param(7, 8, rng);
  auto out = cross_attention_block(H, build_memory_kv(mem, 8), p.layers[1], c);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_LT(max_abs_diff(row(out, i), ref_ffn(row(H, i), p.layers[1])), 1e-12) << i;
}

TEST(ExtractSentenceVector, IdentityHeadReturnsLastRow) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 3);
  auto w = p.sent_head.mutable_value();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 8; ++i) w[i * 8 + i] = 1.0;
  std::mt19937_64 rng(3);
  auto H = tg::testing::random_param(7, 8, rng);
  auto m = extract_sentence_vector(H, p, c);
  EXPECT_EQ(row(m, 0), row(H, 6));
}

TEST(ExtractSentenceVector, TwoByTwoHandProduct) {
  auto c = tiny(Variant::tg);
  c.d_model = 2;
  c.n_heads = 1;
  auto p = init_params<double>(c, 3);
  auto w = p.sent_head.mutable_value();
  w[0] = 1, w[1] = 2, w[2] = 3, w[3] = 4;  // [[1,2],[3,4]]
  auto H = VarD::constant(2, 2, {9, 9, 5, -1});
  auto m = extract_sentence_vector(H, p, c);
  // [5,-1]·[[1,2],[3,4]] = [5−3, 10−4]
  EXPECT_EQ(m(0, 0), 2.0);
  EXPECT_EQ(m(0, 1), 6.0);
}

TEST(ExtractSentenceVector, SeededDropoutIsDeterministic) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 3);
  std::mt19937_64 rng(3);
  auto H = tg::testing::random_param(7, 8, rng);
  auto run = [&] {
    std::mt19937_64 r(42);
    Pass<double> pass;
    pass.training = true;
    pass.rates.sentence = 0.5;
    pass.rng = &r;
    return row(extract_sentence_vector(H, p, c, pass), 0);
  };
  EXPECT_EQ(run(), run());
  EXPECT_NE(run(), row(extract_sentence_vector(H, p, c), 0));
}

// ---------------------------------------------------------------------------
// Sentence steps

TEST(ForwardSentenceStep, ResetForgetsEarlierContent) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 4);
  widen(p, 10);
  SentenceMemory<double> fresh(2), used(2);
  forward_sentence_step(p, sent({30, 31, 32}), used, c);
  used.reset();
  auto a = forward_sentence_step(p, sent({40}), fresh, c);
  auto b = forward_sentence_step(p, sent({40}), used, c);
  EXPECT_EQ(vec(a.logits.value()), vec(b.logits.value()));
}

TEST(ForwardSentenceStep, SharedAndRebuiltMemoryKeysAgree) {
  for (auto v : {Variant::tg, Variant::tg_self_then_cross, Variant::tg_parallel, Variant::tg_incontext}) {
    auto c = tiny(v);
    c.n_layers = 4;
    c.sentence_layer = 3;
    auto p = init_params<double>(c, 4);
    widen(p, 10);
    auto c2 = c;
    c2.share_memory_kv = false;
    SentenceMemory<double> m1(2), m2(2);
    for (auto lex : {std::vector<std::uint32_t>{10, 11}, {12}, {13, 14, 15}, {16}}) {
      auto a = forward_sentence_step(p, sent(lex), m1, c);
      auto b = forward_sentence_step(p, sent(lex), m2, c2);
      EXPECT_LE(max_abs_diff(a.logits.value(), b.logits.value()), 1e-12) << variant_name(v);
    }
  }
}

TEST(ForwardSentenceStep, ZeroGatesEqualMemorylessTwin) {
  auto c = tiny(Variant::tg);
  c.n_layers = 4;
  c.sentence_layer = 3;
  auto p = init_params<double>(c, 12);
  widen(p, 10);
  for (auto& L : p.layers)
    if (L.gate.valid()) L.gate.mutable_value()[0] = 0.0;
  SentenceMemory<double> mem(2), twin_mem(2);
  for (auto lex : {std::vector<std::uint32_t>{10, 11}, {12}, {13, 14, 15}}) {
    auto st = sent(lex);
    auto got = forward_sentence_step(p, st, mem, c);
    // Twin: same seeding, cross layers reduced to their feed-forward.
    auto h = embed_and_seed(st, twin_mem, p, c);
    auto bias = causal_bias<double>(st.valid);
    VarD m;
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
      const auto& L = p.layers[li];
      h = L.kind == LayerKind::self ? self_attention_block<double>(h, L, bias, c) : detail::feed_forward(h, L);
      if (li + 1 == c.sentence_layer) m = extract_sentence_vector(h, p, c);
    }
    twin_mem.push(m);
    auto logits = ad::matmul_nt(detail::apply(h, p.final_norm), p.tok_emb);
    EXPECT_EQ(vec(got.logits.value()), vec(logits.value()));
  }
}

TEST(ForwardSentenceStep, CausalWithinSentenceAndForwardAcrossSentences) {
  auto c = tiny(Variant::tg);
  c.max_sentence_tokens = 6;
  auto p = init_params<double>(c, 13);
  widen(p, 10);
  auto run = [&](std::uint32_t tok) {
    SentenceMemory<double> mem(2);
    auto a = forward_sentence_step(p, sent({10, 11, tok, 13}, 6), mem, c);
    auto b = forward_sentence_step(p, sent({14, 15}, 6), mem, c);
    return std::pair{a.logits, b.logits};
  };
  auto [a1, b1] = run(12);
  auto [a2, b2] = run(99);  // token at position 3
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(row(a1, i), row(a2, i)) << i;
  EXPECT_GT(max_abs_diff(row(a1, 3), row(a2, 3)), 0.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(max_abs_diff(row(b1, i), row(b2, i)), 0.0) << i;
}

TEST(ForwardSentenceStep, InContextWithoutMemoryMatchesPlainSelfStack) {
  auto c = tiny(Variant::tg_incontext);
  auto p = init_params<double>(c, 14);
  widen(p, 10);
  SentenceMemory<double> mem(2);
  auto st = sent({10, 11, 12});
  auto got = forward_sentence_step(p, st, mem, c);
  auto h = embed_and_seed(st, SentenceMemory<double>(2), p, c);
  auto bias = causal_bias<double>(st.valid);
  for (const auto& L : p.layers) h = self_attention_block<double>(h, L, bias, c);
  auto logits = ad::matmul_nt(detail::apply(h, p.final_norm), p.tok_emb);
  EXPECT_EQ(vec(got.logits.value()), vec(logits.value()));
}

TEST(ForwardSentenceStep, InContextPrefixShapesAndGradientFlow) {
  auto c = tiny(Variant::tg_incontext);
  auto p = init_params<double>(c, 15);
  widen(p, 10);
  Trace<double> tr;
  Pass<double> pass;
  SentenceMemory<double> mem(2);
  forward_sentence_step(p, sent({10}), mem, c);
  forward_sentence_step(p, sent({11}), mem, c);
  pass.trace = &tr;
  auto out = forward_sentence_step(p, sent({12, 13}), mem, c, pass);
  EXPECT_EQ(out.logits.rows(), 7u);
  EXPECT_EQ(out.logits.cols(), 264u);
  EXPECT_EQ(tr.attention[0].cols(), 2u + 7u);  // two prefix rows
  auto g = ad::backward(ad::sum(out.logits));
  auto ge = g.get(p.tok_emb);
  double n10 = 0;
  for (std::size_t j = 0; j < 8; ++j) n10 += std::abs(ge[10 * 8 + j]);
  EXPECT_GT(n10, 0.0);
}

// ---------------------------------------------------------------------------
// Streams and gradients

TEST(ForwardStream, SingleSentenceMatchesOneStep) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 16);
  widen(p, 10);
  auto st = sent({10, 11, 12}, 4, true);
  auto res = forward_stream(p, stream_of({st}), c, Pass<double>{}, 0.3);
  SentenceMemory<double> mem(2);
  auto step = forward_sentence_step(p, st, mem, c);
  auto lab = text::sentence_labels(st);
  std::vector<double> w;
  for (auto k : lab.kinds) w.push_back(label_weight(k, 0.3));
  auto loss = ad::weighted_cross_entropy(step.logits, std::span<const std::uint32_t>(lab.targets), std::span<const double>(w));
  EXPECT_NEAR(res.loss.item(), loss.item(), 1e-14);
  EXPECT_EQ(res.lexical_count, 3u);
  EXPECT_EQ(res.boundary_count, 2u);  // last lexical → EOD, EOD → EOS
  EXPECT_NEAR(res.weight, 3 + 2 * 0.3, 1e-15);
}

TEST(ForwardStream, EmptyStreamRejected) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 0);
  EXPECT_THROW(forward_stream(p, SentenceStream{}, c, Pass<double>{}, 1.0), std::invalid_argument);
}

TEST(ForwardStream, NoGradModeReportsSameLoss) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 16);
  widen(p, 10);
  auto s = stream_of({sent({10, 11}), sent({12}, 4, true)});
  auto a = forward_stream(p, s, c, Pass<double>{}, 0.5);
  double b = 0;
  {
    ad::NoGradGuard ng;
    auto r = forward_stream(p, s, c, Pass<double>{}, 0.5);
    EXPECT_FALSE(r.loss.requires_grad());
    b = r.loss.item();
  }
  EXPECT_NEAR(a.loss.item(), b, 1e-14);
}

TEST(ForwardStream, StreamsDoNotInteract) {
  auto c = tiny(Variant::tg);
  auto p = init_params<double>(c, 17);
  widen(p, 10);
  auto s1 = stream_of({sent({10, 11}), sent({12})});
  auto s2 = stream_of({sent({20}), sent({21, 22})});
  auto alone = forward_stream(p, s2, c, Pass<double>{}, 1.0).loss.item();
  forward_stream(p, s1, c, Pass<double>{}, 1.0);
  EXPECT_EQ(forward_stream(p, s2, c, Pass<double>{}, 1.0).loss.item(), alone);
}

namespace {

// Loss of the k-th sentence only, after running the earlier ones.  With
// `freeze_first`, sentence 1 runs without recording history.
VarD sentence_k_loss(const Params<double>& p, const ModelConfig& c, const std::vector<SentenceTensor>& ss, std::size_t k,
                     bool freeze_first = false) {
  SentenceMemory<double> mem(c.memory_capacity);
  VarD logits;
  for (std::size_t i = 0; i <= k; ++i) {
    std::optional<ad::NoGradGuard> guard;
    if (freeze_first && i == 0) guard.emplace();
    logits = forward_sentence_step(p, ss[i], mem, c).logits;
  }
  auto lab = text::sentence_labels(ss[k]);
  std::vector<double> w;
  for (auto kind : lab.kinds) w.push_back(label_weight(kind, 1.0));
  return ad::weighted_cross_entropy(logits, std::span<const std::uint32_t>(lab.targets), std::span<const double>(w));
}

}  // namespace

TEST(ForwardStream, SentenceTwoLossReachesSentenceHeadOnlyWithoutDetach) {
  const std::vector<SentenceTensor> ss = {sent({10, 11, 12}), sent({13, 14})};
  for (auto v : {Variant::tg, Variant::tg_detach}) {
    auto c = tiny(v);
    auto p = init_params<double>(c, 18);
    widen(p, 10);
    auto loss = [&] { return sentence_k_loss(p, c, ss, 1); };
    auto analytic = ad::backward(loss()).get(p.sent_head);
    auto numeric = numeric_grad(p.sent_head, [&] { return loss().item(); });
    double norm = 0;
    for (double g : analytic) norm += std::abs(g);
    if (v == Variant::tg) {
      EXPECT_GT(norm, 1e-6);
      EXPECT_LT(rel_error(analytic, numeric), 1e-6);
    } else {
      EXPECT_EQ(norm, 0.0);
    }
  }
}

TEST(ForwardStream, MemoryChainReachesFirstSentenceAtCapacityOne) {
  // Token 50 appears only in sentence 1.  The embedding table is also the
  // output head, so the sentence-1 share of its gradient is isolated by
  // subtracting a run where sentence 1 records no history.
  const std::vector<SentenceTensor> ss = {sent({50, 51}), sent({13, 14}), sent({15, 16})};
  for (auto v : {Variant::tg, Variant::tg_detach}) {
    auto c = tiny(v);
    c.memory_capacity = 1;
    auto p = init_params<double>(c, 19);
    widen(p, 10);
    auto loss = [&] { return sentence_k_loss(p, c, ss, 2); };
    auto full = ad::backward(loss()).get(p.tok_emb);
    auto frozen = ad::backward(sentence_k_loss(p, c, ss, 2, true)).get(p.tok_emb);
    double chain = 0;
    for (std::size_t j = 50 * 8; j < 51 * 8; ++j) chain += std::abs(full[j] - frozen[j]);
    if (v == Variant::tg) {
      EXPECT_GT(chain, 1e-8);
      // The full row gradient still matches central differences.
      auto vals = p.tok_emb.mutable_value();
      std::vector<double> num(8), ana(full.begin() + 50 * 8, full.begin() + 51 * 8);
      for (std::size_t j = 0; j < 8; ++j) {
        const double orig = vals[50 * 8 + j], h = 1e-5;
        vals[50 * 8 + j] = orig + h;
        const double up = loss().item();
        vals[50 * 8 + j] = orig - h;
        const double dn = loss().item();
        vals[50 * 8 + j] = orig;
        num[j] = (up - dn) / (2 * h);
      }
      EXPECT_LT(rel_error(ana, num), 1e-5);
    } else {
      EXPECT_EQ(chain, 0.0);
    }
  }
}

TEST(ForwardStream, FullGradientMatchesFiniteDifferences) {
  for (auto v : {Variant::tg, Variant::tg_self_then_cross, Variant::tg_parallel, Variant::tg_incontext,
                 Variant::tg_last_layer, Variant::tg_no_seed, Variant::gpt2_gist, Variant::gpt2}) {
    auto c = tiny(v);
    c.vocab_size = 262;
    c.sentence_head_depth = 2;
    auto p = init_params<double>(c, 20);
    widen(p, 10);
    jitter(p, 21);
    auto s = stream_of({sent({10, 11, 12}), sent({13}), sent({14, 15}, 4, true)});
    std::vector<VarD> leaves;
    // Key biases shift every score in a row equally, so their true gradient
    // is zero and only rounding noise is left to compare.
    for (const auto& [n, var] : p.named)
      if (n != "tok_emb" && !n.ends_with(".k.b")) leaves.push_back(var);
    const double err = max_grad_error(leaves, [&] { return forward_stream(p, s, c, Pass<double>{}, 0.4).loss; });
    EXPECT_LT(err, 1e-5) << variant_name(v);
  }
}

// ---------------------------------------------------------------------------
// Decoder baselines

TEST(Decoder, SingleTokenHandTrace) {
  auto c = tiny(Variant::gpt2);
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  auto p = init_params<double>(c, 22);
  widen(p, 20);
  jitter(p, 23);
  const std::uint32_t tok = 100;
  auto logits = forward_decoder_baseline<double>(p, std::vector<std::uint32_t>{tok}, c);
  const auto& L = p.layers[0];
  std::vector<double> h = {p.tok_emb(tok, 0) + p.pos_emb(0, 0), p.tok_emb(tok, 1) + p.pos_emb(0, 1)};
  auto n = ref_layer_norm(h, L.self_norm.gain.value(), L.self_norm.bias.value());
  auto o = ref_affine(ref_affine(n, L.self_attn.v.w, &L.self_attn.v.b), L.self_attn.o.w, &L.self_attn.o.b);
  h = ref_ffn({h[0] + o[0], h[1] + o[1]}, L);
  auto f = ref_layer_norm(h, p.final_norm.gain.value(), p.final_norm.bias.value());
  ASSERT_EQ(logits.cols(), c.vocab_size);
  for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(logits(0, v), f[0] * p.tok_emb(v, 0) + f[1] * p.tok_emb(v, 1), 1e-12);
}

TEST(Decoder, Causal) {
  auto c = tiny(Variant::gpt2);
  auto p = init_params<double>(c, 24);
  widen(p, 10);
  std::vector<std::uint32_t> a = {10, 11, 12, 13, 14, 15}, b = a;
  b[4] = 77;
  auto la = forward_decoder_baseline<double>(p, a, c), lb = forward_decoder_baseline<double>(p, b, c);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(row(la, i), row(lb, i));
  EXPECT_GT(max_abs_diff(row(la, 4), row(lb, 4)), 0.0);
}

TEST(Decoder, OverLengthRejected) {
  auto c = tiny(Variant::gpt2);
  auto p = init_params<double>(c, 0);
  std::vector<std::uint32_t> ids(33, 10);
  EXPECT_THROW(forward_decoder_baseline<double>(p, ids, c), std::invalid_argument);
}

TEST(Decoder, FlattenedStreams) {
  auto s = stream_of({sent({10, 11}), sent({12}, 4, true)});
  auto plain = flatten_stream(s, Variant::gpt2);
  EXPECT_EQ(plain.ids, (std::vector<std::uint32_t>{10, 11, 12}));
  auto bnd = flatten_stream(s, Variant::gpt2_boundary);
  EXPECT_EQ(bnd.ids, (std::vector<std::uint32_t>{kBos, 10, 11, kEos, kBos, 12, kEos}));
  for (auto id : bnd.ids) EXPECT_NE(id, kPad);
  EXPECT_EQ(bnd.is_eos, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 1}));
}

TEST(Decoder, LongStreamsAreChunkedByContext) {
  auto c = tiny(Variant::gpt2);
  c.context = 4;
  auto p = init_params<double>(c, 25);
  std::vector<SentenceTensor> ss;
  for (std::uint32_t i = 0; i < 5; ++i) ss.push_back(sent({10 + i, 20 + i}));
  auto r = forward_stream(p, stream_of(ss), c, Pass<double>{}, 1.0);
  // 10 tokens in chunks of 4,4,2 → 3+3+1 labels.
  EXPECT_EQ(r.lexical_count, 7u);
}

TEST(GistMask, OneSentenceIsCausal) {
  std::vector<std::uint32_t> sid(4, 0);
  std::vector<std::uint8_t> eos = {0, 0, 0, 1};
  auto b = gist_mask<double>(sid, eos);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(b[i * 4 + j] == 0, j <= i);
}

TEST(GistMask, TwoSentencesCellByCell) {
  std::vector<std::uint32_t> sid = {0, 0, 0, 1, 1, 1};
  std::vector<std::uint8_t> eos = {0, 0, 1, 0, 0, 1};
  auto b = gist_mask<double>(sid, eos);
  const int allowed[6][6] = {{1, 0, 0, 0, 0, 0}, {1, 1, 0, 0, 0, 0}, {1, 1, 1, 0, 0, 0},
                             {0, 0, 1, 1, 0, 0}, {0, 0, 1, 1, 1, 0}, {0, 0, 1, 1, 1, 1}};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(b[i * 6 + j] == 0, allowed[i][j] == 1) << i << "," << j;
}

TEST(GistMask, RandomLayoutsMatchBruteForceAndStayCausal) {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint32_t> sid;
    std::vector<std::uint8_t> eos;
    const int ns = 1 + rng() % 5;
    for (int s = 0; s < ns; ++s) {
      const int len = 1 + rng() % 4;
      for (int k = 0; k < len; ++k) {
        sid.push_back(s);
        eos.push_back(k == len - 1);
      }
    }
    const std::size_t n = sid.size();
    auto b = gist_mask<double>(sid, eos);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        bool ok = false;
        if (j <= i) {
          // Last position of sentence sid[j] equals j and that sentence precedes i's.
          const bool last_of_its_sentence = (j + 1 == n) || sid[j + 1] != sid[j];
          ok = sid[j] == sid[i] || (last_of_its_sentence && sid[j] < sid[i]);
        }
        EXPECT_EQ(b[i * n + j] == 0, ok);
      }
  }
}

// ---------------------------------------------------------------------------
// Fixed spans

TEST(RespanFixed, SixtyTokensInSpansOfTwentyFive) {
  std::vector<std::uint32_t> toks(60);
  for (std::size_t i = 0; i < 60; ++i) toks[i] = 10 + i;
  auto spans = respan_fixed(toks, 25);
  ASSERT_EQ(spans.size(), 3u);
  EXPECT_EQ(spans[0].n_lex, 25u);
  EXPECT_EQ(spans[1].n_lex, 25u);
  EXPECT_EQ(spans[2].n_lex, 10u);
  EXPECT_TRUE(spans[2].is_final);
  EXPECT_FALSE(spans[0].is_final);
  std::vector<std::uint32_t> back;
  for (const auto& s : spans) {
    EXPECT_EQ(s.length(), 28u);
    back.insert(back.end(), s.lexical().begin(), s.lexical().end());
  }
  EXPECT_EQ(back, toks);
}

TEST(RespanFixed, LongSpansWidenTheTensor) {
  auto c = tiny(Variant::tg_fixed_span);
  c.span = 75;
  EXPECT_EQ(c.tensor_length(), 78u);
  auto p = init_params<double>(c, 1);
  EXPECT_EQ(p.pos_emb.rows(), 78u);
  std::vector<std::uint32_t> toks(80, 10);
  auto ss = respan_fixed(toks, 75);
  SentenceMemory<double> mem(2);
  auto out = forward_sentence_step(p, ss[0], mem, c);
  EXPECT_EQ(out.logits.rows(), 78u);
}

TEST(RespanFixed, StreamsConserveTokensPerDocument) {
  std::vector<SentenceStream> in(3);
  in[0].doc_id = 0;
  in[0].sentences = {sent({10, 11, 12}), sent({13})};
  in[1].doc_id = 0;
  in[1].sentences = {sent({14, 15}, 4, true)};
  in[2].doc_id = 1;
  in[2].sentences = {sent({20, 21, 22, 23}, 4, true)};
  auto out = respan_streams(in, 3, 2);
  std::vector<std::uint32_t> doc0;
  for (const auto& s : out)
    if (s.doc_id == 0)
      for (const auto& t : s.sentences) doc0.insert(doc0.end(), t.lexical().begin(), t.lexical().end());
  EXPECT_EQ(doc0, (std::vector<std::uint32_t>{10, 11, 12, 13, 14, 15}));
  for (const auto& s : out) EXPECT_LE(s.sentences.size(), 2u);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripsConfigAndValues) {
  auto c = tiny(Variant::tg_parallel);
  auto p = init_params<float>(c, 30);
  Checkpoint ck{c, false, param_arrays(p)};
  const auto path = (std::filesystem::temp_directory_path() / "tg_model_test.ckpt").string();
  write_checkpoint(path, ck);
  auto back = read_checkpoint(path);
  EXPECT_EQ(to_text(back.config), to_text(c));
  auto q = params_from_checkpoint<float>(back);
  for (std::size_t i = 0; i < p.named.size(); ++i)
    EXPECT_TRUE(std::equal(p.named[i].second.value().begin(), p.named[i].second.value().end(), q.named[i].second.value().begin()));
  // Header bytes.
  std::ifstream f(path, std::ios::binary);
  char magic[5] = {};
  f.read(magic, 4);
  EXPECT_STREQ(magic, "TGCK");
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(read_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}
