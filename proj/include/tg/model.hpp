#pragma once

// Sentence-recurrent transformer, its ablations and the flat decoder
// baselines, all behind one ModelConfig.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "tg/autodiff.hpp"
#include "tg/common.hpp"
#include "tg/textpipe.hpp"

namespace tg::model {

using ad::Var;
using text::SentenceStream;
using text::SentenceTensor;

enum class Variant {
  tg,
  gpt2,
  gpt2_boundary,
  tg_fixed_span,
  gpt2_gist,
  tg_detach,
  tg_incontext,
  tg_self_then_cross,
  tg_parallel,
  tg_last_layer,
  tg_no_seed,
};

inline constexpr std::pair<Variant, std::string_view> kVariantNames[] = {
    {Variant::tg, "tg"},
    {Variant::gpt2, "gpt2"},
    {Variant::gpt2_boundary, "gpt2_boundary"},
    {Variant::tg_fixed_span, "tg_fixed_span"},
    {Variant::gpt2_gist, "gpt2_gist"},
    {Variant::tg_detach, "tg_detach"},
    {Variant::tg_incontext, "tg_incontext"},
    {Variant::tg_self_then_cross, "tg_self_then_cross"},
    {Variant::tg_parallel, "tg_parallel"},
    {Variant::tg_last_layer, "tg_last_layer"},
    {Variant::tg_no_seed, "tg_no_seed"},
};

inline std::string_view variant_name(Variant v) {
  for (const auto& [k, n] : kVariantNames)
    if (k == v) return n;
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (const auto& [k, n] : kVariantNames)
    if (n == s) return k;
  reject("unknown variant: " + std::string(s));
}

/// Flat token-level decoders (no sentence memory).
inline bool is_decoder(Variant v) { return v == Variant::gpt2 || v == Variant::gpt2_boundary || v == Variant::gpt2_gist; }

enum class LayerKind { self, cross, self_then_cross, parallel, self_with_prefix };

struct ModelConfig {
  Variant variant = Variant::tg;
  std::size_t vocab_size = 8192;
  std::size_t n_layers = 12;
  std::size_t d_model = 768;
  std::size_t n_heads = 12;
  std::size_t ffn_mult = 4;
  std::size_t max_sentence_tokens = 64;  // L
  std::size_t span = 25;                 // lexical tokens per step for tg_fixed_span
  std::size_t memory_capacity = 40;      // M
  std::size_t sentence_layer = 7;
  std::size_t sentence_head_depth = 1;
  std::size_t context = 1024;  // decoder window
  double dropout_token = 0.15;
  double dropout_sentence = 0.15;
  double dropout_attention = 0.2;
  double gate_init = 1.0;
  /// Build memory keys/values once per step (false rebuilds them in every
  /// cross layer; results are identical).
  bool share_memory_kv = true;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Lexical capacity of one sentence step.
  std::size_t step_lexical() const { return variant == Variant::tg_fixed_span ? span : max_sentence_tokens; }
  std::size_t tensor_length() const { return step_lexical() + 3; }
  std::size_t extraction_layer() const { return variant == Variant::tg_last_layer ? n_layers : sentence_layer; }
  bool seeds_bos() const { return !is_decoder(variant) && variant != Variant::tg_no_seed; }
  /// Rows of the learned position table.
  std::size_t position_rows() const { return is_decoder(variant) ? context : tensor_length(); }

  void validate() const {
    require(vocab_size >= kMinVocabSize, "config: vocab_size below the reserved + byte range");
    require(n_layers >= 1, "config: n_layers must be >= 1");
    require(n_heads >= 1 && d_model % n_heads == 0, "config: d_model must be divisible by n_heads");
    require(ffn_mult >= 1, "config: ffn_mult must be >= 1");
    require(max_sentence_tokens >= 1 && max_sentence_tokens <= 255, "config: max_sentence_tokens must be in [1,255]");
    require(span >= 1 && span <= 255, "config: span must be in [1,255]");
    require(sentence_head_depth >= 1, "config: sentence_head_depth must be >= 1");
    require(context >= 2, "config: context must be >= 2");
    for (double r : {dropout_token, dropout_sentence, dropout_attention})
      require(r >= 0 && r < 1, "config: dropout rates must be in [0,1)");
    if (!is_decoder(variant)) {
      require(memory_capacity >= 1, "config: memory_capacity must be >= 1");
      require(extraction_layer() >= 1 && extraction_layer() <= n_layers, "config: sentence_layer must be in [1, n_layers]");
    }
  }
};

inline std::vector<LayerKind> layer_schedule(const ModelConfig& c) {
  std::vector<LayerKind> out(c.n_layers, LayerKind::self);
  if (is_decoder(c.variant)) return out;
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    switch (c.variant) {
      case Variant::tg_self_then_cross: out[i] = LayerKind::self_then_cross; break;
      case Variant::tg_parallel: out[i] = LayerKind::parallel; break;
      case Variant::tg_incontext: out[i] = LayerKind::self_with_prefix; break;
      default: out[i] = (i % 2 == 0) ? LayerKind::self : LayerKind::cross;  // layer i+1 odd → self
    }
  }
  return out;
}

inline bool has_self(LayerKind k) { return k != LayerKind::cross; }
inline bool has_cross(LayerKind k) { return k == LayerKind::cross || k == LayerKind::self_then_cross || k == LayerKind::parallel; }

// ---------------------------------------------------------------------------
// Config text form (key = value lines)

inline std::string to_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "variant = " << variant_name(c.variant) << "\n"
    << "vocab_size = " << c.vocab_size << "\n"
    << "n_layers = " << c.n_layers << "\n"
    << "d_model = " << c.d_model << "\n"
    << "n_heads = " << c.n_heads << "\n"
    << "ffn_mult = " << c.ffn_mult << "\n"
    << "max_sentence_tokens = " << c.max_sentence_tokens << "\n"
    << "span = " << c.span << "\n"
    << "memory_capacity = " << c.memory_capacity << "\n"
    << "sentence_layer = " << c.sentence_layer << "\n"
    << "sentence_head_depth = " << c.sentence_head_depth << "\n"
    << "context = " << c.context << "\n"
    << "dropout_token = " << format_double(c.dropout_token) << "\n"
    << "dropout_sentence = " << format_double(c.dropout_sentence) << "\n"
    << "dropout_attention = " << format_double(c.dropout_attention) << "\n"
    << "gate_init = " << format_double(c.gate_init) << "\n"
    << "share_memory_kv = " << (c.share_memory_kv ? 1 : 0) << "\n";
  return o.str();
}

/// Assigns one key; returns false when the key is not a model key.
inline bool set_model_key(ModelConfig& c, std::string_view key, const std::string& v) {
  auto u = [&] {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
      x = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') reject("bad integer for " + std::string(key) + ": " + v);
    return static_cast<std::size_t>(x);
  };
  auto f = [&] {
    std::size_t pos = 0;
    double x = 0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty()) reject("bad number for " + std::string(key) + ": " + v);
    return x;
  };
  if (key == "variant") c.variant = parse_variant(v);
  else if (key == "vocab_size") c.vocab_size = u();
  else if (key == "n_layers") c.n_layers = u();
  else if (key == "d_model") c.d_model = u();
  else if (key == "n_heads") c.n_heads = u();
  else if (key == "ffn_mult") c.ffn_mult = u();
  else if (key == "max_sentence_tokens") c.max_sentence_tokens = u();
  else if (key == "span") c.span = u();
  else if (key == "memory_capacity") c.memory_capacity = u();
  else if (key == "sentence_layer") c.sentence_layer = u();
  else if (key == "sentence_head_depth") c.sentence_head_depth = u();
  else if (key == "context") c.context = u();
  else if (key == "dropout_token") c.dropout_token = f();
  else if (key == "dropout_sentence") c.dropout_sentence = f();
  else if (key == "dropout_attention") c.dropout_attention = f();
  else if (key == "gate_init") c.gate_init = f();
  else if (key == "share_memory_kv") c.share_memory_kv = u() != 0;
  else return false;
  return true;
}

/// Splits "key = value" text into pairs; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto t = text::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string_view::npos) reject("line " + std::to_string(lineno) + ": expected key = value");
    auto k = text::trim(t.substr(0, eq));
    auto v = text::trim(t.substr(eq + 1));
    if (k.empty()) reject("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::string(k), std::string(v));
  }
  return out;
}

inline ModelConfig model_config_from_text(std::string_view text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_kv_text(text))
    if (!set_model_key(c, k, v)) reject("unknown model config key: " + k);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct Linear {
  Var<T> w;  // in × out
  Var<T> b;  // 1 × out, may be absent
};

template <class T>
struct Norm {
  Var<T> gain;
  Var<T> bias;
};

template <class T>
struct Attention {
  Linear<T> q, k, v, o;
};

template <class T>
struct Layer {
  LayerKind kind = LayerKind::self;
  Norm<T> self_norm;
  Attention<T> self_attn;
  Norm<T> cross_norm;
  Attention<T> cross_attn;
  Var<T> gate;  // 1 × 1
  Norm<T> ffn_norm;
  Linear<T> ffn_in, ffn_out;
};

template <class T>
struct Params {
  Var<T> tok_emb;  // V × d, also the output head
  Var<T> pos_emb;  // position_rows × d
  std::vector<Layer<T>> layers;
  std::vector<Linear<T>> sent_mlp;  // hidden layers of a deeper sentence head
  Var<T> sent_head;                 // d × d
  Norm<T> final_norm;
  /// Every leaf in creation order; names are stable across runs.
  std::vector<std::pair<std::string, Var<T>>> named;

  const Var<T>& get(std::string_view name) const {
    for (const auto& [n, v] : named)
      if (n == name) return v;
    reject("no parameter named " + std::string(name));
  }
  std::vector<Var<T>> leaves() const {
    std::vector<Var<T>> out;
    for (const auto& [n, v] : named) out.push_back(v);
    return out;
  }
};

/// Norm parameters and gates are excluded from weight decay.
inline bool decays(std::string_view name) {
  return name.find("norm") == std::string_view::npos && name.find("gate") == std::string_view::npos &&
         !name.ends_with(".b");
}

template <class T>
Params<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Params<T> p;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.02);
  const std::size_t d = c.d_model;
  auto normal = [&](std::string name, std::size_t r, std::size_t cols) {
    std::vector<T> v(r * cols);
    for (auto& x : v) x = static_cast<T>(nd(rng));
    auto var = Var<T>::parameter(r, cols, std::move(v));
    p.named.emplace_back(std::move(name), var);
    return var;
  };
  auto filled = [&](std::string name, std::size_t r, std::size_t cols, T fill) {
    auto var = Var<T>::parameter(r, cols, std::vector<T>(r * cols, fill));
    p.named.emplace_back(std::move(name), var);
    return var;
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, bool bias) {
    Linear<T> l;
    l.w = normal(name + ".w", in, out);
    if (bias) l.b = filled(name + ".b", 1, out, T(0));
    return l;
  };
  auto norm = [&](const std::string& name) {
    return Norm<T>{filled(name + ".gain", 1, d, T(1)), filled(name + ".bias", 1, d, T(0))};
  };
  auto attention = [&](const std::string& name) {
    return Attention<T>{linear(name + ".q", d, d, true), linear(name + ".k", d, d, true),
                        linear(name + ".v", d, d, true), linear(name + ".o", d, d, true)};
  };

  p.tok_emb = normal("tok_emb", c.vocab_size, d);
  p.pos_emb = normal("pos_emb", c.position_rows(), d);
  const auto kinds = layer_schedule(c);
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const std::string pre = "layers." + std::to_string(i + 1);
    Layer<T> L;
    L.kind = kinds[i];
    if (has_self(L.kind)) {
      L.self_norm = norm(pre + ".self_norm");
      L.self_attn = attention(pre + ".self_attn");
    }
    if (has_cross(L.kind)) {
      if (L.kind != LayerKind::parallel) L.cross_norm = norm(pre + ".cross_norm");
      L.cross_attn = attention(pre + ".cross_attn");
      L.gate = filled(pre + ".gate", 1, 1, static_cast<T>(c.gate_init));
    }
    L.ffn_norm = norm(pre + ".ffn_norm");
    L.ffn_in = linear(pre + ".ffn_in", d, c.ffn_mult * d, true);
    L.ffn_out = linear(pre + ".ffn_out", c.ffn_mult * d, d, true);
    p.layers.push_back(std::move(L));
  }
  if (!is_decoder(c.variant)) {
    for (std::size_t i = 0; i + 1 < c.sentence_head_depth; ++i)
      p.sent_mlp.push_back(linear("sent_mlp." + std::to_string(i + 1), d, d, true));
    p.sent_head = normal("sent_head", d, d);
  }
  p.final_norm = norm("final_norm");
  return p;
}

/// Closed-form count of trainable values other than the token and position
/// tables.
inline std::uint64_t count_nonembedding_params(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = c.d_model, f = c.ffn_mult;
  const std::uint64_t norm = 2 * d, attn = 4 * d * d + 4 * d, ffn = 2 * f * d * d + f * d + d;
  std::uint64_t n = 0;
  for (auto k : layer_schedule(c)) {
    n += norm + ffn;
    switch (k) {
      case LayerKind::self:
      case LayerKind::self_with_prefix: n += norm + attn; break;
      case LayerKind::cross: n += norm + attn + 1; break;
      case LayerKind::self_then_cross: n += 2 * norm + 2 * attn + 1; break;
      case LayerKind::parallel: n += norm + 2 * attn + 1; break;
    }
  }
  if (!is_decoder(c.variant)) n += d * d + (c.sentence_head_depth - 1) * (d * d + d);
  return n + norm;
}

template <class T>
std::vector<std::pair<std::size_t, T>> gate_values(const Params<T>& p) {
  std::vector<std::pair<std::size_t, T>> out;
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    if (p.layers[i].gate.valid()) out.emplace_back(i + 1, p.layers[i].gate.item());
  return out;
}

// ---------------------------------------------------------------------------
// Sentence memory

template <class T>
class SentenceMemory {
 public:
  explicit SentenceMemory(std::size_t capacity) : capacity_(capacity) { require(capacity >= 1, "memory capacity must be >= 1"); }
  void push(Var<T> m) {
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(std::move(m));
  }
  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const Var<T>& newest() const { return entries_.back(); }
  const std::deque<Var<T>>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<Var<T>> entries_;
};

/// Standard sinusoid for a 1-based slot index.
template <class T>
std::vector<T> slot_encoding(std::size_t slot, std::size_t d) {
  std::vector<T> e(d);
  for (std::size_t i = 0; i < d; i += 2) {
    const double angle = static_cast<double>(slot) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
    e[i] = static_cast<T>(std::sin(angle));
    if (i + 1 < d) e[i + 1] = static_cast<T>(std::cos(angle));
  }
  return e;
}

template <class T>
struct MemoryKV {
  Var<T> keys;    // K × d
  Var<T> values;  // K × d
  std::size_t size() const { return values.valid() ? values.rows() : 0; }
};

template <class T>
MemoryKV<T> build_memory_kv(const SentenceMemory<T>& memory, std::size_t d) {
  if (memory.empty()) return {};
  std::vector<Var<T>> rows(memory.entries().begin(), memory.entries().end());
  const std::size_t K = rows.size();
  std::vector<T> pos;
  pos.reserve(K * d);
  for (std::size_t s = 1; s <= K; ++s) {
    auto e = slot_encoding<T>(s, d);
    pos.insert(pos.end(), e.begin(), e.end());
  }
  auto values = ad::concat_rows(rows);
  return {ad::add(values, Var<T>::constant(K, d, std::move(pos))), values};
}

// ---------------------------------------------------------------------------
// Forward pass

struct DropoutRates {
  double token = 0;
  double sentence = 0;
  double attention = 0;
};

/// Activations recorded for inspection.
template <class T>
struct Trace {
  Var<T> embedded;                  // stack input after seeding
  std::vector<Var<T>> layer_out;    // output of each layer
  std::vector<Var<T>> attention;    // softmax weights per head, evaluation order
  Var<T> sentence_vector;
};

template <class T>
struct Pass {
  bool training = false;
  DropoutRates rates;
  std::mt19937_64* rng = nullptr;
  Trace<T>* trace = nullptr;
};

template <class T>
Pass<T> eval_pass() {
  return {};
}

namespace detail {

inline constexpr double kNormEps = 1e-5;

template <class T>
Var<T> apply(const Var<T>& x, const Linear<T>& l) {
  auto y = ad::matmul(x, l.w);
  return l.b.valid() ? ad::add(y, l.b) : y;
}

template <class T>
Var<T> apply(const Var<T>& x, const Norm<T>& n) {
  return ad::layer_norm(x, n.gain, n.bias, static_cast<T>(kNormEps));
}

template <class T>
Var<T> drop(const Var<T>& x, double rate, const Pass<T>& pass) {
  if (!pass.training || rate <= 0) return x;
  require(pass.rng != nullptr, "training pass needs a random generator");
  return ad::dropout(x, rate, *pass.rng, true);
}

template <class T>
Var<T> multi_head(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, std::span<const T> bias,
                  const Pass<T>& pass) {
  const std::size_t d = q.cols(), dh = d / heads;
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    auto kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    auto vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    auto w = ad::row_softmax(ad::scale(ad::matmul_nt(qh, kh), s), bias);
    if (pass.trace) pass.trace->attention.push_back(w);
    outs.push_back(ad::matmul(drop(w, pass.rates.attention, pass), vh));
  }
  return heads == 1 ? outs[0] : ad::concat_cols(outs);
}

template <class T>
Var<T> self_increment(const Var<T>& hn, const Attention<T>& a, std::size_t heads, std::span<const T> bias,
                      const Pass<T>& pass, const MemoryKV<T>* prefix = nullptr) {
  auto q = apply(hn, a.q);
  auto k = apply(hn, a.k);
  auto v = apply(hn, a.v);
  if (prefix && prefix->size() > 0) {
    k = ad::concat_rows(std::vector<Var<T>>{apply(prefix->keys, a.k), k});
    v = ad::concat_rows(std::vector<Var<T>>{apply(prefix->values, a.v), v});
  }
  return apply(multi_head(q, k, v, heads, bias, pass), a.o);
}

template <class T>
Var<T> cross_increment(const Var<T>& hn, const Attention<T>& a, const MemoryKV<T>& kv, std::size_t heads,
                       const Pass<T>& pass) {
  auto q = apply(hn, a.q);
  auto k = apply(kv.keys, a.k);
  auto v = apply(kv.values, a.v);
  return apply(multi_head<T>(q, k, v, heads, {}, pass), a.o);
}

template <class T>
Var<T> feed_forward(const Var<T>& h, const Layer<T>& L) {
  auto x = apply(h, L.ffn_norm);
  return ad::add(h, apply(ad::gelu(apply(x, L.ffn_in)), L.ffn_out));
}

}  // namespace detail

/// Additive bias allowing j ≤ i among attendable positions.
template <class T>
std::vector<T> causal_bias(std::span<const std::uint8_t> valid, std::size_t prefix = 0) {
  const std::size_t n = valid.size(), w = prefix + n;
  std::vector<T> b(n * w, static_cast<T>(kMaskSentinel));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < prefix; ++j) b[i * w + j] = 0;
    for (std::size_t j = 0; j <= i; ++j)
      if (valid[j]) b[i * w + prefix + j] = 0;
  }
  return b;
}

/// X⁰ = E[ids] + P_tok, with row 0 replaced by the newest memory entry plus
/// P_tok[0] when the variant seeds and the memory is non-empty.
template <class T>
Var<T> embed_and_seed(const SentenceTensor& st, const SentenceMemory<T>& memory, const Params<T>& p,
                      const ModelConfig& c, const Pass<T>& pass = {}) {
  const std::size_t T_len = st.length();
  require(T_len == c.tensor_length(), "sentence length does not match the model's tensor length");
  auto emb = ad::gather_rows(p.tok_emb, std::span<const std::uint32_t>(st.ids));
  if (pass.training && pass.rates.token > 0) {
    require(pass.rng != nullptr, "training pass needs a random generator");
    std::bernoulli_distribution keep(1.0 - pass.rates.token);
    std::vector<T> f(T_len * c.d_model, T(1));
    for (std::size_t i = 1; i <= st.n_lex; ++i)
      if (!keep(*pass.rng)) std::fill(f.begin() + i * c.d_model, f.begin() + (i + 1) * c.d_model, T(0));
    emb = ad::mul_mask(emb, std::move(f));
  }
  auto x = ad::add(emb, p.pos_emb);
  if (c.seeds_bos() && !memory.empty()) {
    auto row0 = ad::add(memory.newest(), ad::slice_rows(p.pos_emb, 0, 1));
    x = ad::concat_rows(std::vector<Var<T>>{row0, ad::slice_rows(x, 1, T_len - 1)});
  }
  return x;
}

/// m = W_sent · dropout(H[T−1]) (after any hidden head layers).
template <class T>
Var<T> extract_sentence_vector(const Var<T>& H, const Params<T>& p, const ModelConfig& c, const Pass<T>& pass = {}) {
  (void)c;
  auto h = detail::drop(ad::slice_rows(H, H.rows() - 1, 1), pass.rates.sentence, pass);
  for (const auto& l : p.sent_mlp) h = detail::drop(ad::gelu(detail::apply(h, l)), pass.rates.sentence, pass);
  return ad::matmul(h, p.sent_head);
}

template <class T>
Var<T> self_attention_block(const Var<T>& H, const Layer<T>& L, std::span<const T> bias, const ModelConfig& c,
                            const Pass<T>& pass = {}) {
  auto h = ad::add(H, detail::self_increment(detail::apply(H, L.self_norm), L.self_attn, c.n_heads, bias, pass));
  return detail::feed_forward(h, L);
}

template <class T>
Var<T> cross_attention_block(const Var<T>& H, const MemoryKV<T>& kv, const Layer<T>& L, const ModelConfig& c,
                             const Pass<T>& pass = {}) {
  Var<T> h = H;
  if (kv.size() > 0)
    h = ad::add(h, ad::scale(detail::cross_increment(detail::apply(H, L.cross_norm), L.cross_attn, kv, c.n_heads, pass),
                             L.gate));
  return detail::feed_forward(h, L);
}

template <class T>
struct StepOutput {
  Var<T> logits;           // T × V
  Var<T> sentence_vector;  // 1 × d
};

/// One sentence step: predicts the sentence and writes its vector to memory.
template <class T>
StepOutput<T> forward_sentence_step(const Params<T>& p, const SentenceTensor& st, SentenceMemory<T>& memory,
                                    const ModelConfig& c, const Pass<T>& pass = {}) {
  require(!is_decoder(c.variant), "forward_sentence_step: decoder variants have no sentence steps");
  auto h = embed_and_seed(st, memory, p, c, pass);
  if (pass.trace) pass.trace->embedded = h;
  const std::size_t d = c.d_model;
  MemoryKV<T> shared;
  if (c.share_memory_kv) shared = build_memory_kv(memory, d);
  auto kv = [&]() { return c.share_memory_kv ? shared : build_memory_kv(memory, d); };

  const auto self_bias = causal_bias<T>(st.valid);
  std::vector<T> prefix_bias;
  if (c.variant == Variant::tg_incontext) prefix_bias = causal_bias<T>(st.valid, memory.size());

  Var<T> m;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    switch (L.kind) {
      case LayerKind::self: h = self_attention_block<T>(h, L, self_bias, c, pass); break;
      case LayerKind::cross: h = cross_attention_block(h, kv(), L, c, pass); break;
      case LayerKind::self_then_cross: {
        auto kvl = kv();
        h = ad::add(h, detail::self_increment<T>(detail::apply(h, L.self_norm), L.self_attn, c.n_heads, self_bias, pass));
        if (kvl.size() > 0)
          h = ad::add(h, ad::scale(detail::cross_increment(detail::apply(h, L.cross_norm), L.cross_attn, kvl, c.n_heads, pass),
                                   L.gate));
        h = detail::feed_forward(h, L);
        break;
      }
      case LayerKind::parallel: {
        auto kvl = kv();
        auto hn = detail::apply(h, L.self_norm);
        auto inc = detail::self_increment<T>(hn, L.self_attn, c.n_heads, self_bias, pass);
        if (kvl.size() > 0)
          inc = ad::add(inc, ad::scale(detail::cross_increment(hn, L.cross_attn, kvl, c.n_heads, pass), L.gate));
        h = detail::feed_forward(ad::add(h, inc), L);
        break;
      }
      case LayerKind::self_with_prefix: {
        auto kvl = kv();
        auto hn = detail::apply(h, L.self_norm);
        h = ad::add(h, detail::self_increment<T>(hn, L.self_attn, c.n_heads, prefix_bias, pass, &kvl));
        h = detail::feed_forward(h, L);
        break;
      }
    }
    if (pass.trace) pass.trace->layer_out.push_back(h);
    if (li + 1 == c.extraction_layer()) m = extract_sentence_vector(h, p, c, pass);
  }
  if (pass.trace) pass.trace->sentence_vector = m;
  auto logits = ad::matmul_nt(detail::apply(h, p.final_norm), p.tok_emb);
  memory.push(c.variant == Variant::tg_detach ? ad::detach(m) : m);
  return {logits, m};
}

// ---------------------------------------------------------------------------
// Decoder baselines

/// Flattened token sequence of a stream for the decoder baselines.
struct TokenStream {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> sentence;  // sentence index per position
  std::vector<std::uint8_t> is_eos;
};

/// gpt2 keeps lexical tokens only; gpt2_boundary and gpt2_gist keep BOS and
/// EOS around each sentence.  Pads and EOD never appear.
inline TokenStream flatten_stream(const SentenceStream& s, Variant v) {
  TokenStream out;
  const bool boundary = v != Variant::gpt2;
  for (std::size_t k = 0; k < s.sentences.size(); ++k) {
    const auto& st = s.sentences[k];
    auto push = [&](std::uint32_t id, bool eos) {
      out.ids.push_back(id);
      out.sentence.push_back(static_cast<std::uint32_t>(k));
      out.is_eos.push_back(eos ? 1 : 0);
    };
    if (boundary) push(kBos, false);
    for (auto id : st.lexical()) push(id, false);
    if (boundary) push(kEos, true);
  }
  return out;
}

/// bias[i][j] = 0 iff j ≤ i within the same sentence, or j is the EOS of an
/// earlier sentence.
template <class T>
std::vector<T> gist_mask(std::span<const std::uint32_t> sentence, std::span<const std::uint8_t> is_eos) {
  require(sentence.size() == is_eos.size(), "gist_mask: length mismatch");
  const std::size_t n = sentence.size();
  std::vector<T> b(n * n, static_cast<T>(kMaskSentinel));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      if (sentence[j] == sentence[i] || (is_eos[j] && sentence[j] < sentence[i])) b[i * n + j] = 0;
  return b;
}

/// Causal decoder logits (n × V).  `bias` replaces the plain causal mask.
template <class T>
Var<T> forward_decoder_baseline(const Params<T>& p, std::span<const std::uint32_t> ids, const ModelConfig& c,
                                const Pass<T>& pass = {}, std::span<const T> bias = {}) {
  const std::size_t n = ids.size();
  require(n >= 1, "decoder input is empty");
  require(n <= c.context, "decoder input longer than the context window");
  auto emb = ad::gather_rows(p.tok_emb, ids);
  if (pass.training && pass.rates.token > 0) {
    require(pass.rng != nullptr, "training pass needs a random generator");
    std::bernoulli_distribution keep(1.0 - pass.rates.token);
    std::vector<T> f(n * c.d_model, T(1));
    for (std::size_t i = 0; i < n; ++i)
      if (!is_special(ids[i]) && !keep(*pass.rng)) std::fill(f.begin() + i * c.d_model, f.begin() + (i + 1) * c.d_model, T(0));
    emb = ad::mul_mask(emb, std::move(f));
  }
  auto h = ad::add(emb, ad::slice_rows(p.pos_emb, 0, n));
  if (pass.trace) pass.trace->embedded = h;
  std::vector<T> own;
  if (bias.empty()) {
    own = causal_bias<T>(std::vector<std::uint8_t>(n, 1));
    bias = own;
  }
  require(bias.size() == n * n, "decoder bias has the wrong size");
  for (const auto& L : p.layers) {
    h = self_attention_block(h, L, bias, c, pass);
    if (pass.trace) pass.trace->layer_out.push_back(h);
  }
  return ad::matmul_nt(detail::apply(h, p.final_norm), p.tok_emb);
}

// ---------------------------------------------------------------------------
// Fixed spans

/// Cuts a document's lexical tokens into consecutive spans of N, each packaged
/// as one step tensor; the last span carries EOD.
inline std::vector<SentenceTensor> respan_fixed(std::span<const std::uint32_t> doc_tokens, std::size_t N) {
  require(N >= 1, "respan_fixed: span must be >= 1");
  std::vector<SentenceTensor> out;
  for (std::size_t i = 0; i < doc_tokens.size(); i += N) {
    const std::size_t n = std::min(N, doc_tokens.size() - i);
    out.push_back(text::make_sentence_tensor(doc_tokens.subspan(i, n), N, i + n == doc_tokens.size()));
  }
  return out;
}

/// Rebuilds streams (grouped by doc_id) as fixed spans of N tokens, S steps
/// per stream.
inline std::vector<SentenceStream> respan_streams(std::span<const SentenceStream> streams, std::size_t N,
                                                  std::size_t S) {
  std::vector<SentenceStream> out;
  std::size_t i = 0;
  while (i < streams.size()) {
    const auto id = streams[i].doc_id;
    const auto split = streams[i].split;
    std::vector<std::uint32_t> toks;
    for (; i < streams.size() && streams[i].doc_id == id; ++i)
      for (const auto& st : streams[i].sentences) toks.insert(toks.end(), st.lexical().begin(), st.lexical().end());
    auto spans = respan_fixed(toks, N);
    auto part = text::slice_streams(spans, S, id, split);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stream loss

/// Label weight per kind: lexical 1, boundary `eos_weight`, none 0.
inline double label_weight(text::LabelKind k, double eos_weight) {
  switch (k) {
    case text::LabelKind::lexical: return 1.0;
    case text::LabelKind::boundary: return eos_weight;
    default: return 0.0;
  }
}

/// Next-token labels of a flattened decoder chunk [begin, end).
inline text::SentenceLabels chunk_labels(const TokenStream& ts, std::size_t begin, std::size_t end) {
  text::SentenceLabels lab{std::vector<std::uint32_t>(end - begin, kPad),
                           std::vector<text::LabelKind>(end - begin, text::LabelKind::none)};
  for (std::size_t i = begin; i + 1 < end; ++i) {
    lab.targets[i - begin] = ts.ids[i + 1];
    lab.kinds[i - begin] = is_special(ts.ids[i + 1]) ? text::LabelKind::boundary : text::LabelKind::lexical;
  }
  return lab;
}

/// Sum of label weights the stream contributes to a loss denominator.
inline double stream_weight(const SentenceStream& s, const ModelConfig& c, double eos_weight) {
  double w = 0;
  auto add = [&](const text::SentenceLabels& lab) {
    for (auto k : lab.kinds) w += label_weight(k, eos_weight);
  };
  if (is_decoder(c.variant)) {
    const auto ts = flatten_stream(s, c.variant);
    for (std::size_t b = 0; b < ts.ids.size(); b += c.context) add(chunk_labels(ts, b, std::min(ts.ids.size(), b + c.context)));
  } else {
    for (const auto& st : s.sentences) add(text::sentence_labels(st));
  }
  return w;
}

template <class T>
struct StreamLoss {
  Var<T> loss;  // Σ w·nll / denom; a constant when no graph is recorded
  double weight = 0;
  double weighted_nll = 0;  // Σ w·nll
  double lexical_nll = 0;
  std::size_t lexical_count = 0;
  double boundary_nll = 0;
  std::size_t boundary_count = 0;
};

namespace detail {

template <class T>
void score_rows(const Var<T>& logits, const text::SentenceLabels& lab, double eos_weight, std::optional<T> denom,
                StreamLoss<T>& out, std::vector<Var<T>>& parts) {
  const std::size_t n = logits.rows(), V = logits.cols();
  std::vector<T> w(n);
  double ws = 0;
  auto x = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = static_cast<T>(label_weight(lab.kinds[i], eos_weight));
    ws += w[i];
    if (lab.kinds[i] == text::LabelKind::none) continue;
    const T* r = x.data() + i * V;
    const double mx = *std::max_element(r, r + V);
    double s = 0;
    for (std::size_t k = 0; k < V; ++k) s += std::exp(static_cast<double>(r[k]) - mx);
    const double nll = mx + std::log(s) - static_cast<double>(r[lab.targets[i]]);
    out.weighted_nll += static_cast<double>(w[i]) * nll;
    if (lab.kinds[i] == text::LabelKind::lexical) {
      out.lexical_nll += nll;
      ++out.lexical_count;
    } else {
      out.boundary_nll += nll;
      ++out.boundary_count;
    }
  }
  out.weight += ws;
  if (ws > 0 && ad::grad_mode && logits.requires_grad())
    parts.push_back(ad::weighted_cross_entropy(logits, std::span<const std::uint32_t>(lab.targets), std::span<const T>(w), denom));
}

}  // namespace detail

/// Runs a whole stream from a fresh memory.  The graph loss is divided by
/// `denom` (default: the stream's own weight) so per-stream graphs can share
/// one batch normalizer.
template <class T>
StreamLoss<T> forward_stream(const Params<T>& p, const SentenceStream& s, const ModelConfig& c, const Pass<T>& pass,
                             double eos_weight, std::optional<std::type_identity_t<T>> denom = std::nullopt) {
  require(!s.sentences.empty(), "forward_stream: empty stream");
  if (!denom) denom = static_cast<T>(stream_weight(s, c, eos_weight));
  StreamLoss<T> out;
  std::vector<Var<T>> parts;
  if (is_decoder(c.variant)) {
    const auto ts = flatten_stream(s, c.variant);
    for (std::size_t b = 0; b < ts.ids.size(); b += c.context) {
      const std::size_t e = std::min(ts.ids.size(), b + c.context);
      std::span<const std::uint32_t> ids(ts.ids.data() + b, e - b);
      Var<T> logits;
      if (c.variant == Variant::gpt2_gist) {
        auto bias = gist_mask<T>(std::span<const std::uint32_t>(ts.sentence).subspan(b, e - b),
                                 std::span<const std::uint8_t>(ts.is_eos).subspan(b, e - b));
        logits = forward_decoder_baseline<T>(p, ids, c, pass, bias);
      } else {
        logits = forward_decoder_baseline<T>(p, ids, c, pass);
      }
      detail::score_rows(logits, chunk_labels(ts, b, e), eos_weight, denom, out, parts);
    }
  } else {
    SentenceMemory<T> memory(c.memory_capacity);
    for (const auto& st : s.sentences) {
      auto step = forward_sentence_step(p, st, memory, c, pass);
      detail::score_rows(step.logits, text::sentence_labels(st), eos_weight, denom, out, parts);
    }
  }
  if (!parts.empty()) {
    out.loss = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out.loss = ad::add(out.loss, parts[i]);
  } else if (*denom > 0) {
    out.loss = Var<T>::constant(1, 1, static_cast<T>(out.weighted_nll / static_cast<double>(*denom)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  bool has_optimizer = false;
  std::vector<NamedArray> arrays;

  const NamedArray* find(std::string_view name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t u = 0;
  std::memcpy(&u, &f, 4);
  text::detail::put_le<std::uint32_t>(os, u);
}

inline float get_f32(std::istream& is) {
  std::uint32_t u = 0;
  if (!text::detail::get_le(is, u)) throw std::runtime_error("truncated checkpoint");
  float f = 0;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  using text::detail::put_le;
  f.write("TGCK", 4);
  put_le<std::uint32_t>(f, kCheckpointVersion);
  const auto cfg = to_text(ck.config);
  put_le<std::uint32_t>(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_le<std::uint8_t>(f, ck.has_optimizer ? 1 : 0);
  put_le<std::uint32_t>(f, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    put_le<std::uint32_t>(f, static_cast<std::uint32_t>(a.name.size()));
    f.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_le<std::uint32_t>(f, static_cast<std::uint32_t>(a.extents.size()));
    std::size_t n = 1;
    for (auto e : a.extents) {
      put_le<std::uint32_t>(f, e);
      n *= e;
    }
    require(n == a.values.size(), "checkpoint array " + a.name + ": extents do not match values");
    for (float v : a.values) detail::put_f32(f, v);
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
  using text::detail::get_le;
  char magic[4];
  if (!f.read(magic, 4) || std::string_view(magic, 4) != "TGCK") throw std::runtime_error("not a TGCK file: " + path);
  std::uint32_t version = 0, len = 0, count = 0;
  std::uint8_t opt = 0;
  get_le(f, version);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version in " + path);
  if (!get_le(f, len)) throw std::runtime_error("truncated checkpoint: " + path);
  std::string cfg(len, '\0');
  if (!f.read(cfg.data(), len)) throw std::runtime_error("truncated checkpoint: " + path);
  Checkpoint ck;
  ck.config = model_config_from_text(cfg);
  if (!get_le(f, opt) || !get_le(f, count)) throw std::runtime_error("truncated checkpoint: " + path);
  ck.has_optimizer = opt != 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    std::uint32_t nl = 0, rank = 0;
    if (!get_le(f, nl)) throw std::runtime_error("truncated checkpoint: " + path);
    a.name.resize(nl);
    if (!f.read(a.name.data(), nl) || !get_le(f, rank)) throw std::runtime_error("truncated checkpoint: " + path);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint32_t e = 0;
      if (!get_le(f, e)) throw std::runtime_error("truncated checkpoint: " + path);
      a.extents.push_back(e);
      n *= e;
    }
    a.values.resize(n);
    for (auto& v : a.values) v = detail::get_f32(f);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

template <class T>
std::vector<NamedArray> param_arrays(const Params<T>& p, std::string_view prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& [name, v] : p.named) {
    NamedArray a{std::string(prefix) + name, {static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())}, {}};
    a.values.assign(v.value().begin(), v.value().end());
    out.push_back(std::move(a));
  }
  return out;
}

/// Overwrites every parameter from the checkpoint; shapes must match.
template <class T>
void load_params(Params<T>& p, const Checkpoint& ck) {
  for (auto& [name, v] : p.named) {
    const auto* a = ck.find(name);
    if (!a) throw std::runtime_error("checkpoint lacks parameter " + name);
    if (a->extents != std::vector<std::uint32_t>{static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())})
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    auto dst = v.mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
  }
}

template <class T>
Params<T> params_from_checkpoint(const Checkpoint& ck) {
  auto p = init_params<T>(ck.config, 0);
  load_params(p, ck);
  return p;
}

}  // namespace tg::model
