#pragma once

// Lexical perplexity, the father/son reversal probe and power-law scaling
// fits.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tg/model.hpp"

namespace tg::eval {

using model::ModelConfig;
using model::Params;
using model::Variant;
using text::SentenceStream;

// ---------------------------------------------------------------------------
// Perplexity

/// Rejoins consecutive streams that share a doc_id into whole documents.
inline std::vector<SentenceStream> whole_documents(std::span<const SentenceStream> streams) {
  std::vector<SentenceStream> docs;
  for (const auto& s : streams) {
    if (docs.empty() || docs.back().doc_id != s.doc_id) {
      docs.push_back(s);
    } else {
      auto& d = docs.back().sentences;
      d.insert(d.end(), s.sentences.begin(), s.sentences.end());
    }
  }
  return docs;
}

/// Puts whole documents into the shape the variant consumes (fixed spans are
/// re-cut; everything else is unchanged).
inline std::vector<SentenceStream> documents_for(const ModelConfig& c, std::span<const SentenceStream> streams) {
  auto docs = whole_documents(streams);
  if (c.variant != Variant::tg_fixed_span) return docs;
  std::vector<SentenceStream> out;
  for (const auto& d : docs) {
    auto r = model::respan_streams(std::span<const SentenceStream>(&d, 1), c.span, SIZE_MAX);
    std::move(r.begin(), r.end(), std::back_inserter(out));
  }
  return out;
}

struct Perplexity {
  double ppl = 0;
  double mean_nll = 0;  // nats per lexical token
  std::size_t tokens = 0;
};

/// exp(mean NLL over lexical label positions).  Documents are never sliced
/// and each starts from an empty memory; dropout is off.
template <class T>
Perplexity eval_perplexity(const Params<T>& p, const ModelConfig& c, std::span<const SentenceStream> streams,
                           std::size_t threads = 1) {
  require(!streams.empty(), "eval_perplexity: no documents");
  const auto docs = documents_for(c, streams);
  std::vector<double> nll(docs.size(), 0.0);
  std::vector<std::size_t> count(docs.size(), 0);
  text::parallel_for(docs.size(), threads, [&](std::size_t i) {
    ad::NoGradGuard ng;
    auto r = model::forward_stream(p, docs[i], c, model::Pass<T>{}, 0.0, static_cast<T>(1));
    nll[i] = r.lexical_nll;
    count[i] = r.lexical_count;
  });
  Perplexity out;
  double total = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    total += nll[i];
    out.tokens += count[i];
  }
  require(out.tokens > 0, "eval_perplexity: no lexical labels");
  out.mean_nll = total / static_cast<double>(out.tokens);
  out.ppl = std::exp(out.mean_nll);
  return out;
}

// ---------------------------------------------------------------------------
// Reversal probe

/// Next-token logits after a context: all sentences but the last are
/// complete; the last is a prefix ending where the answer goes.
using NextTokenLogits = std::function<std::vector<double>(const std::vector<std::vector<std::uint32_t>>& sentences)>;

template <class T>
NextTokenLogits model_next_token(const Params<T>& p, const ModelConfig& c) {
  return [&p, c](const std::vector<std::vector<std::uint32_t>>& sentences) {
    require(!sentences.empty() && !sentences.back().empty(), "probe query is empty");
    ad::NoGradGuard ng;
    model::Var<T> logits;
    std::size_t row = 0;
    if (model::is_decoder(c.variant)) {
      SentenceStream s;
      for (const auto& lex : sentences) s.sentences.push_back(text::make_sentence_tensor(lex, std::max<std::size_t>(lex.size(), 1), false));
      auto ts = model::flatten_stream(s, c.variant);
      if (c.variant != Variant::gpt2) {
        // The query is a prefix, so it has no closing EOS.
        ts.ids.pop_back();
        ts.sentence.pop_back();
        ts.is_eos.pop_back();
      }
      require(ts.ids.size() <= c.context, "probe prompt longer than the context window");
      if (c.variant == Variant::gpt2_gist) {
        auto bias = model::gist_mask<T>(ts.sentence, ts.is_eos);
        logits = model::forward_decoder_baseline<T>(p, ts.ids, c, {}, bias);
      } else {
        logits = model::forward_decoder_baseline<T>(p, ts.ids, c);
      }
      row = ts.ids.size() - 1;
    } else {
      model::SentenceMemory<T> memory(c.memory_capacity);
      for (std::size_t i = 0; i < sentences.size(); ++i) {
        auto st = text::make_sentence_tensor(sentences[i], c.step_lexical(), false);
        auto step = model::forward_sentence_step(p, st, memory, c);
        if (i + 1 == sentences.size()) {
          logits = step.logits;
          row = st.n_lex;  // last lexical position
        }
      }
    }
    auto v = logits.value();
    return std::vector<double>(v.begin() + row * logits.cols(), v.begin() + (row + 1) * logits.cols());
  };
}

enum class ProbeCondition { normal, reversed };

inline std::string_view condition_name(ProbeCondition c) { return c == ProbeCondition::normal ? "normal" : "reversed"; }

struct ProbeResult {
  ProbeCondition condition = ProbeCondition::normal;
  double nll_target = 0;
  double nll_distractor = 0;
  double delta = 0;  // nll_distractor − nll_target
  double top1_rate = 0;
  std::size_t n = 0;
};

struct ProbeName {
  std::string name;
  std::uint32_t first_token = 0;  // first token of " name"
};

/// Keeps names whose answer-position token is a single lexical token not
/// shared with any earlier kept name.
inline std::vector<ProbeName> filter_names(std::span<const std::string> pool, const text::Vocab& vocab) {
  std::vector<ProbeName> out;
  for (const auto& n : pool) {
    if (n.empty()) continue;
    auto ids = vocab.encode(" " + n);
    if (ids.empty()) continue;
    const auto first = ids.front();
    if (std::none_of(out.begin(), out.end(), [&](const ProbeName& p) { return p.first_token == first; }))
      out.push_back({n, first});
  }
  return out;
}

inline std::vector<std::string> read_names(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read name list: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    auto t = text::trim(line);
    if (!t.empty() && t[0] != '#') out.emplace_back(t);
  }
  return out;
}

struct ProbeSample {
  std::string father, son;
};

/// n (father, son) pairs of distinct names, drawn deterministically.
inline std::vector<ProbeSample> probe_samples(std::span<const ProbeName> names, std::size_t n, std::uint64_t seed) {
  require(names.size() >= 2, "reversal probe: fewer than 2 usable names after filtering");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  std::vector<ProbeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    out.push_back({names[a].name, names[b].name});
  }
  return out;
}

namespace detail {

inline double nll_of(std::span<const double> logits, std::uint32_t tok) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double x : logits) s += std::exp(x - mx);
  return mx + std::log(s) - logits[tok];
}

}  // namespace detail

/// Context "The son of F is S." then the query prefix; NLLs are read at the
/// first answer position.
inline std::array<ProbeResult, 2> reversal_probe(const NextTokenLogits& next, const text::Vocab& vocab,
                                                 std::span<const std::string> name_pool, std::size_t n,
                                                 std::uint64_t seed) {
  require(n >= 1, "reversal probe: n must be >= 1");
  const auto names = filter_names(name_pool, vocab);
  const auto samples = probe_samples(names, n, seed);
  auto first_tok = [&](const std::string& name) { return vocab.encode(" " + name).front(); };
  std::array<ProbeResult, 2> res{};
  res[0].condition = ProbeCondition::normal;
  res[1].condition = ProbeCondition::reversed;
  for (const auto& s : samples) {
    const auto context = vocab.encode("The son of " + s.father + " is " + s.son + ".");
    for (auto& r : res) {
      const bool normal = r.condition == ProbeCondition::normal;
      const auto query = vocab.encode(normal ? "The son of " + s.father + " is" : "The father of " + s.son + " is");
      const auto target = first_tok(normal ? s.son : s.father);
      const auto distractor = first_tok(normal ? s.father : s.son);
      const auto logits = next({context, query});
      const double nt = detail::nll_of(logits, target), nd = detail::nll_of(logits, distractor);
      r.nll_target += nt;
      r.nll_distractor += nd;
      const auto best = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (best == target) r.top1_rate += 1;
    }
  }
  for (auto& r : res) {
    r.n = samples.size();
    r.nll_target /= r.n;
    r.nll_distractor /= r.n;
    r.top1_rate /= r.n;
    r.delta = r.nll_distractor - r.nll_target;
  }
  return res;
}

inline void write_probe_csv(std::ostream& os, std::span<const ProbeResult> results, std::string_view label = "") {
  os << "label,condition,n,nll_target,nll_distractor,delta,top1_rate\n";
  os.precision(10);
  for (const auto& r : results)
    os << label << ',' << condition_name(r.condition) << ',' << r.n << ',' << r.nll_target << ',' << r.nll_distractor
       << ',' << r.delta << ',' << r.top1_rate << '\n';
}

// ---------------------------------------------------------------------------
// Scaling fits

/// L(x) = (C / x)^alpha.
struct ScalingFit {
  double C = 0;
  double alpha = 0;
  double residual = 0;  // RMS error in ln L
  std::size_t points = 0;

  double loss_at(double x) const { return std::pow(C / x, alpha); }
  /// x at which the fitted law reaches loss L.
  double x_at(double loss) const { return C * std::pow(loss, -1.0 / alpha); }
};

/// Least squares of ln L on ln x.
inline ScalingFit fit_power_law(std::span<const std::pair<double, double>> pts) {
  require(pts.size() >= 2, "fit_power_law: need at least 2 points");
  double mu = 0, my = 0;
  for (const auto& [x, l] : pts) {
    require(x > 0 && l > 0 && std::isfinite(x) && std::isfinite(l), "fit_power_law: x and loss must be positive");
    mu += std::log(x);
    my += std::log(l);
  }
  mu /= pts.size();
  my /= pts.size();
  double suu = 0, suy = 0;
  for (const auto& [x, l] : pts) {
    const double u = std::log(x) - mu;
    suu += u * u;
    suy += u * (std::log(l) - my);
  }
  require(suu > 0, "fit_power_law: all x values are equal");
  const double slope = suy / suu, intercept = my - slope * mu;
  require(slope != 0, "fit_power_law: loss does not vary with x");
  ScalingFit f;
  f.alpha = -slope;
  f.C = std::exp(intercept / f.alpha);
  f.points = pts.size();
  double r2 = 0;
  for (const auto& [x, l] : pts) {
    const double e = std::log(l) - (intercept + slope * std::log(x));
    r2 += e * e;
  }
  f.residual = std::sqrt(r2 / pts.size());
  return f;
}

/// m(x) = x_ref(L_other(x)) / x.
inline std::vector<double> effective_multiplier(const ScalingFit& ref, std::span<const std::pair<double, double>> achieved) {
  require(ref.C > 0 && ref.alpha != 0, "effective_multiplier: invalid reference fit");
  std::vector<double> m;
  m.reserve(achieved.size());
  for (const auto& [x, l] : achieved) m.push_back(ref.x_at(l) / x);
  return m;
}

/// Same, with the other model's loss read off its own fitted curve.
inline std::vector<double> effective_multiplier(const ScalingFit& ref, const ScalingFit& other, std::span<const double> xs) {
  std::vector<std::pair<double, double>> pts;
  for (double x : xs) pts.emplace_back(x, other.loss_at(x));
  return effective_multiplier(ref, pts);
}

struct LinearTrend {
  double slope = 0;
  double intercept = 0;
};

/// Ordinary least squares y ≈ intercept + slope·x.
inline LinearTrend linear_trend(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "linear_trend: need at least 2 paired values");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  require(sxx > 0, "linear_trend: all x values are equal");
  return {sxy / sxx, my - sxy / sxx * mx};
}

/// Reads "x,loss" rows; a non-numeric first row is taken as a header.
inline std::vector<std::pair<double, double>> read_scaling_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read scaling CSV: " + path);
  std::vector<std::pair<double, double>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto t = text::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto comma = t.find(',');
    try {
      if (comma == std::string_view::npos) throw std::invalid_argument("no comma");
      std::size_t p1 = 0, p2 = 0;
      const std::string a(text::trim(t.substr(0, comma))), b(text::trim(t.substr(comma + 1)));
      const double x = std::stod(a, &p1), l = std::stod(b, &p2);
      if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument("trailing characters");
      out.emplace_back(x, l);
    } catch (const std::exception&) {
      if (lineno == 1 && out.empty()) continue;
      reject("scaling CSV line " + std::to_string(lineno) + ": expected x,loss");
    }
  }
  return out;
}

}  // namespace tg::eval
