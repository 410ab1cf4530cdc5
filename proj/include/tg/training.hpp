#pragma once

// AdamW with cosine warmup, EOS down-weighting, the stream-length
// curriculum, dropout warm-in and early stopping.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tg/eval.hpp"
#include "tg/model.hpp"

namespace tg::train {

using model::ModelConfig;
using model::Params;
using text::SentenceStream;

struct TrainConfig {
  double peak_lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_frac = 0.02;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  std::size_t epochs_max = 30;
  std::size_t S0 = 30;
  std::size_t S_step = 12;
  std::size_t S_every = 5;
  double eos_w_warm = 1.0;
  double eos_w_after = 0.05;
  std::size_t warmin_half = 2000;
  std::size_t warmin_full = 7000;
  double min_delta = 0.1;
  std::size_t patience = 3;
  std::size_t batch_budget = 8192;  // lexical tokens per batch
  std::size_t max_streams = 256;
  std::size_t bucket_width = 5;
  std::size_t max_steps = 0;  // 0: no step budget
  std::uint64_t seed = 1234;

  void validate() const {
    require(warmup_frac > 0 && warmup_frac < 1, "train config: warmup_frac must be in (0,1)");
    require(patience >= 1, "train config: patience must be >= 1");
    require(peak_lr > 0 && std::isfinite(peak_lr), "train config: peak_lr must be positive");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train config: betas must be in [0,1)");
    require(eps > 0 && weight_decay >= 0 && grad_clip >= 0, "train config: eps, weight_decay, grad_clip out of range");
    require(epochs_max >= 1 && S0 >= 1 && S_every >= 1, "train config: epochs_max, S0, S_every must be >= 1");
    require(warmin_half <= warmin_full, "train config: warmin_half must not exceed warmin_full");
    require(batch_budget >= 1 && max_streams >= 1 && bucket_width >= 1, "train config: batch limits must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Schedules

/// Linear 0 → peak over the first warmup_frac of steps, then cosine to 0.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& c) {
  require(total_steps >= 1 && step <= total_steps, "lr_at: step outside [0, total_steps]");
  const double warm = c.warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return c.peak_lr * s / warm;
  const double span = static_cast<double>(total_steps) - warm;
  if (span <= 0) return c.peak_lr;
  const double progress = (s - warm) / span;
  return 0.5 * c.peak_lr * (1.0 + std::cos(M_PI * progress));
}

inline double eos_weight(std::size_t epoch, const TrainConfig& c = {}) {
  require(epoch >= 1, "eos_weight: epochs count from 1");
  return epoch == 1 ? c.eos_w_warm : c.eos_w_after;
}

inline std::size_t curriculum_S(std::size_t epoch, const TrainConfig& c = {}) {
  require(epoch >= 1, "curriculum_S: epochs count from 1");
  return c.S0 + c.S_step * ((epoch - 1) / c.S_every);
}

inline double dropout_warmin(std::size_t sentence_step, const TrainConfig& c = {}) {
  if (sentence_step < c.warmin_half) return 0.0;
  if (sentence_step < c.warmin_full) return 0.5;
  return 1.0;
}

/// Dropout rates in force at a sentence step.  Token dropout is off for
/// models narrower than 96.
inline model::DropoutRates dropout_rates(const ModelConfig& m, std::size_t sentence_step, const TrainConfig& c) {
  const double k = dropout_warmin(sentence_step, c);
  return {m.d_model < 96 ? 0.0 : m.dropout_token * k, m.dropout_sentence * k, m.dropout_attention};
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // one pair per parameter, registry order
  std::uint64_t step = 0;
};

template <class T>
AdamState<T> make_adam_state(const Params<T>& p) {
  AdamState<T> s;
  for (const auto& [n, v] : p.named) {
    s.m.emplace_back(v.size(), T(0));
    s.v.emplace_back(v.size(), T(0));
  }
  return s;
}

/// One AdamW update of a single tensor (decoupled decay first).
template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                  double lr, double weight_decay, const TrainConfig& c) {
  require(param.size() == grad.size() && m.size() == param.size() && v.size() == param.size(),
          "adamw: gradient shape does not match parameter");
  require(step >= 1, "adamw: step counts from 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double p = param[i];
    p *= 1.0 - lr * weight_decay;
    const double g = grad[i];
    const double mi = c.beta1 * m[i] + (1 - c.beta1) * g;
    const double vi = c.beta2 * v[i] + (1 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    p -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    param[i] = static_cast<T>(p);
  }
}

/// Global L2 norm of all gradients; scales them down to `max_norm` when
/// larger.  Returns the norm before clipping.
template <class T>
double clip_grad_norm(const Params<T>& p, ad::Gradients<T>& g, double max_norm) {
  double sq = 0;
  for (const auto& [n, v] : p.named)
    if (auto* gv = g.find(v))
      for (T x : *gv) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& [n, v] : p.named)
      if (auto* gv = g.find(v))
        for (T& x : *gv) x *= f;
  }
  return norm;
}

/// AdamW over every parameter; missing gradients count as zero.  Gates, norm
/// parameters and biases are not decayed.
template <class T>
void adamw_step(Params<T>& p, ad::Gradients<T>& g, AdamState<T>& s, double lr, const TrainConfig& c) {
  require(s.m.size() == p.named.size(), "adamw: optimizer state does not match parameters");
  ++s.step;
  for (std::size_t i = 0; i < p.named.size(); ++i) {
    auto& [name, v] = p.named[i];
    auto* gv = g.find(v);
    std::vector<T> zeros;
    if (!gv) {
      zeros.assign(v.size(), T(0));
      gv = &zeros;
    }
    adamw_update<T>(v.mutable_value(), *gv, s.m[i], s.v[i], s.step, lr, model::decays(name) ? c.weight_decay : 0.0, c);
  }
}

// ---------------------------------------------------------------------------
// Early stopping

/// Stops after `patience` consecutive epochs without beating the best by
/// more than `min_delta`.
class EarlyStopper {
 public:
  EarlyStopper(double min_delta, std::size_t patience) : min_delta_(min_delta), patience_(patience) {}
  /// Records one validation value; true when training should stop.
  bool update(double ppl) {
    if (ppl < best_ - min_delta_) {
      best_ = ppl;
      bad_ = 0;
    } else {
      ++bad_;
    }
    return bad_ >= patience_;
  }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_; }

 private:
  double min_delta_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

// ---------------------------------------------------------------------------
// Batches

/// Training streams for the variant at stream length S.
inline std::vector<SentenceStream> training_streams(const ModelConfig& m, std::span<const SentenceStream> docs,
                                                    std::size_t S) {
  if (m.variant == model::Variant::tg_fixed_span) return model::respan_streams(docs, m.span, S);
  return text::reslice(docs, S);
}

inline std::size_t lexical_total(std::span<const SentenceStream> streams) {
  std::size_t n = 0;
  for (const auto& s : streams) n += s.lexical_tokens();
  return n;
}

template <class T>
struct BatchResult {
  double loss = 0;  // weighted CE per unit weight over the batch
  double lexical_nll = 0;
  std::size_t lexical_count = 0;
  std::size_t sentence_steps = 0;  // longest stream in the batch
  ad::Gradients<T> grads;
};

/// Loss and summed gradients of one batch.  Each stream gets its own graph and
/// dropout generator; all share the batch weight as denominator, so the sum
/// of stream losses is the batch loss.
template <class T>
BatchResult<T> batch_gradients(const Params<T>& p, const ModelConfig& m, std::span<const SentenceStream> streams,
                               std::span<const std::size_t> members, double eos_w, const model::DropoutRates& rates,
                               bool training, std::uint64_t dropout_seed) {
  BatchResult<T> out;
  double denom = 0;
  for (auto i : members) {
    denom += model::stream_weight(streams[i], m, eos_w);
    out.sentence_steps = std::max(out.sentence_steps, streams[i].sentences.size());
  }
  require(denom > 0, "batch has no weighted labels");
  for (std::size_t k = 0; k < members.size(); ++k) {
    std::mt19937_64 rng(mix64(dropout_seed ^ mix64(k + 1)));
    model::Pass<T> pass;
    pass.training = training;
    pass.rates = rates;
    pass.rng = &rng;
    auto r = model::forward_stream(p, streams[members[k]], m, pass, eos_w, static_cast<T>(denom));
    out.lexical_nll += r.lexical_nll;
    out.lexical_count += r.lexical_count;
    out.loss += r.weighted_nll / denom;
    if (r.loss.valid() && r.loss.requires_grad()) out.grads.accumulate(ad::backward(r.loss));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // optimizer steps so far
  std::size_t sentence_steps = 0;
  std::size_t S = 0;
  double eos_w = 0;
  double lr = 0;
  double train_loss = 0;  // mean batch loss over the epoch
  double valid_ppl = 0;
  double valid_nll = 0;
  std::size_t batches = 0;
};

struct TrainResult {
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::size_t sentence_steps = 0;
  bool early_stopped = false;
  bool budget_exhausted = false;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSinks {
  std::ostream* metrics = nullptr;  // epoch,step,sentence_step,split,loss_nats,ppl_lexical,lr,S,eos_w
  std::ostream* gates = nullptr;    // step,layer,gate_value
  std::string checkpoint_path;      // best checkpoint, written when non-empty
  std::size_t threads = 1;          // validation workers
  std::function<void(const EpochRecord&)> on_epoch;
};

inline void write_metrics_header(std::ostream& os) { os << "epoch,step,sentence_step,split,loss_nats,ppl_lexical,lr,S,eos_w\n"; }
inline void write_gate_header(std::ostream& os) { os << "step,layer,gate_value\n"; }

template <class T>
std::vector<model::NamedArray> optimizer_arrays(const Params<T>& p, const AdamState<T>& s) {
  std::vector<model::NamedArray> out;
  for (std::size_t i = 0; i < p.named.size(); ++i) {
    const auto& [name, v] = p.named[i];
    const std::vector<std::uint32_t> ext{static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())};
    out.push_back({"adam.m." + name, ext, std::vector<float>(s.m[i].begin(), s.m[i].end())});
    out.push_back({"adam.v." + name, ext, std::vector<float>(s.v[i].begin(), s.v[i].end())});
  }
  // Two 16-bit halves keep the counter exact in float32.
  out.push_back({"adam.step", {2}, {static_cast<float>(s.step & 0xffff), static_cast<float>((s.step >> 16) & 0xffff)}});
  return out;
}

/// Trains `p` in place and leaves it at the best validation checkpoint.
template <class T>
TrainResult train(Params<T>& p, const ModelConfig& m, const TrainConfig& c, std::span<const SentenceStream> train_docs,
                  std::span<const SentenceStream> valid_docs, const TrainSinks& sinks = {}) {
  m.validate();
  c.validate();
  require(!train_docs.empty() && !valid_docs.empty(), "train: empty training or validation split");
  TrainResult res;
  auto state = make_adam_state(p);
  EarlyStopper stopper(c.min_delta, c.patience);
  std::vector<std::vector<T>> best;

  auto plan_for = [&](const std::vector<SentenceStream>& streams, std::size_t epoch) {
    std::mt19937_64 rng(mix64(sub_seed(c.seed, "batch") ^ mix64(epoch)));
    auto plan = text::build_batches(std::span<const SentenceStream>(streams), c.batch_budget, c.max_streams, c.bucket_width, rng);
    std::shuffle(plan.batches.begin(), plan.batches.end(), rng);
    return plan;
  };

  std::size_t S = curriculum_S(1, c);
  auto streams = training_streams(m, train_docs, S);
  std::size_t total_steps = c.epochs_max * plan_for(streams, 1).batches.size();
  if (c.max_steps > 0) total_steps = std::min(total_steps, c.max_steps);
  total_steps = std::max<std::size_t>(total_steps, 1);
  const std::uint64_t dropout_seed = sub_seed(c.seed, "dropout");

  for (std::size_t epoch = 1; epoch <= c.epochs_max; ++epoch) {
    const std::size_t S_now = curriculum_S(epoch, c);
    if (S_now != S) {
      S = S_now;
      streams = training_streams(m, train_docs, S);
    }
    const double eos_w = eos_weight(epoch, c);
    const auto plan = plan_for(streams, epoch);
    EpochRecord rec{epoch, 0, 0, S, eos_w, 0, 0, 0, 0, 0};
    double loss_sum = 0;
    for (const auto& members : plan.batches) {
      if (c.max_steps > 0 && res.steps >= c.max_steps) {
        res.budget_exhausted = true;
        break;
      }
      const auto rates = dropout_rates(m, res.sentence_steps, c);
      const double lr = lr_at(std::min(res.steps, total_steps), total_steps, c);
      auto b = batch_gradients(p, m, streams, members, eos_w, rates, true, mix64(dropout_seed ^ mix64(res.steps + 1)));
      if (!std::isfinite(b.loss))
        throw TrainingDiverged("non-finite training loss at step " + std::to_string(res.steps) + " (epoch " +
                               std::to_string(epoch) + ", lr " + std::to_string(lr) + ")");
      clip_grad_norm(p, b.grads, c.grad_clip);
      adamw_step(p, b.grads, state, lr, c);
      ++res.steps;
      res.sentence_steps += b.sentence_steps;
      res.step_losses.push_back(b.loss);
      loss_sum += b.loss;
      ++rec.batches;
      rec.lr = lr;
      if (sinks.metrics) {
        const double ppl = b.lexical_count ? std::exp(b.lexical_nll / b.lexical_count) : 0.0;
        *sinks.metrics << epoch << ',' << res.steps << ',' << res.sentence_steps << ",train," << b.loss << ',' << ppl
                       << ',' << lr << ',' << S << ',' << eos_w << '\n';
      }
      if (sinks.gates)
        for (const auto& [layer, g] : model::gate_values(p)) *sinks.gates << res.steps << ',' << layer << ',' << g << '\n';
    }
    const auto val = eval::eval_perplexity(p, m, valid_docs, sinks.threads);
    if (!std::isfinite(val.ppl))
      throw TrainingDiverged("non-finite validation perplexity after epoch " + std::to_string(epoch));
    rec.steps = res.steps;
    rec.sentence_steps = res.sentence_steps;
    rec.train_loss = rec.batches ? loss_sum / rec.batches : 0.0;
    rec.valid_ppl = val.ppl;
    rec.valid_nll = val.mean_nll;
    res.history.push_back(rec);
    if (sinks.metrics)
      *sinks.metrics << epoch << ',' << res.steps << ',' << res.sentence_steps << ",valid," << val.mean_nll << ','
                     << val.ppl << ',' << rec.lr << ',' << S << ',' << eos_w << '\n';
    if (sinks.on_epoch) sinks.on_epoch(rec);
    if (val.ppl < res.best_valid_ppl) {
      res.best_valid_ppl = val.ppl;
      res.best_epoch = epoch;
      best.clear();
      for (const auto& [n, v] : p.named) best.emplace_back(v.value().begin(), v.value().end());
      if (!sinks.checkpoint_path.empty()) {
        model::Checkpoint ck{m, true, model::param_arrays(p)};
        auto opt = optimizer_arrays(p, state);
        std::move(opt.begin(), opt.end(), std::back_inserter(ck.arrays));
        model::write_checkpoint(sinks.checkpoint_path, ck);
      }
    }
    if (stopper.update(val.ppl)) {
      res.early_stopped = true;
      break;
    }
    if (res.budget_exhausted || (c.max_steps > 0 && res.steps >= c.max_steps)) {
      res.budget_exhausted = true;
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) {
    auto dst = p.named[i].second.mutable_value();
    std::copy(best[i].begin(), best[i].end(), dst.begin());
  }
  return res;
}

}  // namespace tg::train
