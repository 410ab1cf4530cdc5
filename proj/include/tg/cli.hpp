#pragma once

// Command-line surface: config files with key = value lines, `--key value`
// overrides, and one JSON summary per run on stdout.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tg/eval.hpp"
#include "tg/synthetic.hpp"
#include "tg/training.hpp"

#ifndef TG_DATA_DIR
#define TG_DATA_DIR "data"
#endif

namespace tg::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::uint64_t seed = 1234;
  std::string corpus;        // heading-delimited text; split by valid_frac/test_frac
  std::string valid_corpus;  // optional pre-split validation text
  std::string test_corpus;
  double valid_frac = 0.05;
  double test_frac = 0.05;
  std::string data_dir = "prepared";
  std::string out_dir = "runs";
  std::string checkpoint;  // default: out_dir/best.ckpt
  std::string eval_split = "test";
  std::size_t threads = 0;  // 0: all hardware threads
  std::size_t probe_n = 1000;
  std::string names = TG_DATA_DIR "/names.txt";
  std::size_t rechunk_S = 30;
  std::string rechunk_out;  // default: data_dir/train.S<S>.tgds
  std::string scaling_csv;
  std::string scaling_ref_csv;
  std::size_t synth_words = 150000;

  std::uint64_t data_seed() const { return sub_seed(seed, "data"); }
  std::uint64_t init_seed() const { return sub_seed(seed, "init"); }
  std::uint64_t probe_seed() const { return sub_seed(seed, "probe"); }
  std::string checkpoint_path() const { return checkpoint.empty() ? (fs::path(out_dir) / "best.ckpt").string() : checkpoint; }
  std::string vocab_path() const { return (fs::path(data_dir) / "vocab.txt").string(); }
  std::string split_path(text::Split s) const {
    return (fs::path(data_dir) / (std::string(text::split_name(s)) + ".tgds")).string();
  }
};

namespace detail {

inline std::size_t parse_size(std::string_view key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') reject("bad integer for " + std::string(key) + ": " + v);
  return static_cast<std::size_t>(x);
}

inline double parse_double(std::string_view key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || !std::isfinite(x)) reject("bad number for " + std::string(key) + ": " + v);
  return x;
}

using train::TrainConfig;

inline constexpr std::pair<std::string_view, double TrainConfig::*> kTrainReals[] = {
    {"peak_lr", &TrainConfig::peak_lr},         {"beta1", &TrainConfig::beta1},
    {"beta2", &TrainConfig::beta2},             {"eps", &TrainConfig::eps},
    {"weight_decay", &TrainConfig::weight_decay}, {"warmup_frac", &TrainConfig::warmup_frac},
    {"grad_clip", &TrainConfig::grad_clip},     {"eos_w_warm", &TrainConfig::eos_w_warm},
    {"eos_w_after", &TrainConfig::eos_w_after}, {"min_delta", &TrainConfig::min_delta},
};

inline constexpr std::pair<std::string_view, std::size_t TrainConfig::*> kTrainSizes[] = {
    {"epochs_max", &TrainConfig::epochs_max},     {"S0", &TrainConfig::S0},
    {"S_step", &TrainConfig::S_step},             {"S_every", &TrainConfig::S_every},
    {"warmin_half", &TrainConfig::warmin_half},   {"warmin_full", &TrainConfig::warmin_full},
    {"patience", &TrainConfig::patience},         {"batch_budget", &TrainConfig::batch_budget},
    {"max_streams", &TrainConfig::max_streams},   {"bucket_width", &TrainConfig::bucket_width},
    {"max_steps", &TrainConfig::max_steps},
};

inline constexpr std::pair<std::string_view, std::string RunConfig::*> kRunStrings[] = {
    {"corpus", &RunConfig::corpus},         {"valid_corpus", &RunConfig::valid_corpus},
    {"test_corpus", &RunConfig::test_corpus}, {"data_dir", &RunConfig::data_dir},
    {"out_dir", &RunConfig::out_dir},       {"checkpoint", &RunConfig::checkpoint},
    {"eval_split", &RunConfig::eval_split}, {"names", &RunConfig::names},
    {"rechunk_out", &RunConfig::rechunk_out}, {"scaling_csv", &RunConfig::scaling_csv},
    {"scaling_ref_csv", &RunConfig::scaling_ref_csv},
};

inline constexpr std::pair<std::string_view, std::size_t RunConfig::*> kRunSizes[] = {
    {"threads", &RunConfig::threads},
    {"probe_n", &RunConfig::probe_n},
    {"rechunk_S", &RunConfig::rechunk_S},
    {"synth_words", &RunConfig::synth_words},
};

inline constexpr std::pair<std::string_view, double RunConfig::*> kRunReals[] = {
    {"valid_frac", &RunConfig::valid_frac},
    {"test_frac", &RunConfig::test_frac},
};

}  // namespace detail

/// Assigns one key of any section; unknown keys are rejected by name.
inline void set_key(RunConfig& rc, const std::string& key, const std::string& value) {
  if (model::set_model_key(rc.model, key, value)) return;
  if (key == "seed") {
    rc.seed = detail::parse_size(key, value);
    return;
  }
  for (auto [k, m] : detail::kTrainReals)
    if (k == key) return void(rc.train.*m = detail::parse_double(key, value));
  for (auto [k, m] : detail::kTrainSizes)
    if (k == key) return void(rc.train.*m = detail::parse_size(key, value));
  for (auto [k, m] : detail::kRunStrings)
    if (k == key) return void(rc.*m = value);
  for (auto [k, m] : detail::kRunSizes)
    if (k == key) return void(rc.*m = detail::parse_size(key, value));
  for (auto [k, m] : detail::kRunReals)
    if (k == key) return void(rc.*m = detail::parse_double(key, value));
  reject("unknown config key: " + key);
}

inline void validate(RunConfig& rc) {
  rc.model.validate();
  rc.train.seed = rc.seed;
  rc.train.validate();
  require(rc.valid_frac >= 0 && rc.test_frac >= 0 && rc.valid_frac + rc.test_frac < 1,
          "valid_frac and test_frac must be non-negative and sum below 1");
  require(rc.eval_split == "train" || rc.eval_split == "valid" || rc.eval_split == "test",
          "eval_split must be train, valid or test: " + rc.eval_split);
  require(rc.rechunk_S >= 1, "rechunk_S must be >= 1");
}

/// Every key with its resolved value; loading this text reproduces the run.
inline std::string to_text(const RunConfig& rc) {
  std::ostringstream o;
  o << "seed = " << rc.seed << "\n\n# model\n" << model::to_text(rc.model) << "\n# training\n";
  for (auto [k, m] : detail::kTrainReals) o << k << " = " << format_double(rc.train.*m) << "\n";
  for (auto [k, m] : detail::kTrainSizes) o << k << " = " << rc.train.*m << "\n";
  o << "\n# run\n";
  for (auto [k, m] : detail::kRunStrings) o << k << " = " << rc.*m << "\n";
  for (auto [k, m] : detail::kRunSizes) o << k << " = " << rc.*m << "\n";
  for (auto [k, m] : detail::kRunReals) o << k << " = " << format_double(rc.*m) << "\n";
  return o.str();
}

inline std::string read_file(const std::string& path, std::string_view key) {
  std::ifstream f(path, std::ios::binary);
  if (!f) reject("missing file for " + std::string(key) + ": " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void require_file(const std::string& path, std::string_view key) {
  require(!path.empty(), "no path given for " + std::string(key));
  require(fs::is_regular_file(path), "missing file for " + std::string(key) + ": " + path);
}

/// Config file (if any) then overrides, in order.
inline RunConfig load_config(const std::string& config_path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig rc;
  if (!config_path.empty())
    for (const auto& [k, v] : model::parse_kv_text(read_file(config_path, "config"))) set_key(rc, k, v);
  for (const auto& [k, v] : overrides) set_key(rc, k, v);
  validate(rc);
  return rc;
}

/// Worker count: the configured value (0 = hardware), capped by TG_THREADS.
inline std::size_t worker_count(const RunConfig& rc) {
  std::size_t n = rc.threads ? rc.threads : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TG_THREADS")) {
    const std::size_t cap = detail::parse_size("TG_THREADS", env);
    if (cap > 0) n = std::min(n, cap);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  RunConfig rc;
  std::string command;
  std::ostream* log = &std::cerr;
};

inline void write_manifest(const Context& ctx) {
  fs::create_directories(ctx.rc.out_dir);
  std::ofstream f(fs::path(ctx.rc.out_dir) / (ctx.command + ".manifest"));
  f << "# command: " << ctx.command << "\n" << to_text(ctx.rc);
}

inline void write_summary(const Context& ctx, const json& j) {
  std::ofstream f(fs::path(ctx.rc.out_dir) / (ctx.command + ".json"));
  f << j.dump(2) << "\n";
}

/// Train/valid/test documents from the corpus keys.
inline std::array<std::vector<text::Document>, 3> split_corpus(const RunConfig& rc) {
  require_file(rc.corpus, "corpus");
  auto docs = text::split_documents(read_file(rc.corpus, "corpus"));
  std::array<std::vector<text::Document>, 3> out;
  if (!rc.valid_corpus.empty() || !rc.test_corpus.empty()) {
    out[0] = std::move(docs);
    if (!rc.valid_corpus.empty()) {
      require_file(rc.valid_corpus, "valid_corpus");
      out[1] = text::split_documents(read_file(rc.valid_corpus, "valid_corpus"));
    }
    if (!rc.test_corpus.empty()) {
      require_file(rc.test_corpus, "test_corpus");
      out[2] = text::split_documents(read_file(rc.test_corpus, "test_corpus"));
    }
    return out;
  }
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(rc.data_seed());
  std::shuffle(order.begin(), order.end(), rng);
  auto take = [&](double frac) { return frac > 0 ? std::max<std::size_t>(1, std::llround(frac * docs.size())) : 0; };
  const std::size_t nv = take(rc.valid_frac), nt = take(rc.test_frac);
  require(nv + nt < docs.size(), "corpus has too few documents for the requested splits");
  std::vector<int> which(docs.size(), 0);
  for (std::size_t i = 0; i < nv; ++i) which[order[i]] = 1;
  for (std::size_t i = nv; i < nv + nt; ++i) which[order[i]] = 2;
  for (std::size_t i = 0; i < docs.size(); ++i) out[which[i]].push_back(std::move(docs[i]));
  return out;
}

inline json cmd_synth(Context& ctx) {
  const auto& rc = ctx.rc;
  require(!rc.corpus.empty(), "no path given for corpus");
  synth::Options o;
  o.target_words = rc.synth_words;
  o.seed = sub_seed(rc.seed, "synth");
  const auto text = synth::synthetic_corpus(o);
  if (auto parent = fs::path(rc.corpus).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream(rc.corpus, std::ios::binary) << text;
  return {{"corpus", rc.corpus}, {"documents", text::split_documents(text).size()}, {"bytes", text.size()}};
}

inline json cmd_prep(Context& ctx) {
  const auto& rc = ctx.rc;
  const auto splits = split_corpus(rc);
  require(!splits[0].empty(), "training split is empty");
  std::vector<std::string> texts;
  for (const auto& d : splits[0]) texts.push_back(d.text);
  *ctx.log << "building vocabulary (" << rc.model.vocab_size << ") on " << texts.size() << " documents\n";
  const auto vocab = text::Vocab::build(texts, rc.model.vocab_size);
  fs::create_directories(rc.data_dir);
  vocab.save(rc.vocab_path());
  const std::size_t L = rc.model.max_sentence_tokens;
  json j{{"vocab_size", vocab.size()}, {"vocab_hash", vocab.hash()}, {"L", L}};
  std::uint32_t doc_id = 0;
  for (int s = 0; s < 3; ++s) {
    const auto split = static_cast<text::Split>(s);
    const auto tensors = text::tokenize_documents(splits[s], vocab, L, worker_count(rc));
    text::PreparedData data{vocab.hash(), static_cast<std::uint32_t>(L), static_cast<std::uint32_t>(L + 3), {}};
    std::size_t tokens = 0, sentences = 0;
    for (const auto& doc : tensors) {
      const std::uint32_t id = doc_id++;
      if (doc.empty()) continue;
      const std::size_t S = split == text::Split::train ? rc.train.S0 : doc.size();
      for (auto& st : text::slice_streams(doc, S, id, split)) {
        tokens += st.lexical_tokens();
        sentences += st.sentences.size();
        data.streams.push_back(std::move(st));
      }
    }
    text::write_prepared(rc.split_path(split), data);
    j[std::string(text::split_name(split))] = {
        {"documents", splits[s].size()}, {"streams", data.streams.size()}, {"sentences", sentences}, {"lexical_tokens", tokens}};
  }
  return j;
}

inline text::Vocab load_vocab(const RunConfig& rc) {
  require_file(rc.vocab_path(), "data_dir (vocab.txt)");
  return text::Vocab::load(rc.vocab_path());
}

inline std::vector<text::SentenceStream> load_split(const RunConfig& rc, text::Split s, const text::Vocab& vocab) {
  const auto path = rc.split_path(s);
  require_file(path, "data_dir (" + std::string(text::split_name(s)) + ".tgds)");
  auto d = text::read_prepared(path, s);
  require(d.vocab_hash == vocab.hash(), "prepared data " + path + " was built with a different vocabulary");
  return std::move(d.streams);
}

inline void check_data_shape(const model::ModelConfig& m, const text::Vocab& vocab,
                             std::span<const text::SentenceStream> streams) {
  require(m.vocab_size >= vocab.size(), "vocab_size " + std::to_string(m.vocab_size) + " is below the tokenizer size " +
                                            std::to_string(vocab.size()));
  if (m.variant == model::Variant::tg_fixed_span || model::is_decoder(m.variant)) return;
  for (const auto& s : streams)
    for (const auto& st : s.sentences)
      require(st.max_lexical() == m.max_sentence_tokens,
              "prepared data has L=" + std::to_string(st.max_lexical()) + " but max_sentence_tokens=" +
                  std::to_string(m.max_sentence_tokens));
}

inline json cmd_train(Context& ctx) {
  const auto& rc = ctx.rc;
  const auto vocab = load_vocab(rc);
  const auto tr = load_split(rc, text::Split::train, vocab);
  const auto va = load_split(rc, text::Split::valid, vocab);
  require(!tr.empty() && !va.empty(), "training and validation splits must be non-empty");
  check_data_shape(rc.model, vocab, tr);
  fs::create_directories(rc.out_dir);
  std::ofstream metrics(fs::path(rc.out_dir) / "metrics.csv"), gates(fs::path(rc.out_dir) / "gates.csv");
  train::write_metrics_header(metrics);
  train::write_gate_header(gates);
  train::TrainSinks sinks;
  sinks.metrics = &metrics;
  sinks.gates = &gates;
  sinks.checkpoint_path = rc.checkpoint_path();
  sinks.threads = worker_count(rc);
  const auto t0 = std::chrono::steady_clock::now();
  sinks.on_epoch = [&](const train::EpochRecord& r) {
    *ctx.log << "epoch " << r.epoch << "  steps " << r.steps << "  S " << r.S << "  train_loss " << r.train_loss
             << "  valid_ppl " << r.valid_ppl << "\n";
  };
  auto p = model::init_params<float>(rc.model, rc.init_seed());
  const auto res = train::train(p, rc.model, rc.train, tr, va, sinks);
  json j{{"variant", model::variant_name(rc.model.variant)},
         {"n_nonembed", model::count_nonembedding_params(rc.model)},
         {"ppl_valid", res.best_valid_ppl},
         {"best_epoch", res.best_epoch},
         {"epochs", res.history.size()},
         {"steps", res.steps},
         {"sentence_steps", res.sentence_steps},
         {"early_stopped", res.early_stopped},
         {"checkpoint", sinks.checkpoint_path}};
  if (fs::is_regular_file(rc.split_path(text::Split::test))) {
    const auto te = load_split(rc, text::Split::test, vocab);
    if (!te.empty()) j["ppl_test"] = eval::eval_perplexity(p, rc.model, te, sinks.threads).ppl;
  }
  j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return j;
}

inline model::Params<float> load_checkpoint_params(Context& ctx) {
  require_file(ctx.rc.checkpoint_path(), "checkpoint");
  auto ck = model::read_checkpoint(ctx.rc.checkpoint_path());
  ctx.rc.model = ck.config;
  return model::params_from_checkpoint<float>(ck);
}

inline text::Split parse_split(const std::string& s) {
  if (s == "train") return text::Split::train;
  if (s == "valid") return text::Split::valid;
  return text::Split::test;
}

inline json cmd_eval(Context& ctx) {
  const auto p = load_checkpoint_params(ctx);
  const auto& rc = ctx.rc;
  const auto vocab = load_vocab(rc);
  const auto streams = load_split(rc, parse_split(rc.eval_split), vocab);
  check_data_shape(rc.model, vocab, streams);
  const auto r = eval::eval_perplexity(p, rc.model, streams, worker_count(rc));
  return {{"variant", model::variant_name(rc.model.variant)},
          {"ppl_" + rc.eval_split, r.ppl},
          {"nll_" + rc.eval_split, r.mean_nll},
          {"lexical_tokens", r.tokens},
          {"n_nonembed", model::count_nonembedding_params(rc.model)}};
}

inline json cmd_probe(Context& ctx) {
  const auto p = load_checkpoint_params(ctx);
  const auto& rc = ctx.rc;
  const auto vocab = load_vocab(rc);
  require_file(rc.names, "names");
  const auto names = eval::read_names(rc.names);
  const auto res = eval::reversal_probe(eval::model_next_token(p, rc.model), vocab, names, rc.probe_n, rc.probe_seed());
  fs::create_directories(rc.out_dir);
  std::ofstream csv(fs::path(rc.out_dir) / "probe.csv");
  eval::write_probe_csv(csv, res, model::variant_name(rc.model.variant));
  json j{{"variant", model::variant_name(rc.model.variant)}, {"n", rc.probe_n}};
  for (const auto& r : res)
    j[std::string(eval::condition_name(r.condition))] = {{"nll_target", r.nll_target},
                                                          {"nll_distractor", r.nll_distractor},
                                                          {"delta", r.delta},
                                                          {"top1_rate", r.top1_rate}};
  return j;
}

inline json cmd_fit_scaling(Context& ctx) {
  const auto& rc = ctx.rc;
  require_file(rc.scaling_csv, "scaling_csv");
  const auto pts = eval::read_scaling_csv(rc.scaling_csv);
  const auto f = eval::fit_power_law(pts);
  json j{{"C", f.C}, {"alpha", f.alpha}, {"residual", f.residual}, {"points", f.points}};
  if (!rc.scaling_ref_csv.empty()) {
    require_file(rc.scaling_ref_csv, "scaling_ref_csv");
    const auto ref = eval::fit_power_law(eval::read_scaling_csv(rc.scaling_ref_csv));
    std::vector<double> xs;
    for (const auto& [x, l] : pts) xs.push_back(x);
    j["reference"] = {{"C", ref.C}, {"alpha", ref.alpha}, {"residual", ref.residual}};
    j["x"] = xs;
    j["multiplier_fitted"] = eval::effective_multiplier(ref, f, xs);
    j["multiplier_achieved"] = eval::effective_multiplier(ref, pts);
  }
  return j;
}

inline json cmd_count_params(Context& ctx) {
  const auto n = model::count_nonembedding_params(ctx.rc.model);
  return {{"variant", model::variant_name(ctx.rc.model.variant)},
          {"n_nonembed", n},
          {"n_nonembed_millions", static_cast<double>(n) / 1e6}};
}

inline json cmd_rechunk(Context& ctx) {
  const auto& rc = ctx.rc;
  const auto vocab = load_vocab(rc);
  const auto tr = load_split(rc, text::Split::train, vocab);
  const auto out = train::training_streams(rc.model, tr, rc.rechunk_S);
  text::PreparedData data{vocab.hash(), static_cast<std::uint32_t>(rc.model.max_sentence_tokens),
                          static_cast<std::uint32_t>(rc.model.max_sentence_tokens + 3), out};
  if (rc.model.variant == model::Variant::tg_fixed_span) {
    data.L = static_cast<std::uint32_t>(rc.model.span);
    data.T = data.L + 3;
  }
  const auto path = rc.rechunk_out.empty()
                        ? (fs::path(rc.data_dir) / ("train.S" + std::to_string(rc.rechunk_S) + ".tgds")).string()
                        : rc.rechunk_out;
  text::write_prepared(path, data);
  return {{"S", rc.rechunk_S},
          {"path", path},
          {"streams_in", tr.size()},
          {"streams_out", out.size()},
          {"lexical_tokens_in", train::lexical_total(tr)},
          {"lexical_tokens_out", train::lexical_total(out)}};
}

// ---------------------------------------------------------------------------
// Entry point

inline constexpr std::pair<std::string_view, std::string_view> kCommands[] = {
    {"synth", "write the templated synthetic corpus to `corpus`"},
    {"prep", "corpus -> vocabulary, splits and prepared streams"},
    {"train", "train a model on prepared data"},
    {"eval", "lexical perplexity of a checkpoint on `eval_split`"},
    {"probe", "father/son reversal probe of a checkpoint"},
    {"fit-scaling", "power-law fit of a CSV of (x, loss) pairs"},
    {"count-params", "non-embedding parameter count of the model config"},
    {"rechunk", "re-slice the training split at stream length `rechunk_S`"},
};

/// `--key value` and `--key=value` pairs from the arguments CLI11 left over.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const auto& a = rest[i];
    require(a.rfind("--", 0) == 0 && a.size() > 2, "unexpected argument: " + a);
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      require(i + 1 < rest.size(), "missing value for " + a.substr(2));
      out.emplace_back(a.substr(2), rest[++i]);
    }
  }
  return out;
}

/// Runs one command; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sentence-memory language models: data, training, evaluation and scaling tools"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<CLI::App*> subs;
  for (auto [name, help] : kCommands) {
    auto* s = app.add_subcommand(std::string(name), std::string(help));
    s->add_option("-c,--config", config_path, "key = value config file");
    s->allow_extras();
    subs.push_back(s);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  CLI::App* sub = nullptr;
  for (auto* s : subs)
    if (s->parsed()) sub = s;
  Context ctx;
  ctx.command = sub->get_name();
  ctx.log = &err;
  try {
    ctx.rc = load_config(config_path, parse_overrides(sub->remaining()));
    json result;
    if (ctx.command == "synth") result = cmd_synth(ctx);
    else if (ctx.command == "prep") result = cmd_prep(ctx);
    else if (ctx.command == "train") result = cmd_train(ctx);
    else if (ctx.command == "eval") result = cmd_eval(ctx);
    else if (ctx.command == "probe") result = cmd_probe(ctx);
    else if (ctx.command == "fit-scaling") result = cmd_fit_scaling(ctx);
    else if (ctx.command == "count-params") result = cmd_count_params(ctx);
    else result = cmd_rechunk(ctx);
    json j{{"command", ctx.command}, {"seed", ctx.rc.seed}};
    j.update(result);
    write_manifest(ctx);
    write_summary(ctx, j);
    out << j.dump(2) << "\n";
    return 0;
  } catch (const std::invalid_argument& e) {
    err << "tg " << ctx.command << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "tg " << ctx.command << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tg::cli
