#pragma once

// Corpus → documents → sentences → fixed-shape sentence tensors → streams →
// token-budget batches, plus the prepared-data binary format.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <queue>
#include <random>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tg/common.hpp"

namespace tg::text {

// ---------------------------------------------------------------------------
// Documents

struct Document {
  std::string title;
  std::string text;
};

/// True for a WikiText top-level heading line (` = Title = `).  Nested
/// headings (`== Section ==`) are not document boundaries.
inline bool is_title_line(std::string_view line) {
  static const std::regex re(R"(^\s*=\s+[^=\s](.*[^=\s])?\s+=\s*$)");
  return std::regex_match(line.begin(), line.end(), re);
}

inline std::string_view trim(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

inline std::vector<Document> split_documents(std::string_view corpus) {
  std::vector<Document> docs;
  Document cur;
  bool have_heading = false;
  auto flush = [&] {
    if (have_heading || !trim(cur.text).empty()) docs.push_back(std::move(cur));
    cur = Document{};
  };
  std::size_t pos = 0;
  while (pos < corpus.size()) {
    std::size_t nl = corpus.find('\n', pos);
    if (nl == std::string_view::npos) nl = corpus.size();
    std::string_view line = corpus.substr(pos, nl - pos);
    if (is_title_line(line)) {
      flush();
      have_heading = true;
      auto t = trim(line);
      t.remove_prefix(1);
      t.remove_suffix(1);
      cur.title = std::string(trim(t));
    } else {
      cur.text.append(line);
      cur.text.push_back('\n');
    }
    pos = nl + 1;
  }
  flush();
  // Heading-only documents with no body carry nothing to model.
  std::erase_if(docs, [](const Document& d) { return trim(d.text).empty(); });
  return docs;
}

// ---------------------------------------------------------------------------
// Byte-level subword vocabulary

namespace detail {

enum class CharClass { space, letter, digit, other };

inline CharClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return CharClass::space;
  if (std::isalpha(c) || c >= 0x80) return CharClass::letter;
  if (std::isdigit(c)) return CharClass::digit;
  return CharClass::other;
}

/// Lossless pre-segmentation: runs of one character class, with a single
/// preceding space attached to the following word.  Concatenating the pieces
/// reproduces the input.
inline std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const CharClass c = classify(static_cast<unsigned char>(s[i]));
    std::size_t j = i + 1;
    if (c == CharClass::space) {
      while (j < s.size() && classify(static_cast<unsigned char>(s[j])) == CharClass::space) ++j;
      // Leave a trailing ' ' for the next word.
      if (j < s.size() && s[j - 1] == ' ') {
        if (j - 1 > i) out.push_back(s.substr(i, j - 1 - i));
        i = j - 1;
        const CharClass nc = classify(static_cast<unsigned char>(s[j]));
        std::size_t k = j + 1;
        while (k < s.size() && classify(static_cast<unsigned char>(s[k])) == nc) ++k;
        out.push_back(s.substr(i, k - i));
        i = k;
        continue;
      }
    } else {
      while (j < s.size() && classify(static_cast<unsigned char>(s[j])) == c) ++j;
    }
    out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint64_t pair_key(std::uint32_t a, std::uint32_t b) { return (std::uint64_t(a) << 32) | b; }

/// Merge every non-overlapping occurrence of (a, b), left to right.
inline bool merge_pair(std::vector<std::uint32_t>& syms, std::uint32_t a, std::uint32_t b, std::uint32_t id) {
  bool changed = false;
  std::size_t w = 0;
  for (std::size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == a && syms[r + 1] == b) {
      syms[w++] = id;
      r += 2;
      changed = true;
    } else {
      syms[w++] = syms[r++];
    }
  }
  syms.resize(w);
  return changed;
}

}  // namespace detail

class Vocab {
 public:
  using Merge = std::pair<std::uint32_t, std::uint32_t>;

  Vocab() { rebuild({}); }

  /// Greedy most-frequent-pair merging over the pre-segmented training text.
  /// Ties break toward the smaller (left, right) id pair, so the result is a
  /// pure function of the input text and size.
  static Vocab build(std::span<const std::string> train_texts, std::size_t target_size) {
    require(target_size >= kMinVocabSize,
            "vocab size " + std::to_string(target_size) + " below minimum " + std::to_string(kMinVocabSize));
    std::map<std::string_view, std::int64_t> word_counts;
    bool any = false;
    for (const auto& t : train_texts) {
      for (auto piece : detail::pretokenize(t)) {
        ++word_counts[piece];
        any = true;
      }
    }
    require(any, "build_vocab: empty training text");

    std::vector<std::vector<std::uint32_t>> words;
    std::vector<std::int64_t> freq;
    words.reserve(word_counts.size());
    for (const auto& [w, c] : word_counts) {
      std::vector<std::uint32_t> syms;
      syms.reserve(w.size());
      for (unsigned char ch : w) syms.push_back(kByteBase + ch);
      words.push_back(std::move(syms));
      freq.push_back(c);
    }

    std::unordered_map<std::uint64_t, std::int64_t> counts;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
    auto add_word = [&](std::uint32_t wi, std::int64_t sign) {
      const auto& s = words[wi];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = detail::pair_key(s[i], s[i + 1]);
        counts[k] += sign * freq[wi];
        if (sign > 0) where[k].push_back(wi);
      }
    };
    for (std::uint32_t wi = 0; wi < words.size(); ++wi) add_word(wi, +1);

    // Max-heap on (count, -key) with lazy invalidation.
    using Entry = std::pair<std::int64_t, std::uint64_t>;
    auto cmp = [](const Entry& x, const Entry& y) {
      if (x.first != y.first) return x.first < y.first;
      return x.second > y.second;
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);
    for (const auto& [k, c] : counts)
      if (c > 0) heap.emplace(c, k);

    std::vector<Merge> merges;
    std::uint32_t next_id = kMinVocabSize;
    while (next_id < target_size && !heap.empty()) {
      auto [c, k] = heap.top();
      heap.pop();
      auto it = counts.find(k);
      if (it == counts.end() || it->second != c || c <= 0) continue;
      const auto a = static_cast<std::uint32_t>(k >> 32);
      const auto b = static_cast<std::uint32_t>(k & 0xffffffffu);
      merges.emplace_back(a, b);
      auto affected = std::move(where[k]);
      where.erase(k);
      std::sort(affected.begin(), affected.end());
      affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
      std::set<std::uint64_t> touched;
      for (auto wi : affected) {
        const auto& s = words[wi];
        bool has = false;
        for (std::size_t i = 0; i + 1 < s.size(); ++i) has = has || (s[i] == a && s[i + 1] == b);
        if (!has) continue;
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
          const auto pk = detail::pair_key(s[i], s[i + 1]);
          counts[pk] -= freq[wi];
          touched.insert(pk);
        }
        detail::merge_pair(words[wi], a, b, next_id);
        add_word(wi, +1);
        const auto& s2 = words[wi];
        for (std::size_t i = 0; i + 1 < s2.size(); ++i) touched.insert(detail::pair_key(s2[i], s2[i + 1]));
      }
      for (auto pk : touched) {
        auto ci = counts.find(pk);
        if (ci != counts.end() && ci->second > 0) heap.emplace(ci->second, pk);
      }
      ++next_id;
    }
    Vocab v;
    v.rebuild(std::move(merges));
    return v;
  }

  static Vocab from_merges(std::vector<Merge> merges) {
    Vocab v;
    v.rebuild(std::move(merges));
    return v;
  }

  std::size_t size() const { return kMinVocabSize + merges_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }

  std::vector<std::uint32_t> encode(std::string_view text) const {
    std::vector<std::uint32_t> out;
    std::vector<std::uint32_t> syms;
    for (auto piece : detail::pretokenize(text)) {
      syms.clear();
      for (unsigned char ch : piece) syms.push_back(kByteBase + ch);
      while (syms.size() > 1) {
        std::uint32_t best_rank = UINT32_MAX;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
          auto it = rank_.find(detail::pair_key(syms[i], syms[i + 1]));
          if (it != rank_.end()) best_rank = std::min(best_rank, it->second);
        }
        if (best_rank == UINT32_MAX) break;
        const auto& m = merges_[best_rank];
        detail::merge_pair(syms, m.first, m.second, kMinVocabSize + best_rank);
      }
      out.insert(out.end(), syms.begin(), syms.end());
    }
    return out;
  }

  /// Concatenated bytes of the non-reserved ids.
  std::string decode(std::span<const std::uint32_t> ids) const {
    std::string s;
    for (auto id : ids) {
      if (is_special(id)) continue;
      require(id < size(), "decode: id " + std::to_string(id) + " outside vocabulary");
      s += bytes_[id];
    }
    return s;
  }
  const std::string& token_bytes(std::uint32_t id) const { return bytes_.at(id); }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("tg-vocab");
    for (const auto& [a, b] : merges_) h = fnv1a(std::to_string(a) + " " + std::to_string(b) + "\n", h);
    return h;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write vocab file: " + path);
    f << "reserved 0 <pad>\nreserved 1 <bos>\nreserved 2 <eos>\nreserved 3 <eod>\n";
    for (const auto& [a, b] : merges_) f << a << ' ' << b << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocab file: " + path);
    std::vector<Merge> merges;
    std::string line;
    std::uint32_t reserved_seen = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      if (line.rfind("reserved", 0) == 0) {
        std::string kw, name;
        std::uint32_t id;
        ls >> kw >> id >> name;
        if (id != reserved_seen) throw std::runtime_error("vocab file: reserved ids out of order in " + path);
        ++reserved_seen;
        continue;
      }
      std::uint32_t a, b;
      if (!(ls >> a >> b)) throw std::runtime_error("vocab file: malformed merge line '" + line + "'");
      const auto limit = kMinVocabSize + merges.size();
      if (a >= limit || b >= limit || a < kByteBase || b < kByteBase)
        throw std::runtime_error("vocab file: merge references unknown id in '" + line + "'");
      merges.emplace_back(a, b);
    }
    if (reserved_seen != kNumReserved) throw std::runtime_error("vocab file: missing reserved declarations");
    return from_merges(std::move(merges));
  }

  bool operator==(const Vocab& o) const { return merges_ == o.merges_; }

 private:
  void rebuild(std::vector<Merge> merges) {
    merges_ = std::move(merges);
    rank_.clear();
    bytes_.assign(size(), std::string());
    for (std::uint32_t b = 0; b < 256; ++b) bytes_[kByteBase + b] = std::string(1, static_cast<char>(b));
    for (std::uint32_t r = 0; r < merges_.size(); ++r) {
      rank_.emplace(detail::pair_key(merges_[r].first, merges_[r].second), r);
      bytes_[kMinVocabSize + r] = bytes_[merges_[r].first] + bytes_[merges_[r].second];
    }
  }

  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::uint32_t> rank_;
  std::vector<std::string> bytes_;
};

// ---------------------------------------------------------------------------
// Sentence splitting

namespace detail {

inline bool is_abbreviation(std::string_view word) {
  static const std::array<std::string_view, 16> kGuard = {"Mr.", "Mrs.", "Ms.", "Dr.",  "Prof.", "St.",
                                                          "Jr.", "Sr.",  "vs.", "etc.", "e.g.",  "i.e.",
                                                          "No.", "Mt.",  "Co.", "Inc."};
  for (auto g : kGuard)
    if (word == g) return true;
  return false;
}

inline bool opens_sentence(unsigned char c) { return std::isupper(c) || std::isdigit(c) || c == '"' || c == '\''; }

/// Primary split on terminal punctuation followed by whitespace and a
/// capital/digit, skipping guarded abbreviations.
inline std::vector<std::string_view> split_terminal(std::string_view para) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < para.size(); ++i) {
    const char c = para[i];
    if (c != '.' && c != '!' && c != '?') continue;
    std::size_t end = i + 1;
    while (end < para.size() && (para[end] == '"' || para[end] == '\'' || para[end] == ')')) ++end;
    std::size_t j = end;
    while (j < para.size() && (para[j] == ' ' || para[j] == '\t')) ++j;
    if (j == end || j >= para.size() || !opens_sentence(static_cast<unsigned char>(para[j]))) continue;
    if (c == '.') {
      std::size_t ws = i;
      while (ws > start && para[ws - 1] != ' ' && para[ws - 1] != '\t') --ws;
      if (is_abbreviation(para.substr(ws, i + 1 - ws))) continue;
    }
    out.push_back(trim(para.substr(start, end - start)));
    start = j;
    i = j - 1;
  }
  if (start < para.size()) out.push_back(trim(para.substr(start)));
  std::erase_if(out, [](std::string_view s) { return s.empty(); });
  return out;
}

inline void cap_sentence(std::string_view s, std::size_t max_tokens, const Vocab& vocab,
                         std::vector<std::string>& out) {
  while (!s.empty()) {
    const auto ids = vocab.encode(s);
    if (ids.size() <= max_tokens) {
      out.emplace_back(s);
      return;
    }
    bool done = false;
    // Latest comma/semicolon/colon whose prefix fits.
    for (std::size_t p = s.size(); p-- > 0 && !done;) {
      if (s[p] != ',' && s[p] != ';' && s[p] != ':') continue;
      auto head = trim(s.substr(0, p + 1));
      auto tail = trim(s.substr(p + 1));
      if (head.empty() || tail.empty()) continue;
      if (vocab.encode(head).size() <= max_tokens) {
        out.emplace_back(head);
        s = tail;
        done = true;
      }
    }
    if (done) continue;
    // Hard split after max_tokens tokens (backing off if trimming changes the
    // re-encoded length).
    std::size_t k = max_tokens;
    while (k > 0) {
      const std::size_t nbytes = vocab.decode(std::span<const std::uint32_t>(ids).first(k)).size();
      auto head = trim(s.substr(0, nbytes));
      if (!head.empty() && vocab.encode(head).size() <= max_tokens) {
        out.emplace_back(head);
        s = trim(s.substr(nbytes));
        done = true;
        break;
      }
      --k;
    }
    if (!done) throw std::logic_error("split_sentences: cannot fit a single token under the cap");
  }
}

}  // namespace detail

/// Sentences of a document, each at most `max_tokens` tokens under `vocab`.
/// Lines are paragraphs; sentences never span a line break.
inline std::vector<std::string> split_sentences(std::string_view doc_text, std::size_t max_tokens,
                                                const Vocab& vocab) {
  require(max_tokens >= 1, "split_sentences: max_tokens must be positive");
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= doc_text.size()) {
    std::size_t nl = doc_text.find('\n', pos);
    if (nl == std::string_view::npos) nl = doc_text.size();
    auto para = trim(doc_text.substr(pos, nl - pos));
    if (!para.empty())
      for (auto s : detail::split_terminal(para)) detail::cap_sentence(s, max_tokens, vocab, out);
    pos = nl + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sentence tensors

/// Layout: [BOS][lex_1..lex_k][PAD .. up to index L][EOD or PAD][EOS].
/// Length is L + 3 and EOS sits at the last index.
struct SentenceTensor {
  std::vector<std::uint32_t> ids;
  std::uint32_t n_lex = 0;
  bool is_final = false;
  std::vector<std::uint8_t> valid;  // 1 where the position takes part in attention

  std::size_t length() const { return ids.size(); }
  std::size_t max_lexical() const { return ids.size() - 3; }
  std::size_t eos_index() const { return ids.size() - 1; }
  std::span<const std::uint32_t> lexical() const { return std::span<const std::uint32_t>(ids).subspan(1, n_lex); }
};

inline SentenceTensor make_sentence_tensor(std::span<const std::uint32_t> lex, std::size_t L, bool is_final) {
  require(!lex.empty(), "sentence tensor: empty sentence");
  require(lex.size() <= L, "sentence tensor: " + std::to_string(lex.size()) + " tokens exceed L=" + std::to_string(L));
  SentenceTensor st;
  const std::size_t T = L + 3;
  st.ids.assign(T, kPad);
  st.valid.assign(T, 0);
  st.ids[0] = kBos;
  st.valid[0] = 1;
  for (std::size_t i = 0; i < lex.size(); ++i) {
    require(!is_special(lex[i]), "sentence tensor: reserved id inside lexical span");
    st.ids[1 + i] = lex[i];
    st.valid[1 + i] = 1;
  }
  if (is_final) {
    st.ids[T - 2] = kEod;
    st.valid[T - 2] = 1;
  }
  st.ids[T - 1] = kEos;
  st.valid[T - 1] = 1;
  st.n_lex = static_cast<std::uint32_t>(lex.size());
  st.is_final = is_final;
  return st;
}

inline SentenceTensor tokenize_sentence(std::string_view text, const Vocab& vocab, std::size_t L, bool is_final) {
  require(!text.empty(), "tokenize_sentence: empty sentence");
  const auto ids = vocab.encode(text);
  return make_sentence_tensor(ids, L, is_final);
}

enum class LabelKind : std::uint8_t { none, lexical, boundary };

/// Next-token labels for one sentence tensor.  Each attendable position
/// predicts the next attendable token, so pads are skipped over; pads and the
/// EOS position carry no label.
struct SentenceLabels {
  std::vector<std::uint32_t> targets;
  std::vector<LabelKind> kinds;
};

inline SentenceLabels sentence_labels(const SentenceTensor& st) {
  const std::size_t T = st.length();
  SentenceLabels lab{std::vector<std::uint32_t>(T, kPad), std::vector<LabelKind>(T, LabelKind::none)};
  std::size_t prev = SIZE_MAX;
  for (std::size_t i = 0; i < T; ++i) {
    if (!st.valid[i]) continue;
    if (prev != SIZE_MAX) {
      lab.targets[prev] = st.ids[i];
      lab.kinds[prev] = is_special(st.ids[i]) ? LabelKind::boundary : LabelKind::lexical;
    }
    prev = i;
  }
  return lab;
}

// ---------------------------------------------------------------------------
// Streams

enum class Split : std::uint8_t { train, valid, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct SentenceStream {
  std::vector<SentenceTensor> sentences;
  std::uint32_t doc_id = 0;
  Split split = Split::train;

  std::size_t lexical_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.n_lex;
    return n;
  }
};

/// Greedy contiguous chunks of at most S sentences, order preserved.
inline std::vector<SentenceStream> slice_streams(std::span<const SentenceTensor> doc, std::size_t S,
                                                 std::uint32_t doc_id, Split split) {
  require(S >= 1, "slice_streams: S must be >= 1");
  std::vector<SentenceStream> out;
  for (std::size_t i = 0; i < doc.size(); i += S) {
    SentenceStream st;
    st.doc_id = doc_id;
    st.split = split;
    const std::size_t n = std::min(S, doc.size() - i);
    st.sentences.assign(doc.begin() + static_cast<std::ptrdiff_t>(i), doc.begin() + static_cast<std::ptrdiff_t>(i + n));
    out.push_back(std::move(st));
  }
  return out;
}

/// Re-slice streams at a new S: consecutive streams sharing a doc_id are
/// rejoined first.
inline std::vector<SentenceStream> reslice(std::span<const SentenceStream> streams, std::size_t S) {
  std::vector<SentenceStream> out;
  std::size_t i = 0;
  while (i < streams.size()) {
    std::vector<SentenceTensor> doc;
    const auto id = streams[i].doc_id;
    const auto split = streams[i].split;
    for (; i < streams.size() && streams[i].doc_id == id; ++i)
      doc.insert(doc.end(), streams[i].sentences.begin(), streams[i].sentences.end());
    auto part = slice_streams(doc, S, id, split);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct StreamShape {
  std::size_t n_sentences = 0;
  std::size_t n_lexical = 0;
};

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t budget = 0;
  std::size_t max_streams = 0;
  std::size_t bucket_width = 5;
};

/// Uniform token-budget bucketing: streams grouped into buckets of
/// `bucket_width` sentences, ⌈total/budget⌉ batches pre-allocated, buckets
/// visited longest first (shuffled inside), each stream placed first-fit under
/// the budget and stream cap.  The first-fit scan starts after the previously
/// filled batch, so consecutive long streams land in different batches.  If
/// nothing fits, the least-loaded batch with room for another stream takes it.
template <class Rng>
BatchPlan build_batches(std::span<const StreamShape> streams, std::size_t budget, std::size_t max_streams,
                        std::size_t bucket_width, Rng& rng) {
  require(budget >= 1 && max_streams >= 1 && bucket_width >= 1, "build_batches: invalid limits");
  BatchPlan plan{{}, budget, max_streams, bucket_width};
  if (streams.empty()) return plan;
  std::size_t total = 0;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    require(streams[i].n_lexical <= budget, "build_batches: stream " + std::to_string(i) + " has " +
                                                std::to_string(streams[i].n_lexical) + " lexical tokens, over budget " +
                                                std::to_string(budget));
    total += streams[i].n_lexical;
  }
  std::map<std::size_t, std::vector<std::size_t>, std::greater<>> buckets;
  for (std::size_t i = 0; i < streams.size(); ++i)
    buckets[streams[i].n_sentences == 0 ? 0 : (streams[i].n_sentences - 1) / bucket_width].push_back(i);

  const std::size_t n_batches = std::max<std::size_t>(1, (total + budget - 1) / budget);
  plan.batches.assign(n_batches, {});
  std::vector<std::size_t> load(n_batches, 0);
  std::size_t cursor = 0;
  for (auto& [key, ids] : buckets) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (auto id : ids) {
      const std::size_t tok = streams[id].n_lexical;
      std::size_t chosen = SIZE_MAX;
      for (std::size_t k = 0; k < plan.batches.size(); ++k) {
        const std::size_t b = (cursor + k) % plan.batches.size();
        if (load[b] + tok <= budget && plan.batches[b].size() < max_streams) {
          chosen = b;
          break;
        }
      }
      if (chosen == SIZE_MAX) {
        for (std::size_t b = 0; b < plan.batches.size(); ++b)
          if (plan.batches[b].size() < max_streams && (chosen == SIZE_MAX || load[b] < load[chosen])) chosen = b;
      }
      if (chosen == SIZE_MAX) {
        plan.batches.emplace_back();
        load.push_back(0);
        chosen = plan.batches.size() - 1;
      }
      plan.batches[chosen].push_back(id);
      load[chosen] += tok;
      cursor = (chosen + 1) % plan.batches.size();
    }
  }
  std::erase_if(plan.batches, [](const auto& b) { return b.empty(); });
  return plan;
}

template <class Rng>
BatchPlan build_batches(std::span<const SentenceStream> streams, std::size_t budget, std::size_t max_streams,
                        std::size_t bucket_width, Rng& rng) {
  std::vector<StreamShape> shapes;
  shapes.reserve(streams.size());
  for (const auto& s : streams) shapes.push_back({s.sentences.size(), s.lexical_tokens()});
  return build_batches(std::span<const StreamShape>(shapes), budget, max_streams, bucket_width, rng);
}

// ---------------------------------------------------------------------------
// Document processing

/// Run fn(i) for i in [0, n) on up to `threads` workers.  Results must be
/// written to per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

/// Sentence tensors of every document, the last one flagged final.  Documents
/// that yield no sentence are dropped (empty list in their slot).
inline std::vector<std::vector<SentenceTensor>> tokenize_documents(std::span<const Document> docs, const Vocab& vocab,
                                                                   std::size_t L, std::size_t threads = 1) {
  std::vector<std::vector<SentenceTensor>> out(docs.size());
  parallel_for(docs.size(), threads, [&](std::size_t d) {
    const auto sents = split_sentences(docs[d].text, L, vocab);
    for (std::size_t i = 0; i < sents.size(); ++i)
      out[d].push_back(tokenize_sentence(sents[i], vocab, L, i + 1 == sents.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Prepared-data file ("TGDS", little-endian)

inline constexpr std::uint32_t kDatasetVersion = 1;

struct PreparedData {
  std::uint64_t vocab_hash = 0;
  std::uint32_t L = 0;
  std::uint32_t T = 0;
  std::vector<SentenceStream> streams;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <class U>
bool get_le(std::istream& is, U& v) {
  std::array<unsigned char, sizeof(U)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) return false;
  std::uint64_t x = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) x |= std::uint64_t(b[i]) << (8 * i);
  v = static_cast<U>(x);
  return true;
}

}  // namespace detail

inline void write_prepared(const std::string& path, const PreparedData& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write prepared data: " + path);
  f.write("TGDS", 4);
  detail::put_le<std::uint32_t>(f, kDatasetVersion);
  detail::put_le<std::uint64_t>(f, data.vocab_hash);
  detail::put_le<std::uint32_t>(f, data.L);
  detail::put_le<std::uint32_t>(f, data.T);
  for (const auto& s : data.streams) {
    require(s.sentences.size() <= 0xffff, "prepared data: stream longer than 65535 sentences");
    detail::put_le<std::uint32_t>(f, s.doc_id);
    detail::put_le<std::uint16_t>(f, static_cast<std::uint16_t>(s.sentences.size()));
    for (const auto& st : s.sentences) {
      require(st.length() == data.T, "prepared data: sentence length differs from header T");
      for (auto id : st.ids) {
        require(id <= 0xffff, "prepared data: token id does not fit in u16");
        detail::put_le<std::uint16_t>(f, static_cast<std::uint16_t>(id));
      }
    }
    for (const auto& st : s.sentences) {
      detail::put_le<std::uint8_t>(f, static_cast<std::uint8_t>(st.n_lex));
      detail::put_le<std::uint8_t>(f, st.is_final ? 1 : 0);
    }
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline PreparedData read_prepared(const std::string& path, Split split) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read prepared data: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::string_view(magic, 4) != "TGDS")
    throw std::runtime_error("not a TGDS file: " + path);
  PreparedData d;
  std::uint32_t version = 0;
  detail::get_le(f, version);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported TGDS version in " + path);
  detail::get_le(f, d.vocab_hash);
  detail::get_le(f, d.L);
  detail::get_le(f, d.T);
  if (d.T != d.L + 3) throw std::runtime_error("TGDS header: T != L + 3 in " + path);
  std::uint32_t doc_id = 0;
  while (detail::get_le(f, doc_id)) {
    std::uint16_t n = 0;
    if (!detail::get_le(f, n)) throw std::runtime_error("truncated TGDS record in " + path);
    SentenceStream s;
    s.doc_id = doc_id;
    s.split = split;
    std::vector<std::vector<std::uint32_t>> ids(n, std::vector<std::uint32_t>(d.T));
    for (auto& row : ids)
      for (auto& id : row) {
        std::uint16_t v = 0;
        if (!detail::get_le(f, v)) throw std::runtime_error("truncated TGDS record in " + path);
        id = v;
      }
    for (std::size_t i = 0; i < n; ++i) {
      std::uint8_t n_lex = 0, fin = 0;
      if (!detail::get_le(f, n_lex) || !detail::get_le(f, fin))
        throw std::runtime_error("truncated TGDS record in " + path);
      auto st = make_sentence_tensor(std::span<const std::uint32_t>(ids[i]).subspan(1, n_lex), d.L, fin != 0);
      if (st.ids != ids[i]) throw std::runtime_error("TGDS record layout mismatch in " + path);
      s.sentences.push_back(std::move(st));
    }
    d.streams.push_back(std::move(s));
  }
  return d;
}

}  // namespace tg::text
