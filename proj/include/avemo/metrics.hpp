#pragma once

// Text metrics over token lists. Tokens come from metric_tokenize():
// lowercase, split on whitespace, every ASCII punctuation character its own
// token.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "avemo/error.hpp"

namespace avemo {

using Tokens = std::vector<std::string>;

inline constexpr const char* kMetricTokenizerVersion = "ws-punct-lower-v1";

inline Tokens metric_tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

namespace detail {

inline std::map<Tokens, int> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, int> c;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
  return c;
}

/// Reference length closest to c; ties go to the shorter reference.
inline std::size_t closest_ref_len(std::size_t c, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > c ? x - c : c - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

}  // namespace detail

/// Clipped matches and candidate n-gram total for one order.
struct NgramTally {
  long matched = 0;
  long total = 0;
};

inline NgramTally ngram_tally(const Tokens& cand, const std::vector<Tokens>& refs, std::size_t n) {
  NgramTally t;
  const auto cc = detail::ngram_counts(cand, n);
  std::map<Tokens, int> max_ref;
  for (const auto& r : refs)
    for (const auto& [g, k] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
  for (const auto& [g, k] : cc) {
    t.total += k;
    auto it = max_ref.find(g);
    if (it != max_ref.end()) t.matched += std::min(k, it->second);
  }
  return t;
}

/// Geometric mean of clipped precisions 1..n times the brevity penalty.
/// No smoothing: any zero precision gives 0.
inline double bleu_from_tallies(const std::vector<NgramTally>& tallies, double cand_len, double ref_len) {
  if (cand_len <= 0) return 0.0;
  double log_sum = 0;
  for (const auto& t : tallies) {
    if (t.matched == 0 || t.total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(t.matched) / static_cast<double>(t.total));
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / static_cast<double>(tallies.size()));
}

inline double bleu_n(const Tokens& cand, const std::vector<Tokens>& refs, int n) {
  if (n < 1 || n > 4) fail(ErrorCode::kPrecondition, "bleu order must be 1..4");
  if (refs.empty()) fail(ErrorCode::kPrecondition, "bleu needs a reference");
  if (cand.empty()) return 0.0;
  std::vector<NgramTally> t;
  for (int k = 1; k <= n; ++k) t.push_back(ngram_tally(cand, refs, static_cast<std::size_t>(k)));
  return bleu_from_tallies(t, static_cast<double>(cand.size()),
                           static_cast<double>(detail::closest_ref_len(cand.size(), refs)));
}

/// Corpus BLEU: clipped counts and lengths pooled over all pairs before the
/// precisions are formed.
inline double corpus_bleu(const std::vector<Tokens>& cands, const std::vector<Tokens>& refs, int n) {
  if (cands.size() != refs.size()) fail(ErrorCode::kPrecondition, "candidate/reference count mismatch");
  std::vector<NgramTally> pooled(static_cast<std::size_t>(n));
  double c = 0, r = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    for (int k = 1; k <= n; ++k) {
      const auto t = ngram_tally(cands[i], {refs[i]}, static_cast<std::size_t>(k));
      pooled[static_cast<std::size_t>(k - 1)].matched += t.matched;
      pooled[static_cast<std::size_t>(k - 1)].total += t.total;
    }
    c += static_cast<double>(cands[i].size());
    r += static_cast<double>(refs[i].size());
  }
  return bleu_from_tallies(pooled, c, r);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// ROUGE-L F1.
inline double rouge_l(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(cand, ref));
  if (l == 0) return 0.0;
  const double p = l / static_cast<double>(cand.size()), r = l / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

/// Porter (1980) suffix stripper, enough for METEOR's stem stage.
inline std::string porter_stem(std::string w) {
  if (w.size() <= 2) return w;
  // y is a consonant at the start or after a vowel.
  std::function<bool(std::size_t)> cons = [&](std::size_t i) -> bool {
    const char c = w[i];
    if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') return false;
    if (c == 'y') return i == 0 || !cons(i - 1);
    return true;
  };
  // Measure m of w[0..k): number of VC sequences.
  auto measure = [&](std::size_t k) {
    int m = 0;
    std::size_t i = 0;
    while (i < k && cons(i)) ++i;
    while (i < k) {
      while (i < k && !cons(i)) ++i;
      if (i >= k) break;
      ++m;
      while (i < k && cons(i)) ++i;
    }
    return m;
  };
  auto has_vowel = [&](std::size_t k) {
    for (std::size_t i = 0; i < k; ++i)
      if (!cons(i)) return true;
    return false;
  };
  auto ends = [&](const std::string& s) { return w.size() >= s.size() && w.compare(w.size() - s.size(), s.size(), s) == 0; };
  auto double_cons = [&](std::size_t k) { return k >= 2 && w[k - 1] == w[k - 2] && cons(k - 1); };
  auto cvc = [&](std::size_t k) {
    if (k < 3 || !cons(k - 1) || cons(k - 2) || !cons(k - 3)) return false;
    const char c = w[k - 1];
    return c != 'w' && c != 'x' && c != 'y';
  };
  auto replace = [&](const std::string& suf, const std::string& rep, int min_m) {
    if (!ends(suf)) return false;
    const std::size_t stem = w.size() - suf.size();
    if (measure(stem) > min_m) w = w.substr(0, stem) + rep;
    return true;
  };
  // 1a
  if (ends("sses")) w.resize(w.size() - 2);
  else if (ends("ies")) w.resize(w.size() - 2);
  else if (!ends("ss") && ends("s")) w.resize(w.size() - 1);
  // 1b
  bool extra = false;
  if (ends("eed")) {
    if (measure(w.size() - 3) > 0) w.resize(w.size() - 1);
  } else if (ends("ed") && has_vowel(w.size() - 2)) {
    w.resize(w.size() - 2);
    extra = true;
  } else if (ends("ing") && has_vowel(w.size() - 3)) {
    w.resize(w.size() - 3);
    extra = true;
  }
  if (extra) {
    if (ends("at") || ends("bl") || ends("iz")) {
      w += 'e';
    } else if (double_cons(w.size()) && !ends("l") && !ends("s") && !ends("z")) {
      w.resize(w.size() - 1);
    } else if (measure(w.size()) == 1 && cvc(w.size())) {
      w += 'e';
    }
  }
  // 1c
  if (ends("y") && has_vowel(w.size() - 1)) w.back() = 'i';
  // 2
  static const std::vector<std::pair<std::string, std::string>> s2{
      {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"},  {"anci", "ance"},  {"izer", "ize"},
      {"abli", "able"},   {"alli", "al"},     {"entli", "ent"},  {"eli", "e"},      {"ousli", "ous"},
      {"ization", "ize"}, {"ation", "ate"},   {"ator", "ate"},   {"alism", "al"},   {"iveness", "ive"},
      {"fulness", "ful"}, {"ousness", "ous"}, {"aliti", "al"},   {"iviti", "ive"},  {"biliti", "ble"}};
  for (const auto& [suf, rep] : s2)
    if (replace(suf, rep, 0)) break;
  // 3
  static const std::vector<std::pair<std::string, std::string>> s3{
      {"icate", "ic"}, {"ative", ""}, {"alize", "al"}, {"iciti", "ic"}, {"ical", "ic"}, {"ful", ""}, {"ness", ""}};
  for (const auto& [suf, rep] : s3)
    if (replace(suf, rep, 0)) break;
  // 4
  static const std::vector<std::string> s4{"al",  "ance", "ence", "er",  "ic",  "able", "ible", "ant", "ement", "ment",
                                           "ent", "ion",  "ou",   "ism", "ate", "iti",  "ous",  "ive", "ize"};
  for (const auto& suf : s4) {
    if (!ends(suf)) continue;
    const std::size_t stem = w.size() - suf.size();
    if (measure(stem) > 1 && (suf != "ion" || (stem > 0 && (w[stem - 1] == 's' || w[stem - 1] == 't'))))
      w.resize(stem);
    break;
  }
  // 5
  if (ends("e")) {
    const std::size_t stem = w.size() - 1;
    const int m = measure(stem);
    if (m > 1 || (m == 1 && !cvc(stem))) w.resize(stem);
  }
  if (measure(w.size()) > 1 && double_cons(w.size()) && ends("l")) w.resize(w.size() - 1);
  return w;
}

enum class MeteorMatcher { kExact, kExactStem };

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};

/// Maximum-cardinality unigram alignment with the fewest chunks. Exact
/// matches are taken first; with the stem matcher, still-unmatched tokens
/// are then paired by Porter stem. The chunk minimum is found by exhaustive
/// search with pruning; `budget` caps the number of search nodes, after
/// which the best alignment so far is used.
inline MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref, MeteorMatcher matcher,
                                    long budget = 2'000'000) {
  const std::size_t n = cand.size();
  std::vector<std::vector<int>> options(n);  // reference positions each candidate token may take
  std::map<std::string, int> exact_matches;
  {
    std::map<std::string, int> cc, rc;
    for (const auto& t : cand) ++cc[t];
    for (const auto& t : ref) ++rc[t];
    for (const auto& [k, v] : cc)
      if (rc.count(k)) exact_matches[k] = std::min(v, rc[k]);
  }
  int total = 0;
  for (const auto& [k, v] : exact_matches) total += v;
  // Which candidate tokens can be matched by stem after exact matching:
  // tokens of a word type in excess of its exact matches, against reference
  // tokens of a type in excess of its exact matches.
  std::vector<std::string> cstem(n), rstem(ref.size());
  if (matcher == MeteorMatcher::kExactStem) {
    for (std::size_t i = 0; i < n; ++i) cstem[i] = porter_stem(cand[i]);
    for (std::size_t j = 0; j < ref.size(); ++j) rstem[j] = porter_stem(ref[j]);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (cand[i] == ref[j]) options[i].push_back(static_cast<int>(j));

  // Stem-stage capacity per stem class among leftover tokens.
  std::map<std::string, int> stem_matches;
  if (matcher == MeteorMatcher::kExactStem) {
    std::map<std::string, int> cc, rc;
    for (const auto& t : cand) ++cc[t];
    for (const auto& t : ref) ++rc[t];
    std::map<std::string, int> cs, rs;
    for (const auto& [k, v] : cc) {
      const int left = v - (exact_matches.count(k) ? exact_matches[k] : 0);
      if (left > 0) cs[porter_stem(k)] += left;
    }
    for (const auto& [k, v] : rc) {
      const int left = v - (exact_matches.count(k) ? exact_matches[k] : 0);
      if (left > 0) rs[porter_stem(k)] += left;
    }
    for (const auto& [k, v] : cs)
      if (rs.count(k)) stem_matches[k] = std::min(v, rs[k]);
    for (const auto& [k, v] : stem_matches) total += v;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < ref.size(); ++j)
        if (cand[i] != ref[j] && cstem[i] == rstem[j] && stem_matches.count(cstem[i]))
          options[i].push_back(static_cast<int>(j));
  }
  if (total == 0) return {0, 0};

  // DFS over candidate positions. Each position is either left unmatched or
  // assigned a free reference slot; exact pairs consume the word's exact
  // quota, stem pairs the stem quota. Only full-cardinality assignments
  // count; among them the chunk count is minimized.
  std::vector<char> used(ref.size(), 0);
  std::map<std::string, int> exact_left = exact_matches, stem_left = stem_matches;
  int best = -1;
  long nodes = 0;
  std::function<void(std::size_t, int, int)> dfs = [&](std::size_t i, int chunks, int prev_ref) {
    if (++nodes > budget && best >= 0) return;
    if (best >= 0 && chunks >= best) return;
    int remaining_quota = 0;
    for (const auto& [k, v] : exact_left) remaining_quota += v;
    for (const auto& [k, v] : stem_left) remaining_quota += v;
    if (remaining_quota == 0) {
      best = chunks;
      return;
    }
    if (i == n || static_cast<int>(n - i) < remaining_quota) return;
    for (int j : options[i]) {
      if (used[static_cast<std::size_t>(j)]) continue;
      const bool exact = cand[i] == ref[static_cast<std::size_t>(j)];
      int& quota = exact ? exact_left[cand[i]] : stem_left[cstem[i]];
      if (quota == 0) continue;
      --quota;
      used[static_cast<std::size_t>(j)] = 1;
      const bool extends = prev_ref >= 0 && j == prev_ref + 1;
      dfs(i + 1, chunks + (extends ? 0 : 1), j);
      used[static_cast<std::size_t>(j)] = 0;
      ++quota;
    }
    dfs(i + 1, chunks, -1);
  };
  dfs(0, 0, -1);
  return {total, best < 0 ? total : best};
}

inline double meteor(const Tokens& cand, const Tokens& ref, MeteorMatcher matcher = MeteorMatcher::kExact) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto al = meteor_align(cand, ref, matcher);
  if (al.matches == 0) return 0.0;
  const double m = al.matches;
  const double p = m / static_cast<double>(cand.size()), r = m / static_cast<double>(ref.size());
  const double alpha = 0.9;
  const double fmean = p * r / (alpha * p + (1 - alpha) * r);
  const double frag = static_cast<double>(al.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1 - penalty);
}

inline double distinct_1(const std::vector<Tokens>& corpus) {
  std::set<std::string> uniq;
  std::size_t total = 0;
  for (const auto& t : corpus) {
    uniq.insert(t.begin(), t.end());
    total += t.size();
  }
  if (total == 0) fail(ErrorCode::kEmptyCorpus, "distinct-1 needs at least one token");
  return static_cast<double>(uniq.size()) / static_cast<double>(total);
}

/// Per-token log-probabilities of a response under some language model.
class LmScorer {
 public:
  virtual ~LmScorer() = default;
  virtual std::vector<double> token_logprobs(const std::string& response) const = 0;
  virtual std::string name() const = 0;
};

/// exp(total NLL / total tokens), pooled over all responses.
inline double perplexity(const LmScorer& scorer, const std::vector<std::string>& responses) {
  double nll = 0;
  std::size_t count = 0;
  for (const auto& r : responses) {
    std::vector<double> lp;
    try {
      lp = scorer.token_logprobs(r);
    } catch (const Error& e) {
      fail(ErrorCode::kScorerFailure, scorer.name() + ": " + e.message());
    } catch (const std::exception& e) {
      fail(ErrorCode::kScorerFailure, scorer.name() + ": " + e.what());
    }
    for (double v : lp) {
      if (!std::isfinite(v) || v > 1e-12) fail(ErrorCode::kScorerFailure, scorer.name() + " returned an invalid log-probability");
      nll -= v;
    }
    count += lp.size();
  }
  if (count == 0) fail(ErrorCode::kScorerFailure, "scorer produced no tokens");
  return std::exp(nll / static_cast<double>(count));
}

class EmotionEmbedder {
 public:
  virtual ~EmotionEmbedder() = default;
  /// Unit-norm vector, or all zeros for text without emotional content.
  virtual std::vector<double> embed(const std::string& text) const = 0;
};

/// Counts emotion-lexicon hits per emotion dimension and normalizes.
class LexiconEmbedder : public EmotionEmbedder {
 public:
  static constexpr std::array<const char*, 7> kDimensions{"happy", "sad",   "surprised", "fearful",
                                                          "disgusted", "angry", "neutral"};

  LexiconEmbedder() {
    const std::vector<std::vector<std::string>> words{
        {"happy", "joy", "joyful", "glad", "great", "wonderful", "delighted", "love", "excited", "fun", "smile",
         "pleased", "awesome", "congratulations"},
        {"sad", "sorry", "unhappy", "terribly", "miss", "lonely", "cry", "tears", "loss", "grief", "down",
         "heartbroken", "sadness"},
        {"surprised", "wow", "unexpected", "amazing", "suddenly", "shocked", "really", "surprise", "incredible"},
        {"afraid", "scared", "fear", "fearful", "worried", "nervous", "safe", "panic", "terrified", "anxious"},
        {"disgusted", "gross", "unpleasant", "awful", "nasty", "disgusting", "yuck", "revolting"},
        {"angry", "mad", "furious", "frustration", "annoyed", "hate", "rage", "unfair", "irritated"},
        {"okay", "ok", "fine", "calm", "see", "understand", "alright", "sure"}};
    for (std::size_t d = 0; d < words.size(); ++d)
      for (const auto& w : words[d]) lexicon_[w] = d;
  }

  std::vector<double> embed(const std::string& text) const override {
    std::vector<double> v(kDimensions.size(), 0.0);
    for (const auto& t : metric_tokenize(text)) {
      auto it = lexicon_.find(t);
      if (it != lexicon_.end()) v[it->second] += 1;
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    if (norm > 0)
      for (double& x : v) x /= std::sqrt(norm);
    return v;
  }

 private:
  std::map<std::string, std::size_t> lexicon_;
};

struct SimilarityResult {
  double score = 0;     // clipped to [0, 1]
  double cosine = 0;    // raw, in [-1, 1]
  bool zero_vector = false;
};

inline SimilarityResult emotion_similarity(const EmotionEmbedder& e, const std::string& hyp, const std::string& ref) {
  const auto a = e.embed(hyp), b = e.embed(ref);
  if (a.size() != b.size()) fail(ErrorCode::kShapeMismatch, "embedder returned vectors of different sizes");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return {0.0, 0.0, true};
  const double cos = dot / std::sqrt(na * nb);
  return {std::clamp(cos, 0.0, 1.0), cos, false};
}

}  // namespace avemo
