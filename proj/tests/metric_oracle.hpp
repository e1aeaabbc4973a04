#pragma once

// Naive reference implementations of the text metrics, written with plain
// nested loops and exhaustive enumeration. Only suitable for short inputs.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "avemo/metrics.hpp"

namespace avemo::test_support {

inline bool same_ngram(const Tokens& a, std::size_t i, const Tokens& b, std::size_t j, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k)
    if (a[i + k] != b[j + k]) return false;
  return true;
}

inline long count_ngram(const Tokens& hay, const Tokens& src, std::size_t at, std::size_t n) {
  long c = 0;
  for (std::size_t j = 0; j + n <= hay.size(); ++j)
    if (same_ngram(hay, j, src, at, n)) ++c;
  return c;
}

/// Clipped matched count and candidate total for order n, single reference.
inline std::pair<long, long> naive_tally(const Tokens& cand, const Tokens& ref, std::size_t n) {
  long matched = 0, total = 0;
  for (std::size_t i = 0; i + n <= cand.size(); ++i) {
    ++total;
    bool first = true;
    for (std::size_t p = 0; p < i; ++p)
      if (same_ngram(cand, p, cand, i, n)) first = false;
    if (!first) continue;
    matched += std::min(count_ngram(cand, cand, i, n), count_ngram(ref, cand, i, n));
  }
  return {matched, total};
}

inline double naive_bleu(const Tokens& cand, const Tokens& ref, int n) {
  if (cand.empty()) return 0.0;
  double prod = 1.0;
  for (int k = 1; k <= n; ++k) {
    const auto [m, t] = naive_tally(cand, ref, static_cast<std::size_t>(k));
    if (m == 0) return 0.0;
    prod *= static_cast<double>(m) / static_cast<double>(t);
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::pow(prod, 1.0 / n);
}

/// LCS by trying every subsequence of `a`.
inline std::size_t naive_lcs(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else {
        ++j;
        ++len;
      }
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

inline double naive_rouge_l(const Tokens& c, const Tokens& r) {
  if (c.empty() || r.empty()) return 0.0;
  const double l = static_cast<double>(naive_lcs(c, r));
  if (l == 0) return 0.0;
  const double p = l / static_cast<double>(c.size()), rec = l / static_cast<double>(r.size());
  return 2 * p * rec / (p + rec);
}

/// Every injective alignment is enumerated. Preference: most matches, then
/// most exact matches, then fewest chunks.
inline std::pair<int, int> naive_meteor_alignment(const Tokens& cand, const Tokens& ref, bool stem) {
  std::vector<int> a(cand.size(), -1);
  std::vector<char> used(ref.size(), 0);
  int best_m = 0, best_e = 0, best_ch = 0;
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == cand.size()) {
      int m = 0, e = 0, ch = 0;
      int prev_i = -2, prev_j = -2;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        if (a[k] < 0) continue;
        ++m;
        if (cand[k] == ref[static_cast<std::size_t>(a[k])]) ++e;
        if (!(static_cast<int>(k) == prev_i + 1 && a[k] == prev_j + 1)) ++ch;
        prev_i = static_cast<int>(k);
        prev_j = a[k];
      }
      if (m > best_m || (m == best_m && (e > best_e || (e == best_e && ch < best_ch)))) {
        best_m = m;
        best_e = e;
        best_ch = ch;
      }
      return;
    }
    rec(i + 1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j]) continue;
      const bool ok = cand[i] == ref[j] || (stem && porter_stem(cand[i]) == porter_stem(ref[j]));
      if (!ok) continue;
      used[j] = 1;
      a[i] = static_cast<int>(j);
      rec(i + 1);
      a[i] = -1;
      used[j] = 0;
    }
  };
  rec(0);
  return {best_m, best_ch};
}

inline double naive_meteor(const Tokens& cand, const Tokens& ref, bool stem) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto [m, ch] = naive_meteor_alignment(cand, ref, stem);
  if (m == 0) return 0.0;
  const double p = static_cast<double>(m) / static_cast<double>(cand.size());
  const double r = static_cast<double>(m) / static_cast<double>(ref.size());
  const double f = p * r / (0.9 * p + 0.1 * r);
  const double frag = static_cast<double>(ch) / m;
  return f * (1 - 0.5 * frag * frag * frag);
}

inline double naive_distinct_1(const std::vector<Tokens>& corpus) {
  Tokens all;
  for (const auto& t : corpus) all.insert(all.end(), t.begin(), t.end());
  std::size_t uniq = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i; ++j)
      if (all[j] == all[i]) seen = true;
    if (!seen) ++uniq;
  }
  return static_cast<double>(uniq) / static_cast<double>(all.size());
}

/// Short token lists over a small vocabulary, so that repeats and partial
/// overlaps are common.
inline Tokens random_tokens(std::mt19937& rng, std::size_t max_len) {
  static const std::vector<std::string> vocab{"the", "cat", "cats", "sat", "on", "mat", "a", "run", "running"};
  std::uniform_int_distribution<std::size_t> len(0, max_len), pick(0, vocab.size() - 1);
  Tokens t(len(rng));
  for (auto& s : t) s = vocab[pick(rng)];
  return t;
}

struct OracleReport {
  int cases = 0;
  int mismatches = 0;
  std::string first_mismatch;
};

/// Compares the library metrics with the naive oracle on `cases` random
/// pairs. Integer quantities (tallies, LCS, alignment) must match exactly;
/// derived scores to 1e-12.
inline OracleReport run_metric_oracle(int cases, unsigned seed) {
  std::mt19937 rng(seed);
  OracleReport rep;
  auto miss = [&](const std::string& what, const Tokens& c, const Tokens& r) {
    ++rep.mismatches;
    if (rep.first_mismatch.empty()) {
      std::string s = what + " cand=[";
      for (const auto& t : c) s += t + " ";
      s += "] ref=[";
      for (const auto& t : r) s += t + " ";
      rep.first_mismatch = s + "]";
    }
  };
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  for (int k = 0; k < cases; ++k) {
    ++rep.cases;
    const Tokens c = random_tokens(rng, 7), r = random_tokens(rng, 7);
    for (int n = 1; n <= 4; ++n) {
      const auto t = ngram_tally(c, {r}, static_cast<std::size_t>(n));
      const auto [m, tot] = naive_tally(c, r, static_cast<std::size_t>(n));
      if (t.matched != m || t.total != tot) miss("tally" + std::to_string(n), c, r);
      if (!close(bleu_n(c, {r}, n), naive_bleu(c, r, n))) miss("bleu" + std::to_string(n), c, r);
    }
    if (lcs_length(c, r) != naive_lcs(c, r)) miss("lcs", c, r);
    if (!close(rouge_l(c, r), naive_rouge_l(c, r))) miss("rouge_l", c, r);
    for (bool stem : {false, true}) {
      const auto al = meteor_align(c, r, stem ? MeteorMatcher::kExactStem : MeteorMatcher::kExact);
      const auto [m, ch] = naive_meteor_alignment(c, r, stem);
      if (al.matches != m || (m > 0 && al.chunks != ch)) miss(stem ? "meteor-stem align" : "meteor align", c, r);
      const double got = meteor(c, r, stem ? MeteorMatcher::kExactStem : MeteorMatcher::kExact);
      if (!close(got, naive_meteor(c, r, stem))) miss(stem ? "meteor-stem" : "meteor", c, r);
    }
    std::vector<Tokens> corpus{c, r};
    if (!c.empty() || !r.empty())
      if (!close(distinct_1(corpus), naive_distinct_1(corpus))) miss("distinct_1", c, r);
  }
  return rep;
}

}  // namespace avemo::test_support
