// SPDX-License-Identifier: Apache-2.0
#include "qadapt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <unordered_map>

#include "qadapt/errors.hpp"

namespace qadapt::metrics {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                             t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

void require_references(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw ContractError("metric needs at least one caption pair");
  for (const auto& p : pairs) {
    if (p.references.empty()) throw ContractError("caption pair without references");
  }
}

std::size_t closest_length(std::size_t c, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > c ? len - c : c - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

BleuDetail bleu_from_counts(const BleuDetail& counts) {
  BleuDetail out = counts;
  out.score = 0.0;
  out.brevity_penalty = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (out.matches[n] == 0) out.zero_order = true;
  }
  if (out.candidate_length == 0) return out;
  out.brevity_penalty = out.candidate_length >= out.reference_length
                            ? 1.0
                            : std::exp(1.0 - static_cast<double>(out.reference_length) /
                                                 static_cast<double>(out.candidate_length));
  if (out.zero_order) return out;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    log_sum += std::log(static_cast<double>(out.matches[n]) / static_cast<double>(out.totals[n]));
  }
  out.score = out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

void accumulate_bleu(const EvalPair& p, BleuDetail& acc) {
  acc.candidate_length += p.candidate.size();
  acc.reference_length += closest_length(p.candidate.size(), p.references);
  for (std::size_t n = 1; n <= 4; ++n) {
    const NgramCounts cand = ngrams(p.candidate, n);
    NgramCounts max_ref;
    for (const auto& r : p.references) {
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : cand) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) acc.matches[n - 1] += std::min(c, it->second);
      acc.totals[n - 1] += c;
    }
  }
}

double f_measure(std::size_t hit, std::size_t cand_len, std::size_t ref_len, double beta) {
  if (hit == 0 || cand_len == 0 || ref_len == 0) return 0.0;
  const double p = static_cast<double>(hit) / static_cast<double>(cand_len);
  const double r = static_cast<double>(hit) / static_cast<double>(ref_len);
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

using TfIdf = std::map<Tokens, double>;

double cosine(const TfIdf& a, const TfIdf& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, v] : a) {
    na += v * v;
    auto it = b.find(g);
    if (it != b.end()) dot += v * it->second;
  }
  for (const auto& [g, v] : b) nb += v * v;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

struct MeteorSearch {
  const Tokens& cand;
  const Tokens& ref;
  std::map<std::string, std::size_t> skip_budget;
  std::vector<bool> used;
  std::size_t best = std::numeric_limits<std::size_t>::max();

  // Places candidate token i; (li, lj) is the last matched pair, chunks the
  // count so far.
  void run(std::size_t i, std::ptrdiff_t li, std::ptrdiff_t lj, std::size_t chunks) {
    if (chunks >= best) return;
    if (i == cand.size()) {
      best = chunks;
      return;
    }
    const std::string& w = cand[i];
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || ref[j] != w) continue;
      used[j] = true;
      const bool extends = li == static_cast<std::ptrdiff_t>(i) - 1 && lj == static_cast<std::ptrdiff_t>(j) - 1;
      run(i + 1, static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j), chunks + (extends ? 0 : 1));
      used[j] = false;
    }
    auto& budget = skip_budget[w];
    if (budget > 0) {
      --budget;
      run(i + 1, li, lj, chunks);
      ++budget;
    }
  }
};

}  // namespace

BleuDetail bleu4_detail(std::span<const EvalPair> pairs) {
  require_references(pairs);
  BleuDetail acc;
  for (const auto& p : pairs) accumulate_bleu(p, acc);
  return bleu_from_counts(acc);
}

double bleu4(std::span<const EvalPair> pairs) { return bleu4_detail(pairs).score; }

double bleu4_sentence(const EvalPair& pair) { return bleu4(std::span<const EvalPair>(&pair, 1)); }

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const EvalPair& pair, double beta) {
  if (pair.references.empty()) throw ContractError("caption pair without references");
  double best = 0.0;
  for (const auto& r : pair.references) {
    best = std::max(best, f_measure(lcs_length(pair.candidate, r), pair.candidate.size(), r.size(), beta));
  }
  return best;
}

double rouge_l(std::span<const EvalPair> pairs, double beta) {
  require_references(pairs);
  double sum = 0.0;
  for (const auto& p : pairs) sum += rouge_l(p, beta);
  return sum / static_cast<double>(pairs.size());
}

std::vector<double> cider_per_pair(std::span<const EvalPair> pairs) {
  require_references(pairs);
  if (pairs.size() < 2) throw ContractError("CIDEr needs a corpus of at least two clips");
  const double log_clips = std::log(static_cast<double>(pairs.size()));
  std::vector<double> scores(pairs.size(), 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<Tokens, std::size_t> df;
    for (const auto& p : pairs) {
      std::map<Tokens, bool> seen;
      for (const auto& r : p.references) {
        for (const auto& [g, c] : ngrams(r, n)) seen[g] = true;
      }
      for (const auto& [g, b] : seen) ++df[g];
    }
    auto weigh = [&](const Tokens& t) {
      TfIdf v;
      for (const auto& [g, c] : ngrams(t, n)) {
        auto it = df.find(g);
        const double d = it == df.end() ? 1.0 : static_cast<double>(it->second);
        v[g] = static_cast<double>(c) * (log_clips - std::log(d));
      }
      return v;
    };
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const TfIdf cand = weigh(pairs[i].candidate);
      double sum = 0.0;
      for (const auto& r : pairs[i].references) sum += cosine(cand, weigh(r));
      scores[i] += sum / static_cast<double>(pairs[i].references.size());
    }
  }
  for (double& s : scores) s = 10.0 * s / 4.0;
  return scores;
}

double cider(std::span<const EvalPair> pairs) {
  const auto s = cider_per_pair(pairs);
  double sum = 0.0;
  for (double x : s) sum += x;
  return sum / static_cast<double>(s.size());
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  std::map<std::string, std::size_t> cc, rc;
  for (const auto& w : candidate) ++cc[w];
  for (const auto& w : reference) ++rc[w];
  MeteorSearch search{candidate, reference, {}, std::vector<bool>(reference.size(), false)};
  std::size_t matches = 0;
  for (const auto& [w, c] : cc) {
    const std::size_t r = rc.contains(w) ? rc[w] : 0;
    matches += std::min(c, r);
    search.skip_budget[w] = c - std::min(c, r);
  }
  if (matches == 0) return {};
  search.run(0, -2, -2, 0);
  return MeteorAlignment{matches, search.best};
}

double meteor_exact(const EvalPair& pair) {
  if (pair.references.empty()) throw ContractError("caption pair without references");
  double best = 0.0;
  for (const auto& r : pair.references) {
    const MeteorAlignment a = meteor_align(pair.candidate, r);
    if (a.matches == 0) continue;
    const double p = static_cast<double>(a.matches) / static_cast<double>(pair.candidate.size());
    const double rec = static_cast<double>(a.matches) / static_cast<double>(r.size());
    const double fmean = 10.0 * p * rec / (rec + 9.0 * p);
    const double frag = static_cast<double>(a.chunks) / static_cast<double>(a.matches);
    const double penalty = 0.5 * frag * frag * frag;
    best = std::max(best, fmean * (1.0 - penalty));
  }
  return best;
}

double meteor_exact(std::span<const EvalPair> pairs) {
  require_references(pairs);
  double sum = 0.0;
  for (const auto& p : pairs) sum += meteor_exact(p);
  return sum / static_cast<double>(pairs.size());
}

Summary evaluate(std::span<const EvalPair> pairs) {
  Summary s;
  const BleuDetail b = bleu4_detail(pairs);
  s.bleu4 = b.score;
  s.bleu_zero_order = b.zero_order;
  const auto cid = cider_per_pair(pairs);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ClipScores c{bleu4_sentence(pairs[i]), meteor_exact(pairs[i]), rouge_l(pairs[i]), cid[i]};
    s.meteor_exact += c.meteor_exact;
    s.rouge_l += c.rouge_l;
    s.cider += c.cider;
    s.per_clip.push_back(c);
  }
  const double n = static_cast<double>(pairs.size());
  s.meteor_exact /= n;
  s.rouge_l /= n;
  s.cider /= n;
  return s;
}

}  // namespace qadapt::metrics
