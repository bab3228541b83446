// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

namespace qadapt::metrics {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens candidate;
  /// At least one.
  std::vector<Tokens> references;
};

struct BleuDetail {
  double score = 0.0;
  double brevity_penalty = 0.0;
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  /// Some n-gram order had no match, so the unsmoothed score is 0.
  bool zero_order = false;
};

/// Corpus BLEU with clipped counts for n = 1..4, uniform weights, closest
/// reference length and no smoothing.
BleuDetail bleu4_detail(std::span<const EvalPair> pairs);
double bleu4(std::span<const EvalPair> pairs);

/// Sentence-level BLEU@4 of one pair (reported per clip).
double bleu4_sentence(const EvalPair& pair);

inline constexpr double kRougeBeta = 1.2;

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS F-measure, best over references.
double rouge_l(const EvalPair& pair, double beta = kRougeBeta);
/// Mean over pairs.
double rouge_l(std::span<const EvalPair> pairs, double beta = kRougeBeta);

/// TF-IDF n-gram cosine averaged over n = 1..4 and references, times 10, per
/// pair. Document frequencies come from the reference sets of `pairs`, which
/// must hold at least two clips.
std::vector<double> cider_per_pair(std::span<const EvalPair> pairs);
double cider(std::span<const EvalPair> pairs);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};
/// Maximum exact unigram matching with the fewest chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
/// Exact-match METEOR, best over references.
double meteor_exact(const EvalPair& pair);
/// Mean over pairs.
double meteor_exact(std::span<const EvalPair> pairs);

struct ClipScores {
  double bleu4 = 0.0;
  double meteor_exact = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

struct Summary {
  double bleu4 = 0.0;
  double meteor_exact = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  bool bleu_zero_order = false;
  std::vector<ClipScores> per_clip;
};

/// All four metrics; throws like cider() on single-clip corpora.
Summary evaluate(std::span<const EvalPair> pairs);

}  // namespace qadapt::metrics
