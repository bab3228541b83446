// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "qadapt/errors.hpp"
#include "qadapt/metrics.hpp"
#include "qadapt/rng.hpp"
#include "qadapt/vocab.hpp"
#include "unit/metric_oracles.hpp"

using namespace qadapt;
using metrics::EvalPair;
using metrics::Tokens;
using namespace qadapt::test;

TEST_CASE("metrics match brute-force oracles on random toy pairs") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto pairs = random_pairs(seed, 20);
    for (const auto& p : pairs) {
      const std::vector<EvalPair> one{p};
      CHECK(std::abs(metrics::bleu4_sentence(p) - oracle_bleu(one)) <= 1e-9);
      CHECK(std::abs(metrics::rouge_l(p) - oracle_rouge(p)) <= 1e-9);
      CHECK(std::abs(metrics::meteor_exact(p) - oracle_meteor(p)) <= 1e-9);
      for (const auto& ref : p.references) {
        const auto a = metrics::meteor_align(p.candidate, ref);
        const auto [m, ch] = oracle_align(p.candidate, ref);
        CHECK(a.matches == m);
        CHECK(a.chunks == ch);
        CHECK(metrics::lcs_length(p.candidate, ref) == oracle_lcs(p.candidate, 0, ref, 0));
      }
    }
    CHECK(std::abs(metrics::bleu4(pairs) - oracle_bleu(pairs)) <= 1e-9);
    const auto got = metrics::cider_per_pair(pairs), want = oracle_cider(pairs);
    for (std::size_t i = 0; i < pairs.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9);
  }
}

TEST_CASE("BLEU examples") {
  const auto same = pair("a red square moves left fast", {"a red square moves left fast"});
  CHECK(metrics::bleu4_sentence(same) == 1.0);
  CHECK(metrics::bleu4_sentence(pair("the slow dot", {"a red square moves"})) == 0.0);

  const std::vector<EvalPair> one{pair("a red square moves left fast", {"a red square moves right fast"})};
  const auto d = metrics::bleu4_detail(one);
  // Unigrams 5/6, bigrams 3/5, trigrams 2/4, 4-grams 1/3.
  CHECK(d.matches == std::array<std::size_t, 4>{5, 3, 2, 1});
  CHECK(d.totals == std::array<std::size_t, 4>{6, 5, 4, 3});
  CHECK(d.brevity_penalty == 1.0);
  const double expect = std::pow(5.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0, 0.25);
  CHECK(std::abs(d.score - expect) <= 1e-15);
  CHECK(d.score == oracle_bleu(one));

  const std::vector<EvalPair> no_quad{pair("a red square", {"a red square moves"})};
  CHECK(metrics::bleu4_detail(no_quad).zero_order);
  CHECK(metrics::bleu4(no_quad) == 0.0);
}

TEST_CASE("ROUGE-L examples") {
  CHECK(metrics::rouge_l(pair("a b c d", {"a b c d"})) == 1.0);
  CHECK(metrics::lcs_length(tokenize("a b c d"), tokenize("a c b d")) == 3);
  CHECK(std::abs(metrics::rouge_l(pair("a b c d", {"a c b d"})) - 0.75) <= 1e-15);
  CHECK(metrics::rouge_l(pair("a b", {"c d"})) == 0.0);
  CHECK(metrics::rouge_l(pair("a b c d", {"x y", "a b c d"})) == 1.0);
}

TEST_CASE("CIDEr examples") {
  const std::vector<EvalPair> corpus{pair("a red square moves left fast", {"a red square moves left fast"}),
                                     pair("the slow blue dot is moving up", {"the slow blue dot is moving up"})};
  const auto s = metrics::cider_per_pair(corpus);
  CHECK(std::abs(s[0] - 10.0) <= 1e-12);
  CHECK(std::abs(s[1] - 10.0) <= 1e-12);
  const std::vector<EvalPair> disjoint{pair("x y z", {"a red square moves left fast"}),
                                       pair("the slow blue dot is moving up", {"the slow blue dot is moving up"})};
  CHECK(metrics::cider_per_pair(disjoint)[0] == 0.0);
  const std::vector<EvalPair> single{corpus[0]};
  CHECK_THROWS_AS(metrics::cider(single), ContractError);

  const auto three = random_pairs(99, 3);
  const auto got = metrics::cider_per_pair(three), want = oracle_cider(three);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9);
}

TEST_CASE("METEOR-exact examples") {
  const double n = 6.0;
  CHECK(std::abs(metrics::meteor_exact(pair("a red square moves left fast", {"a red square moves left fast"})) -
                 (1.0 - 0.5 / (n * n * n))) <= 1e-15);
  CHECK(metrics::meteor_exact(pair("a b", {"c d"})) == 0.0);
  const auto a = metrics::meteor_align(tokenize("a b"), tokenize("b a"));
  CHECK(a.matches == 2);
  CHECK(a.chunks == 2);
  CHECK(std::abs(metrics::meteor_exact(pair("a b", {"b a"})) - 0.5) <= 1e-15);
}

TEST_CASE("corpus scores ignore clip order") {
  auto pairs = random_pairs(5, 12);
  const auto before = metrics::evaluate(pairs);
  std::reverse(pairs.begin(), pairs.end());
  const auto after = metrics::evaluate(pairs);
  CHECK(before.bleu4 == after.bleu4);
  CHECK(std::abs(before.rouge_l - after.rouge_l) <= 1e-15);
  CHECK(std::abs(before.meteor_exact - after.meteor_exact) <= 1e-15);
  CHECK(std::abs(before.cider - after.cider) <= 1e-12);
}

TEST_CASE("appending a reference n-gram never lowers clipped counts") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_pairs(100 + static_cast<std::uint64_t>(trial), 1)[0];
    const std::vector<EvalPair> before{p};
    const auto d0 = metrics::bleu4_detail(before);
    const Tokens& ref = p.references[0];
    const std::size_t n = 1 + rng.below(std::min<std::size_t>(4, ref.size()));
    const std::size_t at = rng.below(ref.size() - n + 1);
    p.candidate.insert(p.candidate.end(), ref.begin() + static_cast<std::ptrdiff_t>(at),
                       ref.begin() + static_cast<std::ptrdiff_t>(at + n));
    const std::vector<EvalPair> after{p};
    const auto d1 = metrics::bleu4_detail(after);
    for (std::size_t k = 0; k < 4; ++k) CHECK(d1.matches[k] >= d0.matches[k]);
  }
}

TEST_CASE("scores stay in range") {
  const auto pairs = random_pairs(7, 20);
  const auto s = metrics::evaluate(pairs);
  for (const auto& c : s.per_clip) {
    CHECK((c.bleu4 >= 0.0 && c.bleu4 <= 1.0));
    CHECK((c.rouge_l >= 0.0 && c.rouge_l <= 1.0));
    CHECK((c.meteor_exact >= 0.0 && c.meteor_exact <= 1.0));
    CHECK((c.cider >= 0.0 && c.cider <= 10.0 + 1e-12));
  }
}
