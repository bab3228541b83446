// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>

#include "qadapt/errors.hpp"
#include "qadapt/kernels.hpp"
#include "qadapt/pipeline.hpp"
#include "unit/support.hpp"

using namespace qadapt;
using qadapt::test::random_tensor;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.d = 8;
  m.heads = 2;
  m.depth = 2;
  m.decoder_depth = 1;
  m.height = 8;
  m.width = 8;
  m.frames = 2;
  m.vocab = 40;
  return m;
}

VideoClip clip_for(const ModelConfig& m, std::uint64_t seed) {
  SceneProgram prog = program_at(static_cast<int>(seed % kProgramSpace));
  prog.informative.assign(static_cast<std::size_t>(m.frames), true);
  return render_clip(prog, RenderConfig{m.height, m.width, m.channels, m.frames}, seed, "clip");
}

void zero_all(ParamStore& store) {
  for (auto& p : store.params()) p.value = Tensor::zeros(p.value.shape());
}

}  // namespace

TEST_CASE("temporal fusion") {
  Rng rng(1);
  ad::Tape tape;
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const std::array one{TokenMap{tape.constant(a), 0}};
  const std::array two{TokenMap{tape.constant(a), 0}, TokenMap{tape.constant(b), 1}};
  const std::array same{TokenMap{tape.constant(a), 0}, TokenMap{tape.constant(a), 1}};

  CHECK(temporal_fuse(one, FusionMode::Concat).z.value() == a);
  CHECK(temporal_fuse(one, FusionMode::Mean).z.value() == a);
  CHECK(max_abs_diff(temporal_fuse(same, FusionMode::Mean).z.value(), a) <= 1e-15);

  const Tensor cat = temporal_fuse(two, FusionMode::Concat).z.value();
  REQUIRE(cat.shape() == Shape{6, 4});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(cat.at(i, c) == a.at(i, c));
      CHECK(cat.at(3 + i, c) == b.at(i, c));
    }
  }
  CHECK(temporal_fuse(two, FusionMode::Mean).z.shape() == Shape{3, 4});

  const std::array bad{TokenMap{tape.constant(a), 0}, TokenMap{tape.constant(random_tensor({2, 4}, rng)), 1}};
  CHECK_THROWS_AS(temporal_fuse(bad, FusionMode::Concat), DimensionError);
  CHECK_THROWS_AS(temporal_fuse(std::span<const TokenMap>{}, FusionMode::Concat), ContractError);
}

TEST_CASE("context assembly") {
  const ModelConfig m;
  ParamStore store;
  init_backbone(store, m, 2);
  Rng rng(3);
  ad::Tape tape;
  Binder bind(tape, store);
  const std::array prompt{5, 6, 7, 8, 9};
  std::vector<TokenMap> frames;
  for (int t = 0; t < 4; ++t) frames.push_back({tape.constant(random_tensor({16, 32}, rng)), t});
  const FusedVideo video = temporal_fuse(frames, FusionMode::Concat);
  const ad::Var ctx = assemble_context(bind, prompt, video, m);
  CHECK(ctx.shape() == Shape{69, 32});

  SUBCASE("empty video") {
    CHECK_THROWS_AS(assemble_context(bind, prompt, FusedVideo{}, m), ContractError);
  }
  SUBCASE("prompt rows first, then video rows, each with its position") {
    const Tensor& c = ctx.value();
    const Tensor& tok = store.value("dec.tok");
    const Tensor& pos = store.value("dec.ctx_pos");
    const Tensor& v = video.z.value();
    for (std::size_t r = 0; r < 69; ++r) {
      for (std::size_t k = 0; k < 32; ++k) {
        const double base = r < 5 ? tok.at(static_cast<std::size_t>(prompt[r]), k) : v.at(r - 5, k);
        CHECK(c.at(r, k) == base + pos.at(r, k));
      }
    }
  }
}

TEST_CASE("caption loss") {
  ad::Tape tape;
  SUBCASE("uniform logits") {
    const std::array ref{5, 6, 7, 8, 9, 10, kEosId};
    const double loss = caption_loss(tape.constant(Tensor::zeros({7, 64})), ref).value().item();
    CHECK(std::abs(loss - 7.0 * std::log(64.0)) <= 1e-12);
  }
  SUBCASE("confident logits give zero loss") {
    const std::array ref{3, 1, 2};
    Tensor logits = Tensor::filled({3, 8}, -800.0);
    for (std::size_t i = 0; i < 3; ++i) logits.at(i, static_cast<std::size_t>(ref[i])) = 800.0;
    CHECK(caption_loss(tape.constant(logits), ref).value().item() == 0.0);
  }
  SUBCASE("loop oracle and PAD skipping") {
    Rng rng(4);
    const Tensor logits = random_tensor({5, 9}, rng, 2.0);
    const std::array ref{3, kPadId, 8, 1, kEosId};
    double expect = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      if (ref[i] == kPadId) continue;
      double hi = -1e300;
      for (std::size_t j = 0; j < 9; ++j) hi = std::max(hi, logits.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < 9; ++j) z += std::exp(logits.at(i, j) - hi);
      expect -= logits.at(i, static_cast<std::size_t>(ref[i])) - hi - std::log(z);
    }
    const double got = caption_loss(tape.constant(logits), ref).value().item();
    CHECK(std::abs(got - expect) <= 1e-12);
    CHECK(got >= 0.0);
  }
  SUBCASE("length mismatch") {
    const std::array ref{3, 4};
    CHECK_THROWS_AS(caption_loss(tape.constant(Tensor::zeros({3, 8})), ref), DimensionError);
  }
}

TEST_CASE("greedy generation") {
  const ModelConfig m = small_model();
  CaptionModel cm = make_caption_model(m, FusionMode::Concat, {kBosId}, 5);
  const VideoClip clip = clip_for(m, 6);

  SUBCASE("repeat calls agree") { CHECK(generate(cm, clip, 8) == generate(cm, clip, 8)); }
  SUBCASE("immediate EOS") {
    zero_all(cm.params);
    Tensor bias = Tensor::zeros({40});
    bias[kEosId] = 5.0;
    cm.params.value("dec.out.b") = bias;
    CHECK(generate(cm, clip, 8).empty());
  }
  SUBCASE("length cap") {
    zero_all(cm.params);
    Tensor bias = Tensor::zeros({40});
    bias[7] = 5.0;
    cm.params.value("dec.out.b") = bias;
    CHECK(generate(cm, clip, 3) == std::vector<int>{7, 7, 7});
  }
  SUBCASE("ties go to the lowest id") {
    zero_all(cm.params);
    Tensor bias = Tensor::zeros({40});
    bias[9] = bias[4] = bias[30] = 5.0;
    cm.params.value("dec.out.b") = bias;
    CHECK(generate(cm, clip, 2) == std::vector<int>{4, 4});
  }
  CHECK_THROWS_AS(generate(cm, clip, 0), ContractError);
}

TEST_CASE("frame sampling") {
  CHECK(uniform_frames(4, 4) == std::vector<int>{0, 1, 2, 3});
  CHECK(uniform_frames(1, 1) == std::vector<int>{0});
  CHECK_THROWS_AS(uniform_frames(2, 3), ContractError);
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_frames(8, 4, rng);
    REQUIRE(f.size() == 4);
    for (std::size_t i = 1; i < f.size(); ++i) CHECK(f[i - 1] < f[i]);
    CHECK(f.front() >= 0);
    CHECK(f.back() < 8);
  }
  CHECK(caption_words(std::vector<int>{kBosId, 5, 6, kEosId}) == std::vector<int>{5, 6});
}
