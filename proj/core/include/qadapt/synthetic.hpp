// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "qadapt/backbone.hpp"
#include "qadapt/vocab.hpp"

namespace qadapt {

enum class ShapeKind { Square, Bar, Dot };
enum class Color { Red, Green, Blue };
enum class Motion { Left, Right, Up, Down, Still };
enum class Speed { Slow, Fast };
enum class Grammar { A, B };

std::string_view shape_name(ShapeKind s);
std::string_view color_name(Color c);
std::string_view motion_name(Motion m);
std::string_view speed_name(Speed s);
std::string_view grammar_name(Grammar g);
Grammar grammar_from_name(std::string_view name);

struct SceneProgram {
  ShapeKind shape = ShapeKind::Square;
  Color color = Color::Red;
  Motion motion = Motion::Still;
  Speed speed = Speed::Slow;
  /// One flag per frame; true frames show the object, the rest are noise.
  std::vector<bool> informative;

  bool operator==(const SceneProgram&) const = default;
};

/// Number of distinct (shape, color, motion, speed) combinations.
inline constexpr int kProgramSpace = 3 * 3 * 5 * 2;
/// The i-th combination in a fixed enumeration, with an empty mask.
SceneProgram program_at(int index);

/// The fixed prompt "what is shown in this video?".
inline constexpr std::string_view kPromptText = "what is shown in this video?";

/// Prompt words, template words and every scene attribute, padded to `size`.
Vocabulary caption_vocabulary(std::size_t size);

struct RenderConfig {
  int height = 16;
  int width = 16;
  int channels = 3;
  int frames = 4;
};

/// Frames showing the object at motion-determined positions; uninformative
/// frames hold uniform noise drawn from `seed`.
VideoClip render_clip(const SceneProgram& prog, const RenderConfig& cfg, std::uint64_t seed, std::string id = {});

/// Grammar A: "a <color> <shape> moves <motion> <speed>".
/// Grammar B: "the <speed> <color> <shape> is moving <motion>".
std::string caption_text(const SceneProgram& prog, Grammar grammar);
/// BOS, caption tokens, EOS.
std::vector<int> caption_of(const SceneProgram& prog, Grammar grammar, const Vocabulary& vocab);

/// Informative mask with floor(rho T) frames plus one more with probability
/// equal to the fractional part, at least one, at random positions.
std::vector<bool> sample_mask(int frames, double sparsity, Rng& rng);

struct CaptionSample {
  VideoClip clip;
  std::vector<int> prompt;
  /// BOS ... EOS.
  std::vector<int> caption;
  SceneProgram program;
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  int n = 32;
  Grammar grammar = Grammar::A;
  double sparsity = 0.5;
  RenderConfig render{};
};

/// Programs come from a seeded permutation of the program space; a fresh
/// permutation starts each time the space is exhausted.
std::vector<CaptionSample> make_dataset(const DatasetSpec& spec, const Vocabulary& vocab);

/// manifest.json, clips/<id>.bin (little-endian f64, frame-major H x W x C),
/// captions.jsonl. The manifest records `config_hash`.
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const std::vector<CaptionSample>& samples,
                   const Vocabulary& vocab, const std::string& config_hash);

struct LoadedDataset {
  DatasetSpec spec;
  std::string config_hash;
  std::vector<CaptionSample> samples;
};
LoadedDataset read_dataset(const std::filesystem::path& dir, const Vocabulary& vocab);

}  // namespace qadapt
