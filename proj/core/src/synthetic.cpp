// SPDX-License-Identifier: Apache-2.0
#include "qadapt/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qadapt/errors.hpp"
#include "qadapt/io.hpp"

namespace qadapt {

namespace {

using json = nlohmann::json;

constexpr std::array<std::string_view, 3> kShapes = {"square", "bar", "dot"};
constexpr std::array<std::string_view, 3> kColors = {"red", "green", "blue"};
constexpr std::array<std::string_view, 5> kMotions = {"left", "right", "up", "down", "still"};
constexpr std::array<std::string_view, 2> kSpeeds = {"slow", "fast"};

template <typename E, std::size_t K>
E lookup(std::string_view name, const std::array<std::string_view, K>& names, const char* what) {
  for (std::size_t i = 0; i < K; ++i) {
    if (names[i] == name) return static_cast<E>(i);
  }
  throw IoError("unknown " + std::string(what) + " '" + std::string(name) + "'");
}

struct Extent {
  int h, w;
};

Extent object_extent(ShapeKind s) {
  switch (s) {
    case ShapeKind::Square:
      return {4, 4};
    case ShapeKind::Bar:
      return {2, 6};
    case ShapeKind::Dot:
      return {2, 2};
  }
  return {1, 1};
}

std::pair<int, int> direction(Motion m) {
  switch (m) {
    case Motion::Left:
      return {-1, 0};
    case Motion::Right:
      return {1, 0};
    case Motion::Up:
      return {0, -1};
    case Motion::Down:
      return {0, 1};
    case Motion::Still:
      return {0, 0};
  }
  return {0, 0};
}

std::string clip_id(std::uint64_t seed, int index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%llu-%05d", static_cast<unsigned long long>(seed), index);
  return buf;
}

json program_json(const SceneProgram& p) {
  json mask = json::array();
  for (bool b : p.informative) mask.push_back(b ? 1 : 0);
  return json{{"shape", shape_name(p.shape)},
              {"color", color_name(p.color)},
              {"motion", motion_name(p.motion)},
              {"speed", speed_name(p.speed)},
              {"informative", mask}};
}

SceneProgram program_from_json(const json& j) {
  SceneProgram p;
  p.shape = lookup<ShapeKind>(j.at("shape").get<std::string>(), kShapes, "shape");
  p.color = lookup<Color>(j.at("color").get<std::string>(), kColors, "color");
  p.motion = lookup<Motion>(j.at("motion").get<std::string>(), kMotions, "motion");
  p.speed = lookup<Speed>(j.at("speed").get<std::string>(), kSpeeds, "speed");
  for (const auto& b : j.at("informative")) p.informative.push_back(b.get<int>() != 0);
  return p;
}

}  // namespace

std::string_view shape_name(ShapeKind s) { return kShapes[static_cast<std::size_t>(s)]; }
std::string_view color_name(Color c) { return kColors[static_cast<std::size_t>(c)]; }
std::string_view motion_name(Motion m) { return kMotions[static_cast<std::size_t>(m)]; }
std::string_view speed_name(Speed s) { return kSpeeds[static_cast<std::size_t>(s)]; }
std::string_view grammar_name(Grammar g) { return g == Grammar::A ? "A" : "B"; }

Grammar grammar_from_name(std::string_view name) {
  if (name == "A") return Grammar::A;
  if (name == "B") return Grammar::B;
  throw ConfigError("unknown grammar '" + std::string(name) + "' (expected A or B)");
}

SceneProgram program_at(int index) {
  if (index < 0 || index >= kProgramSpace) throw ContractError("program index out of range");
  SceneProgram p;
  p.speed = static_cast<Speed>(index % 2);
  index /= 2;
  p.motion = static_cast<Motion>(index % 5);
  index /= 5;
  p.color = static_cast<Color>(index % 3);
  p.shape = static_cast<ShapeKind>(index / 3);
  return p;
}

Vocabulary caption_vocabulary(std::size_t size) {
  std::vector<std::string> words;
  for (const auto& w : tokenize(kPromptText)) words.push_back(w);
  for (const char* w : {"a", "the", "moves", "moving"}) words.emplace_back(w);
  for (auto w : kColors) words.emplace_back(w);
  for (auto w : kShapes) words.emplace_back(w);
  for (auto w : kMotions) words.emplace_back(w);
  for (auto w : kSpeeds) words.emplace_back(w);
  return Vocabulary(words, size);
}

std::vector<bool> sample_mask(int frames, double sparsity, Rng& rng) {
  if (frames < 1) throw ContractError("clip needs at least one frame");
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw ConfigError("sparsity must lie in (0, 1]");
  const double expected = sparsity * frames;
  int k = static_cast<int>(std::floor(expected));
  if (rng.bernoulli(expected - k)) ++k;
  k = std::clamp(k, 1, frames);
  std::vector<int> order(static_cast<std::size_t>(frames));
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first k slots end up uniformly chosen.
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(frames - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<bool> mask(static_cast<std::size_t>(frames), false);
  for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return mask;
}

VideoClip render_clip(const SceneProgram& prog, const RenderConfig& cfg, std::uint64_t seed, std::string id) {
  const int T = cfg.frames, H = cfg.height, W = cfg.width, C = cfg.channels;
  if (T < 1 || H < 1 || W < 1 || C < 1) throw ConfigError("render extents must be positive");
  if (prog.informative.size() != static_cast<std::size_t>(T)) {
    throw ContractError("informative mask has " + std::to_string(prog.informative.size()) + " entries for " +
                        std::to_string(T) + " frames");
  }
  if (std::none_of(prog.informative.begin(), prog.informative.end(), [](bool b) { return b; })) {
    throw ContractError("scene program has no informative frame");
  }
  Rng rng(seed);
  const Extent ext = object_extent(prog.shape);
  const int oh = std::min(ext.h, H), ow = std::min(ext.w, W);
  const auto [dx, dy] = direction(prog.motion);
  int v = prog.speed == Speed::Fast ? 3 : 1;
  if (T > 1) {
    if (dx != 0) v = std::min(v, (W - ow) / (T - 1));
    if (dy != 0) v = std::min(v, (H - oh) / (T - 1));
  }
  const int span = v * (T - 1);
  const int x_lo = std::max(0, -dx * span), x_hi = std::min(W - ow, W - ow - dx * span);
  const int y_lo = std::max(0, -dy * span), y_hi = std::min(H - oh, H - oh - dy * span);
  const int x0 = rng.between(x_lo, x_hi);
  const int y0 = rng.between(y_lo, y_hi);
  const double intensity = prog.speed == Speed::Fast ? 1.0 : 0.55;
  const int channel = static_cast<int>(prog.color) % C;

  VideoClip clip;
  clip.id = std::move(id);
  const Shape shape{static_cast<std::size_t>(H), static_cast<std::size_t>(W), static_cast<std::size_t>(C)};
  for (int t = 0; t < T; ++t) {
    Tensor f(shape);
    double* px = f.mutable_ptr();
    if (prog.informative[static_cast<std::size_t>(t)]) {
      const int x = x0 + dx * v * t, y = y0 + dy * v * t;
      for (int r = y; r < y + oh; ++r) {
        for (int c = x; c < x + ow; ++c) px[(r * W + c) * C + channel] = intensity;
      }
    } else {
      for (std::size_t i = 0; i < f.numel(); ++i) px[i] = rng.uniform();
    }
    clip.frames.push_back(std::move(f));
  }
  return clip;
}

std::string caption_text(const SceneProgram& p, Grammar grammar) {
  const std::string shape(shape_name(p.shape)), color(color_name(p.color)), motion(motion_name(p.motion)),
      speed(speed_name(p.speed));
  if (grammar == Grammar::A) return "a " + color + " " + shape + " moves " + motion + " " + speed;
  return "the " + speed + " " + color + " " + shape + " is moving " + motion;
}

std::vector<int> caption_of(const SceneProgram& prog, Grammar grammar, const Vocabulary& vocab) {
  std::vector<int> ids{kBosId};
  for (int id : vocab.encode(caption_text(prog, grammar))) ids.push_back(id);
  ids.push_back(kEosId);
  return ids;
}

std::vector<CaptionSample> make_dataset(const DatasetSpec& spec, const Vocabulary& vocab) {
  if (spec.n < 1) throw ConfigError("dataset size must be >= 1, got " + std::to_string(spec.n));
  Rng rng(spec.seed);
  const std::vector<int> prompt = vocab.encode(kPromptText);
  std::vector<int> order(kProgramSpace);
  std::vector<CaptionSample> out;
  out.reserve(static_cast<std::size_t>(spec.n));
  for (int i = 0; i < spec.n; ++i) {
    if (i % kProgramSpace == 0) {
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span<int>(order));
    }
    SceneProgram prog = program_at(order[static_cast<std::size_t>(i % kProgramSpace)]);
    prog.informative = sample_mask(spec.render.frames, spec.sparsity, rng);
    CaptionSample s;
    s.clip = render_clip(prog, spec.render, mix_seed(spec.seed, static_cast<std::uint64_t>(i)), clip_id(spec.seed, i));
    s.prompt = prompt;
    s.caption = caption_of(prog, spec.grammar, vocab);
    s.program = std::move(prog);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const std::vector<CaptionSample>& samples,
                   const Vocabulary& vocab, const std::string& config_hash) {
  io::ensure_dir(dir / "clips");
  json clips = json::array();
  std::string captions;
  for (const auto& s : samples) {
    const std::string file = "clips/" + s.clip.id + ".bin";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + (dir / file).string() + " for writing");
    for (const auto& f : s.clip.frames) io::write_f64_le(out, f.data());
    out.flush();
    if (!out) throw IoError("cannot write " + (dir / file).string());
    clips.push_back(json{{"id", s.clip.id}, {"file", file}, {"program", program_json(s.program)}});
    json line{{"clip_id", s.clip.id}, {"tokens", s.caption}, {"text", vocab.decode(s.caption)}};
    captions += line.dump() + "\n";
  }
  json manifest{{"format", "qadapt-dataset"},
                {"version", 1},
                {"config_hash", config_hash},
                {"seed", spec.seed},
                {"n", spec.n},
                {"grammar", grammar_name(spec.grammar)},
                {"sparsity", spec.sparsity},
                {"render",
                 {{"height", spec.render.height},
                  {"width", spec.render.width},
                  {"channels", spec.render.channels},
                  {"frames", spec.render.frames}}},
                {"clips", clips}};
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  io::write_text(dir / "captions.jsonl", captions);
}

LoadedDataset read_dataset(const std::filesystem::path& dir, const Vocabulary& vocab) {
  LoadedDataset ds;
  try {
    const json m = json::parse(io::read_text(dir / "manifest.json"));
    if (m.at("format") != "qadapt-dataset") throw IoError("not a dataset manifest: " + (dir / "manifest.json").string());
    ds.config_hash = m.at("config_hash").get<std::string>();
    ds.spec.seed = m.at("seed").get<std::uint64_t>();
    ds.spec.n = m.at("n").get<int>();
    ds.spec.grammar = grammar_from_name(m.at("grammar").get<std::string>());
    ds.spec.sparsity = m.at("sparsity").get<double>();
    const json& r = m.at("render");
    ds.spec.render = RenderConfig{r.at("height").get<int>(), r.at("width").get<int>(), r.at("channels").get<int>(),
                                  r.at("frames").get<int>()};

    std::vector<json> lines;
    {
      std::istringstream in(io::read_text(dir / "captions.jsonl"));
      for (std::string line; std::getline(in, line);) {
        if (!line.empty()) lines.push_back(json::parse(line));
      }
    }
    const json& clips = m.at("clips");
    if (clips.size() != lines.size() || static_cast<int>(clips.size()) != ds.spec.n) {
      throw IoError("dataset at " + dir.string() + " has inconsistent clip counts");
    }
    const std::vector<int> prompt = vocab.encode(kPromptText);
    const auto& rc = ds.spec.render;
    const Shape shape{static_cast<std::size_t>(rc.height), static_cast<std::size_t>(rc.width),
                      static_cast<std::size_t>(rc.channels)};
    for (std::size_t i = 0; i < clips.size(); ++i) {
      CaptionSample s;
      s.clip.id = clips[i].at("id").get<std::string>();
      s.program = program_from_json(clips[i].at("program"));
      if (lines[i].at("clip_id").get<std::string>() != s.clip.id) {
        throw IoError("captions.jsonl order does not match manifest at clip " + s.clip.id);
      }
      s.caption = lines[i].at("tokens").get<std::vector<int>>();
      for (int id : s.caption) (void)vocab.token(id);
      s.prompt = prompt;
      std::ifstream in(dir / clips[i].at("file").get<std::string>(), std::ios::binary);
      if (!in) throw IoError("missing clip payload for " + s.clip.id);
      for (int t = 0; t < rc.frames; ++t) {
        Tensor f(shape);
        io::read_f64_le(in, f.mutable_data());
        if (!f.all_finite()) throw IoError("clip " + s.clip.id + " holds non-finite pixels");
        s.clip.frames.push_back(std::move(f));
      }
      if (in.peek() != std::char_traits<char>::eof()) throw IoError("clip " + s.clip.id + " payload has trailing bytes");
      s.clip.validate();
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed dataset at " + dir.string() + ": " + e.what());
  } catch (const ContractError& e) {
    throw IoError("invalid dataset at " + dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace qadapt
