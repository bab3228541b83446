// SPDX-License-Identifier: Apache-2.0
#include "qadapt/backbone.hpp"

#include <cmath>
#include <numeric>

#include "qadapt/adapters.hpp"
#include "qadapt/errors.hpp"

namespace qadapt {

namespace {

using ad::Var;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.mutable_data()) x = rng.normal(0.0, stddev);
  return t;
}

void add_linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng) {
  const auto i = static_cast<std::size_t>(in), o = static_cast<std::size_t>(out);
  s.add(name + ".w", normal_tensor({i, o}, 1.0 / std::sqrt(static_cast<double>(in)), rng), ParamTag::Backbone);
  s.add(name + ".b", Tensor::zeros({o}), ParamTag::Backbone);
}

void add_norm(ParamStore& s, const std::string& name, int d) {
  const auto n = static_cast<std::size_t>(d);
  s.add(name + ".g", Tensor::filled({n}, 1.0), ParamTag::Backbone);
  s.add(name + ".b", Tensor::zeros({n}), ParamTag::Backbone);
}

void add_attention(ParamStore& s, const std::string& name, int d, Rng& rng) {
  const auto n = static_cast<std::size_t>(d);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  s.add(name + ".wqkv", normal_tensor({n, 3 * n}, sd, rng), ParamTag::Backbone);
  s.add(name + ".bqkv", Tensor::zeros({3 * n}), ParamTag::Backbone);
  s.add(name + ".wo", normal_tensor({n, n}, sd, rng), ParamTag::Backbone);
  s.add(name + ".bo", Tensor::zeros({n}), ParamTag::Backbone);
}

void add_mlp(ParamStore& s, const std::string& name, int d, int hidden, Rng& rng) {
  const auto n = static_cast<std::size_t>(d), h = static_cast<std::size_t>(hidden);
  s.add(name + ".w1", normal_tensor({n, h}, 1.0 / std::sqrt(static_cast<double>(d)), rng), ParamTag::Backbone);
  s.add(name + ".b1", Tensor::zeros({h}), ParamTag::Backbone);
  s.add(name + ".w2", normal_tensor({h, n}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng), ParamTag::Backbone);
  s.add(name + ".b2", Tensor::zeros({n}), ParamTag::Backbone);
}

Var mlp_vars(Var x, Var w1, Var b1, Var w2, Var b2) { return ad::linear(ad::gelu(ad::linear(x, w1, b1)), w2, b2); }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1, got " + std::to_string(v));
  };
  positive(d, "d");
  positive(heads, "heads");
  positive(depth, "depth");
  positive(decoder_depth, "decoder_depth");
  positive(patch, "patch");
  positive(height, "height");
  positive(width, "width");
  positive(channels, "channels");
  positive(frames, "T");
  positive(max_text, "max_text");
  positive(max_prompt, "max_prompt");
  positive(mlp_ratio, "mlp_ratio");
  if (vocab < 2) throw ConfigError("model.vocab must be >= 2, got " + std::to_string(vocab));
  if (d % heads != 0) {
    throw ConfigError("model.heads (" + std::to_string(heads) + ") must divide model.d (" + std::to_string(d) + ")");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw ConfigError("model.patch (" + std::to_string(patch) + ") must divide height " + std::to_string(height) +
                      " and width " + std::to_string(width));
  }
}

void VideoClip::validate() const {
  if (frames.empty()) throw ContractError("clip '" + id + "' has no frames");
  const Shape& s = frames.front().shape();
  if (s.size() != 3) throw ContractError("clip '" + id + "' frames must be H x W x C, got " + shape_to_string(s));
  for (const auto& f : frames) {
    if (f.shape() != s) {
      throw ContractError("clip '" + id + "' mixes frame shapes " + shape_to_string(s) + " and " +
                          shape_to_string(f.shape()));
    }
    for (double x : f.data()) {
      if (!(x >= 0.0 && x <= 1.0)) throw ContractError("clip '" + id + "' has a pixel outside [0, 1]");
    }
  }
}

std::string encoder_block_prefix(int block) { return "enc.blocks." + std::to_string(block); }
std::string decoder_block_prefix(int block) { return "dec.blocks." + std::to_string(block); }

void init_backbone(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d);
  const int hidden = cfg.mlp_ratio * cfg.d;
  constexpr double kEmbedStd = 0.02;

  add_linear(store, "enc.patch", cfg.patch_dim(), cfg.d, rng);
  store.add("enc.pos", normal_tensor({static_cast<std::size_t>(cfg.tokens_per_frame()), d}, kEmbedStd, rng),
            ParamTag::Backbone);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = encoder_block_prefix(i);
    add_norm(store, p + ".ln1", cfg.d);
    add_attention(store, p + ".attn", cfg.d, rng);
    add_norm(store, p + ".ln2", cfg.d);
    add_mlp(store, p + ".mlp", cfg.d, hidden, rng);
  }

  store.add("dec.tok", normal_tensor({static_cast<std::size_t>(cfg.vocab), d}, kEmbedStd, rng), ParamTag::Backbone);
  store.add("dec.pos", normal_tensor({static_cast<std::size_t>(cfg.max_text), d}, kEmbedStd, rng), ParamTag::Backbone);
  store.add("dec.ctx_pos", normal_tensor({static_cast<std::size_t>(cfg.max_context()), d}, kEmbedStd, rng),
            ParamTag::Backbone);
  for (int j = 0; j < cfg.decoder_depth; ++j) {
    const std::string p = decoder_block_prefix(j);
    add_norm(store, p + ".ln1", cfg.d);
    add_attention(store, p + ".self", cfg.d, rng);
    add_norm(store, p + ".ln2", cfg.d);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    store.add(p + ".cross.wq", normal_tensor({d, d}, sd, rng), ParamTag::Backbone);
    store.add(p + ".cross.bq", Tensor::zeros({d}), ParamTag::Backbone);
    store.add(p + ".cross.wkv", normal_tensor({d, 2 * d}, sd, rng), ParamTag::Backbone);
    store.add(p + ".cross.bkv", Tensor::zeros({2 * d}), ParamTag::Backbone);
    store.add(p + ".cross.wo", normal_tensor({d, d}, sd, rng), ParamTag::Backbone);
    store.add(p + ".cross.bo", Tensor::zeros({d}), ParamTag::Backbone);
    add_norm(store, p + ".ln3", cfg.d);
    add_mlp(store, p + ".mlp", cfg.d, hidden, rng);
  }
  add_norm(store, "dec.ln_f", cfg.d);
  add_linear(store, "dec.out", cfg.d, cfg.vocab, rng);
}

ViTBlockVars bind_vit_block(Binder& bind, int block) {
  const std::string p = encoder_block_prefix(block);
  return ViTBlockVars{bind(p + ".ln1.g"),    bind(p + ".ln1.b"),    bind(p + ".attn.wqkv"), bind(p + ".attn.bqkv"),
                      bind(p + ".attn.wo"),  bind(p + ".attn.bo"),  bind(p + ".ln2.g"),     bind(p + ".ln2.b"),
                      bind(p + ".mlp.w1"),   bind(p + ".mlp.b1"),   bind(p + ".mlp.w2"),    bind(p + ".mlp.b2")};
}

Var multi_head_attention(Var q, Var k, Var v, int heads, bool causal) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.rows() != k.rows()) {
    throw DimensionError("attention shapes disagree: q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  if (heads < 1 || d % static_cast<std::size_t>(heads) != 0) {
    throw DimensionError(std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Var s = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
    Var a = causal ? ad::causal_softmax_rows(s) : ad::softmax_rows(s);
    outs.push_back(ad::matmul(a, vh));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

Var self_attention(Var x, const ViTBlockVars& p, int heads, const LoraVars* lora_qkv, const LoraVars* lora_out) {
  const std::size_t d = x.cols();
  Var qkv = ad::add_rowvec(lora_qkv ? lora_matmul(x, p.wqkv, *lora_qkv) : ad::matmul(x, p.wqkv), p.bqkv);
  Var a = multi_head_attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, 2 * d), ad::slice_cols(qkv, 2 * d, 3 * d),
                               heads, false);
  return ad::add_rowvec(lora_out ? lora_matmul(a, p.wo, *lora_out) : ad::matmul(a, p.wo), p.bo);
}

Var mlp(Var x, const ViTBlockVars& p, const LoraVars* lora_w1, const LoraVars* lora_w2) {
  Var h = ad::add_rowvec(lora_w1 ? lora_matmul(x, p.w1, *lora_w1) : ad::matmul(x, p.w1), p.b1);
  h = ad::gelu(h);
  return ad::add_rowvec(lora_w2 ? lora_matmul(h, p.w2, *lora_w2) : ad::matmul(h, p.w2), p.b2);
}

Tensor extract_patches(const Tensor& frame, int patch) {
  if (frame.rank() != 3) throw DimensionError("frame must be H x W x C, got " + shape_to_string(frame.shape()));
  const std::size_t h = frame.shape()[0], w = frame.shape()[1], c = frame.shape()[2];
  const auto p = static_cast<std::size_t>(patch);
  if (patch < 1 || h % p != 0 || w % p != 0) {
    throw DimensionError("patch size " + std::to_string(patch) + " does not divide frame " +
                         shape_to_string(frame.shape()));
  }
  const std::size_t gh = h / p, gw = w / p;
  Tensor out({gh * gw, p * p * c});
  double* o = out.mutable_ptr();
  const double* f = frame.ptr();
  for (std::size_t by = 0; by < gh; ++by) {
    for (std::size_t bx = 0; bx < gw; ++bx) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          const double* src = f + ((by * p + y) * w + (bx * p + x)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) *o++ = src[ch];
        }
      }
    }
  }
  return out;
}

TokenMap patchify(Binder& bind, const Tensor& frame, const ModelConfig& cfg, int frame_index) {
  Tensor patches = extract_patches(frame, cfg.patch);
  if (patches.cols() != static_cast<std::size_t>(cfg.patch_dim())) {
    throw DimensionError("frame " + shape_to_string(frame.shape()) + " does not match model channels " +
                         std::to_string(cfg.channels));
  }
  Var x = bind.tape().constant(std::move(patches));
  Var z = ad::add(ad::linear(x, bind("enc.patch.w"), bind("enc.patch.b")), bind("enc.pos"));
  return TokenMap{z, frame_index};
}

Var vit_block(Var z, const ViTBlockVars& p, const ModelConfig& cfg) {
  Var z1 = ad::add(z, self_attention(ad::layer_norm(z, p.ln1_g, p.ln1_b), p, cfg.heads));
  return ad::add(z1, mlp(ad::layer_norm(z1, p.ln2_g, p.ln2_b), p));
}

std::vector<TokenMap> encode_clip(Binder& bind, const VideoClip& clip, std::span<const int> frame_indices,
                                  const ModelConfig& cfg, const AdapterConfig* adapters) {
  if (frame_indices.empty()) throw ContractError("clip '" + clip.id + "': no frames selected");
  std::vector<ViTBlockVars> blocks;
  blocks.reserve(static_cast<std::size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) blocks.push_back(bind_vit_block(bind, i));
  const bool wired = adapters != nullptr && adapters->type != AdapterType::None;

  std::vector<TokenMap> out;
  out.reserve(frame_indices.size());
  for (int t : frame_indices) {
    if (t < 0 || static_cast<std::size_t>(t) >= clip.frames.size()) {
      throw ContractError("clip '" + clip.id + "' has no frame " + std::to_string(t));
    }
    TokenMap tm = patchify(bind, clip.frames[static_cast<std::size_t>(t)], cfg, t);
    for (int i = 0; i < cfg.depth; ++i) {
      const auto& vars = blocks[static_cast<std::size_t>(i)];
      tm.tokens = wired && adapters->range.contains(i + 1) ? adapted_block(bind, tm.tokens, i, vars, cfg, *adapters)
                                                           : vit_block(tm.tokens, vars, cfg);
    }
    out.push_back(tm);
  }
  return out;
}

std::vector<TokenMap> encode_clip(Binder& bind, const VideoClip& clip, const ModelConfig& cfg,
                                  const AdapterConfig* adapters) {
  std::vector<int> all(clip.frames.size());
  std::iota(all.begin(), all.end(), 0);
  return encode_clip(bind, clip, all, cfg, adapters);
}

Var decoder_forward(Binder& bind, std::span<const int> prefix, Var context, const ModelConfig& cfg) {
  if (prefix.empty()) throw ContractError("decoder prefix is empty");
  if (prefix.size() > static_cast<std::size_t>(cfg.max_text)) {
    throw ContractError("decoder prefix of " + std::to_string(prefix.size()) + " tokens exceeds max_text " +
                        std::to_string(cfg.max_text));
  }
  for (int id : prefix) {
    if (id < 0 || id >= cfg.vocab) throw ContractError("unknown token id " + std::to_string(id));
  }
  const std::size_t d = static_cast<std::size_t>(cfg.d);
  Var h = ad::add(ad::gather_rows(bind("dec.tok"), prefix), ad::slice_rows(bind("dec.pos"), 0, prefix.size()));
  for (int j = 0; j < cfg.decoder_depth; ++j) {
    const std::string p = decoder_block_prefix(j);
    Var x = ad::layer_norm(h, bind(p + ".ln1.g"), bind(p + ".ln1.b"));
    Var qkv = ad::linear(x, bind(p + ".self.wqkv"), bind(p + ".self.bqkv"));
    Var a = multi_head_attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, 2 * d),
                                 ad::slice_cols(qkv, 2 * d, 3 * d), cfg.heads, true);
    h = ad::add(h, ad::linear(a, bind(p + ".self.wo"), bind(p + ".self.bo")));

    x = ad::layer_norm(h, bind(p + ".ln2.g"), bind(p + ".ln2.b"));
    Var q = ad::linear(x, bind(p + ".cross.wq"), bind(p + ".cross.bq"));
    Var kv = ad::linear(context, bind(p + ".cross.wkv"), bind(p + ".cross.bkv"));
    a = multi_head_attention(q, ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, 2 * d), cfg.heads, false);
    h = ad::add(h, ad::linear(a, bind(p + ".cross.wo"), bind(p + ".cross.bo")));

    x = ad::layer_norm(h, bind(p + ".ln3.g"), bind(p + ".ln3.b"));
    h = ad::add(h, mlp_vars(x, bind(p + ".mlp.w1"), bind(p + ".mlp.b1"), bind(p + ".mlp.w2"), bind(p + ".mlp.b2")));
  }
  Var x = ad::layer_norm(h, bind("dec.ln_f.g"), bind("dec.ln_f.b"));
  return ad::linear(x, bind("dec.out.w"), bind("dec.out.b"));
}

Tensor decoder_logits(const ParamStore& store, std::span<const int> prefix, const Tensor& context,
                      const ModelConfig& cfg) {
  ad::Tape tape;
  Binder bind(tape, store);
  Var logits = decoder_forward(bind, prefix, tape.constant(context), cfg);
  const std::size_t last = prefix.size() - 1;
  const Tensor& all = logits.value();
  std::vector<double> row(all.ptr() + last * all.cols(), all.ptr() + (last + 1) * all.cols());
  return Tensor({all.cols()}, std::move(row));
}

}  // namespace qadapt
