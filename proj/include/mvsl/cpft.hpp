// Cross-paradigm fine-tuning: residual bottleneck adapters inserted into
// frozen vision blocks, and learnable context vectors prepended to class
// token sequences. Both the value-level operations and the graph composites
// used by the trainer live here; the value ops run the same graph code with
// gradient-free leaves, so there is exactly one arithmetic path.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mvsl/autodiff.hpp"
#include "mvsl/encoders.hpp"
#include "mvsl/errors.hpp"

namespace mvsl::cpft {

using enc::EncoderConfig;
using enc::ImageBatch;
using enc::TextEncoder;
using enc::TokenSequence;
using enc::VisionEncoder;

// ---- domain types --------------------------------------------------------

struct AdapterParams {
  int block_index = 11;  // 1-based position in the block stack
  Mat w1;                // d x D down-projection
  Mat w2;                // D x d up-projection
  double alpha = 0.5;    // residual blend, fixed by default
  bool learnable_alpha = false;

  void validate(const EncoderConfig& c) const {
    if (block_index < 1 || block_index > c.n_blocks)
      throw ConfigError("AdapterParams: block_index " + std::to_string(block_index) +
                        " outside [1, " + std::to_string(c.n_blocks) + "]");
    if (w1.rows() != c.block_dim || w1.cols() != c.embed_dim ||
        w2.rows() != c.embed_dim || w2.cols() != c.block_dim)
      throw InputError("AdapterParams: weight shapes do not match encoder config");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw ConfigError("AdapterParams: alpha must lie in [0,1]");
    if (!all_finite(w1) || !all_finite(w2))
      throw NumericError("AdapterParams: non-finite weights");
  }
};

struct AdapterStack {
  std::vector<AdapterParams> adapters;  // strictly increasing block_index

  void validate(const EncoderConfig& c) const {
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      adapters[i].validate(c);
      if (i > 0 && adapters[i].block_index <= adapters[i - 1].block_index)
        throw ConfigError("AdapterStack: block indices must be strictly increasing");
    }
  }
  bool empty() const { return adapters.empty(); }
  int highest_block() const { return adapters.empty() ? -1 : adapters.back().block_index; }
};

struct PromptContext {
  Mat p;  // M x d learnable context vectors
  int m() const { return static_cast<int>(p.rows()); }
};

struct AdaptedVisionOutput {
  Mat f_cls_hat;          // B x D
  Array3 patch_features;  // B x (N-1) x D, first-step transform of the
                          // highest adapted block, class token excluded
};

// ---- initialization -------------------------------------------------------

inline AdapterParams init_adapter(const EncoderConfig& cfg, int block_index, std::uint64_t seed) {
  cfg.validate();
  if (block_index < 1 || block_index > cfg.n_blocks)
    throw ConfigError("init_adapter: block_index " + std::to_string(block_index) +
                      " outside [1, " + std::to_string(cfg.n_blocks) + "]");
  AdapterParams a;
  a.block_index = block_index;
  SplitMix64 rng(derive_seed(seed, 0xAD00000000000000ULL + static_cast<std::uint64_t>(block_index)));
  a.w1 = random_gaussian(cfg.block_dim, cfg.embed_dim, rng,
                         1.0 / std::sqrt(static_cast<double>(cfg.block_dim)));
  // W2 must start away from zero: with the second ReLU, W2 = 0 puts every
  // up-projection preactivation exactly on the kink, relu'(0) = 0 kills the
  // gradient, and the blend path can never leave that saddle. A small scale
  // keeps the adapter near-identity at init while leaving the path trainable.
  a.w2 = random_gaussian(cfg.embed_dim, cfg.block_dim, rng,
                         0.02 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  a.alpha = 0.5;
  return a;
}

inline PromptContext init_prompt_context(const TextEncoder& te,
                                         const std::string& init_phrase = "a photo of a") {
  std::vector<std::string> words = enc::split_words(init_phrase);
  if (words.empty()) throw ConfigError("init_prompt_context: phrase tokenizes to zero tokens");
  TokenSequence seq = enc::tokenize(init_phrase, te.cfg);
  PromptContext ctx;
  ctx.p = Mat(static_cast<Eigen::Index>(seq.ids.size()), te.cfg.block_dim);
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    ctx.p.row(static_cast<Eigen::Index>(i)) = te.token_embed.row(seq.ids[i]);
  return ctx;
}

// Learnable image prompt tokens (ablation path): M x d seeded Gaussian rows
// prepended between the class token and the patch tokens.
inline Mat init_image_prompts(const EncoderConfig& cfg, int m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("init_image_prompts: need at least one prompt token");
  SplitMix64 rng(derive_seed(seed, 0x1A60000000000000ULL));
  return random_gaussian(m, cfg.block_dim, rng, 1.0 / std::sqrt(static_cast<double>(cfg.block_dim)));
}

// ---- graph composites ------------------------------------------------------

// One adapter's view of the trainable world inside a graph.
struct AdapterVars {
  int block_index = 0;
  ad::Var w1, w2;
  double alpha = 0.5;
  ad::Var alpha_var;  // valid only when alpha is trainable
};

// F_hat1 = ReLU(F W1); F_hat2 = ReLU(F_hat1 W2); out = a*F + (1-a)*F_hat2.
// Returns the blended stream; *f1_out (when requested) receives F_hat1.
inline ad::Var adapter_transform(ad::Graph& g, ad::Var f, const AdapterVars& a,
                                 ad::Var* f1_out = nullptr) {
  ad::Var f1 = g.relu(g.matmul(f, a.w1));
  ad::Var f2 = g.relu(g.matmul(f1, a.w2));
  if (f1_out) *f1_out = f1;
  if (a.alpha_var.valid()) return g.blend_var(f, f2, a.alpha_var);
  return g.blend(f, f2, a.alpha);
}

struct VisionSampleVars {
  ad::Var cls;      // 1 x D projected class token
  ad::Var patches;  // (N-1) x D first-step features at the highest adapter
  bool has_patches = false;
};

// Forward one sample's token matrix x0 (already embedded, positioned, and
// possibly prompt-extended) through blocks (first_block, n_blocks], applying
// adapters in stream. first_block counts completed blocks: 0 means "run the
// whole stack", 10 means "x0 is the output of block 10".
inline VisionSampleVars vision_forward(ad::Graph& g, const VisionEncoder& e, ad::Var x0,
                                       int first_block, const std::vector<AdapterVars>& adapters) {
  const auto& c = e.cfg;
  VisionSampleVars out;
  ad::Var x = x0;
  std::size_t next = 0;
  while (next < adapters.size() && adapters[next].block_index <= first_block) ++next;
  const int highest = adapters.empty() ? -1 : adapters.back().block_index;
  for (int k = first_block + 1; k <= c.n_blocks; ++k) {
    x = enc::transformer_block(g, x, e.blocks[k - 1], c.n_heads);
    if (next < adapters.size() && adapters[next].block_index == k) {
      ad::Var f1;
      x = adapter_transform(g, x, adapters[next], &f1);
      if (k == highest) {
        // Patch rows are always the trailing n_patches rows, regardless of
        // how many prompt tokens were prepended.
        int t = static_cast<int>(g.val(f1).rows());
        out.patches = g.slice_rows(f1, t - c.n_patches(), c.n_patches());
        out.has_patches = true;
      }
      ++next;
    }
  }
  out.cls = enc::finalize_pooled(g, x, e.final_ln_g, e.final_ln_b, e.proj, 0);
  return out;
}

// Prompted (and optionally adapted) text forward for one class sequence.
// P is prepended to the embedded class tokens, positions cover the combined
// sequence, pooling reads the final token. An invalid p means "no context"
// (the adapter-only and frozen text paths).
inline ad::Var text_forward(ad::Graph& g, const TextEncoder& e, ad::Var p,
                            const TokenSequence& cls_seq,
                            const std::vector<AdapterVars>& text_adapters) {
  const auto& c = e.cfg;
  const int m = p.valid() ? static_cast<int>(g.val(p).rows()) : 0;
  const int l = static_cast<int>(cls_seq.ids.size());
  if (l < 1) throw InputError("text_forward: empty class sequence");
  if (m + l > c.max_text_len)
    throw InputError("text_forward: context (" + std::to_string(m) + ") + class tokens (" +
                     std::to_string(l) + ") exceed max_text_len " + std::to_string(c.max_text_len));
  Mat tok(l, c.block_dim);
  for (int i = 0; i < l; ++i) {
    int id = cls_seq.ids[i];
    if (id < 0 || id >= c.vocab_size) throw InputError("text_forward: token id out of range");
    tok.row(i) = e.token_embed.row(id);
  }
  ad::Var x = g.constant(std::move(tok));
  if (p.valid()) x = g.concat_rows({p, x});
  x = g.add(x, g.constant(Mat(e.pos.topRows(m + l))));
  std::size_t next = 0;
  for (int k = 1; k <= c.n_blocks; ++k) {
    x = enc::transformer_block(g, x, e.blocks[k - 1], c.n_heads);
    if (next < text_adapters.size() && text_adapters[next].block_index == k) {
      x = adapter_transform(g, x, text_adapters[next]);
      ++next;
    }
  }
  return enc::finalize_pooled(g, x, e.final_ln_g, e.final_ln_b, e.proj, m + l - 1);
}

namespace detail {

// Gradient-free AdapterVars for value-level evaluation.
inline std::vector<AdapterVars> freeze_stack(ad::Graph& g, const AdapterStack& stack) {
  std::vector<AdapterVars> vars;
  vars.reserve(stack.adapters.size());
  for (const auto& a : stack.adapters) {
    AdapterVars v;
    v.block_index = a.block_index;
    v.w1 = g.constant_ref(a.w1);
    v.w2 = g.constant_ref(a.w2);
    v.alpha = a.alpha;
    vars.push_back(v);
  }
  return vars;
}

}  // namespace detail

// ---- value-level operations -------------------------------------------------

// Eqs.-level adapter application to a whole activation stack (B x N x d).
// Returns (blended stream, first-step transform).
inline std::pair<Array3, Array3> apply_adapter(const Array3& f_k, const AdapterParams& a) {
  if (f_k.d2 != a.w1.rows())
    throw InputError("apply_adapter: feature dim does not match W1");
  Array3 fhat(f_k.d0, f_k.d1, f_k.d2);
  Array3 f1(f_k.d0, f_k.d1, static_cast<int>(a.w1.cols()));
  for (int b = 0; b < f_k.d0; ++b) {
    ad::Graph g;
    AdapterVars av;
    av.block_index = a.block_index;
    av.w1 = g.constant_ref(a.w1);
    av.w2 = g.constant_ref(a.w2);
    av.alpha = a.alpha;
    ad::Var f = g.constant(Mat(f_k.slab(b)));
    ad::Var f1v;
    ad::Var out = adapter_transform(g, f, av, &f1v);
    fhat.set_slab(b, g.val(out));
    f1.set_slab(b, g.val(f1v));
  }
  return {std::move(fhat), std::move(f1)};
}

// Full adapted image forward (value level). The stack must be non-empty:
// local patch features are undefined without an adapter.
inline AdaptedVisionOutput encode_image_adapted(const VisionEncoder& e, const AdapterStack& stack,
                                                const ImageBatch& batch) {
  const auto& c = e.cfg;
  if (stack.empty())
    throw ConfigError("encode_image_adapted: empty adapter stack (local features undefined)");
  stack.validate(c);
  if (batch.channels != c.channels || batch.side != c.image_side)
    throw InputError("encode_image_adapted: batch spatial dims do not match config");
  batch.validate();
  AdaptedVisionOutput out;
  out.f_cls_hat = Mat(batch.batch, c.embed_dim);
  out.patch_features = Array3(batch.batch, c.n_patches(), c.embed_dim);
  for (int b = 0; b < batch.batch; ++b) {
    ad::Graph g;
    auto vars = detail::freeze_stack(g, stack);
    ad::Var x0 = g.constant(enc::vision_input_tokens(e, batch, b));
    VisionSampleVars s = vision_forward(g, e, x0, 0, vars);
    out.f_cls_hat.row(b) = g.val(s.cls).row(0);
    out.patch_features.set_slab(b, g.val(s.patches));
  }
  return out;
}

// Prompted text encoding for a class list (value level).
inline Mat encode_text_prompted(const TextEncoder& e, const PromptContext& ctx,
                                const std::vector<TokenSequence>& class_seqs) {
  if (ctx.m() < 1) throw ConfigError("encode_text_prompted: empty prompt context");
  Mat out(static_cast<Eigen::Index>(class_seqs.size()), e.cfg.embed_dim);
  for (std::size_t i = 0; i < class_seqs.size(); ++i) {
    ad::Graph g;
    ad::Var p = g.constant_ref(ctx.p);
    ad::Var row = text_forward(g, e, p, class_seqs[i], {});
    out.row(static_cast<Eigen::Index>(i)) = g.val(row).row(0);
  }
  return out;
}

}  // namespace mvsl::cpft
