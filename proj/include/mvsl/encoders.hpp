// Deterministic seeded toy encoders: a small pre-norm vision transformer and
// a matching text transformer, frozen after construction, plus a hashing
// tokenizer. These stand in for a pretrained vision-language backbone at desk
// scale; their value is reproducibility, not representation quality.
//
// Weight initialization draws from SplitMix64 sub-streams in a pinned
// visitation order, so a (config, seed) pair yields bit-identical weights on
// any platform. Forward passes run through the autodiff graph even when
// frozen — one arithmetic path for everything guarantees the residual
// identity checks (adapted-with-alpha=1 == frozen) hold exactly.
#pragma once

#include <cctype>
#include <functional>
#include <string>
#include <vector>

#include "mvsl/autodiff.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/prng.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::enc {

struct EncoderConfig {
  std::uint64_t seed = 1;
  int image_side = 16;
  int patch_side = 4;
  int channels = 1;
  int n_blocks = 12;
  int block_dim = 64;   // d
  int embed_dim = 32;   // D, joint space and adapter bottleneck
  int n_heads = 4;
  int vocab_size = 512;  // V
  int max_text_len = 32;

  int n_patches() const { return (image_side / patch_side) * (image_side / patch_side); }
  int n_tokens() const { return n_patches() + 1; }  // patches + class token
  int mlp_hidden() const { return 2 * block_dim; }  // artifact choice, fits 1-core budgets

  void validate() const {
    if (image_side <= 0 || patch_side <= 0 || channels <= 0 || n_blocks <= 0 ||
        block_dim <= 0 || embed_dim <= 0 || n_heads <= 0 || vocab_size < 2 || max_text_len < 1)
      throw ConfigError("EncoderConfig: all dimensions must be positive (vocab >= 2)");
    if (image_side % patch_side != 0)
      throw ConfigError("EncoderConfig: image_side must be divisible by patch_side");
    if (embed_dim >= block_dim)
      throw ConfigError("EncoderConfig: embed_dim D must be strictly less than block_dim d");
    if (block_dim % n_heads != 0)
      throw ConfigError("EncoderConfig: block_dim must be divisible by n_heads");
  }

  bool operator==(const EncoderConfig&) const = default;
};

struct ImageBatch {
  int batch = 0, channels = 0, side = 0;
  std::vector<double> v;  // row-major B x channels x side x side, values in [0,1]

  ImageBatch() = default;
  ImageBatch(int b, int c, int s)
      : batch(b), channels(c), side(s),
        v(static_cast<std::size_t>(b) * c * s * s, 0.0) {}

  double& at(int b, int c, int y, int x) {
    return v[((static_cast<std::size_t>(b) * channels + c) * side + y) * side + x];
  }
  double at(int b, int c, int y, int x) const {
    return v[((static_cast<std::size_t>(b) * channels + c) * side + y) * side + x];
  }

  void validate() const {
    for (double x : v)
      if (!std::isfinite(x)) throw NumericError("ImageBatch: non-finite pixel");
  }
};

struct TokenSequence {
  std::vector<int> ids;
  bool operator==(const TokenSequence&) const = default;
};

struct VisionActivations {
  std::vector<Array3> per_block;  // n_blocks entries, each B x N x d
  Mat f_cls;                      // B x D
};

// ---- weights ----------------------------------------------------------

struct BlockWeights {
  Mat ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x d
  Mat wq, wk, wv, wo;              // d x d
  Mat bq, bk, bv, bo;              // 1 x d
  Mat w1, b1;                      // d x h, 1 x h
  Mat w2, b2;                      // h x d, 1 x d
};

struct VisionEncoder {
  EncoderConfig cfg;
  Mat patch_embed;  // (patch_side^2 * channels) x d
  Mat patch_bias;   // 1 x d
  Mat cls_token;    // 1 x d
  Mat pos;          // N x d
  std::vector<BlockWeights> blocks;
  Mat final_ln_g, final_ln_b;  // 1 x d
  Mat proj;                    // d x D
};

struct TextEncoder {
  EncoderConfig cfg;
  Mat token_embed;  // V x d
  Mat pos;          // max_text_len x d
  std::vector<BlockWeights> blocks;
  Mat final_ln_g, final_ln_b;
  Mat proj;  // d x D
};

namespace detail {

inline BlockWeights init_block(const EncoderConfig& c, SplitMix64& rng) {
  const int d = c.block_dim, h = c.mlp_hidden();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));
  // Residual output projections carry an extra 1/sqrt(2L) so the sum of 2L
  // random residual updates stays comparable to the input stream. Without it
  // a deep frozen stack drowns the input in accumulated random transforms and
  // the extracted features lose nearly all class information.
  const double res = 1.0 / std::sqrt(2.0 * static_cast<double>(c.n_blocks));
  BlockWeights b;
  b.ln1_g = Mat::Ones(1, d);
  b.ln1_b = Mat::Zero(1, d);
  b.ln2_g = Mat::Ones(1, d);
  b.ln2_b = Mat::Zero(1, d);
  b.wq = random_gaussian(d, d, rng, sd);
  b.wk = random_gaussian(d, d, rng, sd);
  b.wv = random_gaussian(d, d, rng, sd);
  b.wo = random_gaussian(d, d, rng, sd * res);
  b.bq = Mat::Zero(1, d);
  b.bk = Mat::Zero(1, d);
  b.bv = Mat::Zero(1, d);
  b.bo = Mat::Zero(1, d);
  b.w1 = random_gaussian(d, h, rng, sd);
  b.b1 = Mat::Zero(1, h);
  b.w2 = random_gaussian(h, d, rng, sh * res);
  b.b2 = Mat::Zero(1, d);
  return b;
}

}  // namespace detail

// ---- construction ------------------------------------------------------

inline std::pair<VisionEncoder, TextEncoder> build_encoders(const EncoderConfig& cfg) {
  cfg.validate();
  const int d = cfg.block_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  VisionEncoder ve;
  ve.cfg = cfg;
  {
    SplitMix64 rng(derive_seed(cfg.seed, 0x7672616E63685F76ULL));  // vision stream
    const int pdim = cfg.patch_side * cfg.patch_side * cfg.channels;
    ve.patch_embed = random_gaussian(pdim, d, rng, 1.0 / std::sqrt(static_cast<double>(pdim)));
    ve.patch_bias = Mat::Zero(1, d);
    ve.cls_token = random_gaussian(1, d, rng, sd);
    ve.pos = random_gaussian(cfg.n_tokens(), d, rng, sd);
    ve.blocks.reserve(cfg.n_blocks);
    for (int k = 0; k < cfg.n_blocks; ++k) ve.blocks.push_back(detail::init_block(cfg, rng));
    ve.final_ln_g = Mat::Ones(1, d);
    ve.final_ln_b = Mat::Zero(1, d);
    ve.proj = random_gaussian(d, cfg.embed_dim, rng, sd);
  }

  TextEncoder te;
  te.cfg = cfg;
  {
    SplitMix64 rng(derive_seed(cfg.seed, 0x7672616E63685F74ULL));  // text stream
    te.token_embed = random_gaussian(cfg.vocab_size, d, rng, sd);
    te.pos = random_gaussian(cfg.max_text_len, d, rng, sd);
    te.blocks.reserve(cfg.n_blocks);
    for (int k = 0; k < cfg.n_blocks; ++k) te.blocks.push_back(detail::init_block(cfg, rng));
    te.final_ln_g = Mat::Ones(1, d);
    te.final_ln_b = Mat::Zero(1, d);
    te.proj = random_gaussian(d, cfg.embed_dim, rng, sd);
  }
  return {std::move(ve), std::move(te)};
}

inline std::uint64_t weight_checksum(const VisionEncoder& e) {
  std::uint64_t h = checksum(e.patch_embed);
  h = checksum(e.cls_token, h);
  h = checksum(e.pos, h);
  for (const auto& b : e.blocks) {
    h = checksum(b.wq, h);
    h = checksum(b.wk, h);
    h = checksum(b.wv, h);
    h = checksum(b.wo, h);
    h = checksum(b.w1, h);
    h = checksum(b.w2, h);
  }
  return checksum(e.proj, h);
}

inline std::uint64_t weight_checksum(const TextEncoder& e) {
  std::uint64_t h = checksum(e.token_embed);
  h = checksum(e.pos, h);
  for (const auto& b : e.blocks) {
    h = checksum(b.wq, h);
    h = checksum(b.wk, h);
    h = checksum(b.wv, h);
    h = checksum(b.wo, h);
    h = checksum(b.w1, h);
    h = checksum(b.w2, h);
  }
  return checksum(e.proj, h);
}

// ---- tokenizer ----------------------------------------------------------

// Lowercase ASCII; word characters are alphanumerics (bytes >= 0x80 count as
// word characters so non-ASCII text still tokenizes); everything else splits.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    bool word_char = std::isalnum(ch) || ch >= 0x80;
    if (word_char) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Stable hash into [1, V); id 0 is reserved for padding.
inline TokenSequence tokenize(const std::string& text, const EncoderConfig& cfg) {
  auto words = split_words(text);
  if (words.empty()) throw InputError("tokenize: empty string after normalization: \"" + text + "\"");
  if (static_cast<int>(words.size()) > cfg.max_text_len)
    throw InputError("tokenize: sequence of " + std::to_string(words.size()) +
                     " tokens exceeds max_text_len " + std::to_string(cfg.max_text_len));
  TokenSequence seq;
  seq.ids.reserve(words.size());
  for (const auto& w : words) {
    std::uint64_t h = fnv1a(w.data(), w.size());
    seq.ids.push_back(static_cast<int>(h % static_cast<std::uint64_t>(cfg.vocab_size - 1)) + 1);
  }
  return seq;
}

// ---- shared forward pieces (graph composites) ----------------------------

// Multi-head self-attention over a T x d token matrix.
inline ad::Var mhsa(ad::Graph& g, ad::Var x, const BlockWeights& w, int n_heads) {
  const int d = static_cast<int>(g.val(x).cols());
  const int dk = d / n_heads;
  ad::Var q = g.add_row(g.matmul(x, g.constant_ref(w.wq)), g.constant_ref(w.bq));
  ad::Var k = g.add_row(g.matmul(x, g.constant_ref(w.wk)), g.constant_ref(w.bk));
  ad::Var v = g.add_row(g.matmul(x, g.constant_ref(w.wv)), g.constant_ref(w.bv));
  std::vector<ad::Var> heads;
  heads.reserve(n_heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = g.slice_cols(q, h * dk, dk);
    ad::Var kh = g.slice_cols(k, h * dk, dk);
    ad::Var vh = g.slice_cols(v, h * dk, dk);
    ad::Var scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dk);
    heads.push_back(g.matmul(g.softmax_rows(scores), vh));
  }
  ad::Var ctx = g.concat_cols(heads);
  return g.add_row(g.matmul(ctx, g.constant_ref(w.wo)), g.constant_ref(w.bo));
}

// One pre-norm transformer block: x + MHSA(LN(x)), then h + MLP(LN(h)).
inline ad::Var transformer_block(ad::Graph& g, ad::Var x, const BlockWeights& w, int n_heads) {
  ad::Var a = mhsa(g, g.layer_norm(x, g.constant_ref(w.ln1_g), g.constant_ref(w.ln1_b)), w, n_heads);
  ad::Var h = g.add(x, a);
  ad::Var n = g.layer_norm(h, g.constant_ref(w.ln2_g), g.constant_ref(w.ln2_b));
  ad::Var m = g.add_row(g.matmul(n, g.constant_ref(w.w1)), g.constant_ref(w.b1));
  ad::Var m2 = g.add_row(g.matmul(g.gelu(m), g.constant_ref(w.w2)), g.constant_ref(w.b2));
  return g.add(h, m2);
}

// Runs blocks [first_block, n_blocks) over x. post_block, when set, maps the
// output of block k (1-based) to its replacement before the next block — the
// adapter insertion point.
inline ad::Var run_blocks(
    ad::Graph& g, ad::Var x, const std::vector<BlockWeights>& blocks, int n_heads,
    int first_block = 0,
    const std::function<ad::Var(ad::Graph&, ad::Var, int)>& post_block = {}) {
  for (int k = first_block; k < static_cast<int>(blocks.size()); ++k) {
    x = transformer_block(g, x, blocks[k], n_heads);
    if (post_block) x = post_block(g, x, k + 1);
  }
  return x;
}

// Final layer norm, pooling row selection, projection to the joint space.
inline ad::Var finalize_pooled(ad::Graph& g, ad::Var x, const Mat& ln_g, const Mat& ln_b,
                               const Mat& proj, int pool_row) {
  ad::Var n = g.layer_norm(x, g.constant_ref(ln_g), g.constant_ref(ln_b));
  ad::Var pooled = g.slice_rows(n, pool_row, 1);
  return g.matmul(pooled, g.constant_ref(proj));  // 1 x D
}

// Frozen input embedding of one image: [cls; patches] * patch_embed + pos.
// Patch order is raster (top-left to bottom-right); within a patch, channel-
// major then row-major pixels. Pure value computation (inputs are constants).
inline Mat vision_input_tokens(const VisionEncoder& e, const ImageBatch& batch, int b) {
  const auto& c = e.cfg;
  const int grid = c.image_side / c.patch_side;
  const int pdim = c.patch_side * c.patch_side * c.channels;
  Mat patches(c.n_patches(), pdim);
  for (int py = 0; py < grid; ++py)
    for (int px = 0; px < grid; ++px) {
      int row = py * grid + px;
      int col = 0;
      for (int ch = 0; ch < c.channels; ++ch)
        for (int y = 0; y < c.patch_side; ++y)
          for (int x = 0; x < c.patch_side; ++x)
            patches(row, col++) = batch.at(b, ch, py * c.patch_side + y, px * c.patch_side + x);
    }
  Mat tok(c.n_tokens(), c.block_dim);
  tok.row(0) = e.cls_token.row(0);
  Mat embedded = patches * e.patch_embed;
  embedded.rowwise() += e.patch_bias.row(0);
  tok.middleRows(1, c.n_patches()) = embedded;
  tok += e.pos;
  return tok;
}

// Frozen input embedding of one token sequence: embed rows + positions.
inline Mat text_input_tokens(const TextEncoder& e, const TokenSequence& seq) {
  const int L = static_cast<int>(seq.ids.size());
  if (L < 1) throw InputError("text_input_tokens: empty sequence");
  if (L > e.cfg.max_text_len)
    throw InputError("text_input_tokens: sequence exceeds max_text_len");
  Mat tok(L, e.cfg.block_dim);
  for (int i = 0; i < L; ++i) {
    int id = seq.ids[i];
    if (id < 0 || id >= e.cfg.vocab_size) throw InputError("text_input_tokens: id out of range");
    tok.row(i) = e.token_embed.row(id);
  }
  tok += e.pos.topRows(L);
  return tok;
}

// ---- frozen encoding ------------------------------------------------------

inline VisionActivations encode_image_frozen(const VisionEncoder& e, const ImageBatch& batch) {
  const auto& c = e.cfg;
  if (batch.channels != c.channels || batch.side != c.image_side)
    throw InputError("encode_image_frozen: batch spatial dims do not match config");
  batch.validate();
  VisionActivations out;
  out.per_block.assign(c.n_blocks, Array3(batch.batch, c.n_tokens(), c.block_dim));
  out.f_cls = Mat(batch.batch, c.embed_dim);
  for (int b = 0; b < batch.batch; ++b) {
    ad::Graph g;
    ad::Var x = g.constant(vision_input_tokens(e, batch, b));
    for (int k = 0; k < c.n_blocks; ++k) {
      x = transformer_block(g, x, e.blocks[k], c.n_heads);
      out.per_block[k].set_slab(b, g.val(x));
    }
    ad::Var cls = finalize_pooled(g, x, e.final_ln_g, e.final_ln_b, e.proj, 0);
    out.f_cls.row(b) = g.val(cls).row(0);
  }
  return out;
}

inline Mat encode_text_frozen(const TextEncoder& e, const std::vector<TokenSequence>& seqs) {
  Mat out(static_cast<Eigen::Index>(seqs.size()), e.cfg.embed_dim);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    ad::Graph g;
    ad::Var x = g.constant(text_input_tokens(e, seqs[i]));
    x = run_blocks(g, x, e.blocks, e.cfg.n_heads);
    ad::Var pooled = finalize_pooled(g, x, e.final_ln_g, e.final_ln_b, e.proj,
                                     static_cast<int>(seqs[i].ids.size()) - 1);
    out.row(static_cast<Eigen::Index>(i)) = g.val(pooled).row(0);
  }
  return out;
}

}  // namespace mvsl::enc
