// Multi-granularity contrastive learning: cosine similarity matrices at the
// class-token and patch level, their contrastive losses, patch aggregation,
// and the learnable fusion of the two prediction granularities.
//
// The graph composites are what the trainer differentiates; the value-level
// functions wrap the same graph ops around constant inputs so there is one
// arithmetic path for training, evaluation, and tests.
#pragma once

#include <vector>

#include "mvsl/autodiff.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::mgcl {

// ---- domain types --------------------------------------------------------

struct SimilaritySet {
  Mat s_global;    // B x C
  Array3 s_patch;  // B x (N-1) x C
  Mat s_local;     // B x C
  Mat s_final;     // B x C
};

struct FusionCoefficients {
  double beta1 = 0.5;
  double beta2 = 0.5;
  bool trainable = true;
};

struct Temperatures {
  double tau_contrastive = 0.07;
  double tau_graph = 1.0;
  double tau_kl = 1.0;

  void validate() const {
    if (!(tau_contrastive > 0.0) || !(tau_graph > 0.0) || !(tau_kl > 0.0))
      throw ConfigError("Temperatures: all temperatures must be positive");
  }
};

// ---- graph composites ------------------------------------------------------

// S[i,c] = cos(rows of a, rows of b); both inputs are L2-normalized rowwise
// first. Zero-norm rows raise a numeric-degeneracy error unless the guard is
// relaxed.
inline ad::Var cosine_rows(ad::Graph& g, ad::Var a, ad::Var b, bool error_on_zero = true) {
  ad::Var na = g.l2_normalize_rows(a, 1e-12, error_on_zero);
  ad::Var nb = g.l2_normalize_rows(b, 1e-12, error_on_zero);
  return g.matmul_nt(na, nb);
}

// Labels repeated per patch, for the stacked-patch contrastive loss.
inline std::vector<int> repeat_labels(const std::vector<int>& y, int per) {
  std::vector<int> out;
  out.reserve(y.size() * static_cast<std::size_t>(per));
  for (int v : y)
    for (int p = 0; p < per; ++p) out.push_back(v);
  return out;
}

// ---- value-level operations -------------------------------------------------

inline Mat global_similarity(const Mat& f_cls, const Mat& f_t, bool error_on_zero = true) {
  if (f_cls.cols() != f_t.cols())
    throw InputError("global_similarity: embedding dims disagree");
  ad::Graph g;
  return g.val(cosine_rows(g, g.constant_ref(f_cls), g.constant_ref(f_t), error_on_zero));
}

inline Array3 patch_similarity(const Array3& patches, const Mat& f_t, bool error_on_zero = true) {
  if (patches.d2 != f_t.cols())
    throw InputError("patch_similarity: embedding dims disagree");
  Array3 out(patches.d0, patches.d1, static_cast<int>(f_t.rows()));
  ad::Graph g;
  ad::Var nt = g.l2_normalize_rows(g.constant_ref(f_t), 1e-12, error_on_zero);
  for (int b = 0; b < patches.d0; ++b) {
    ad::Var np = g.l2_normalize_rows(g.constant(Mat(patches.slab(b))), 1e-12, error_on_zero);
    out.set_slab(b, g.val(g.matmul_nt(np, nt)));
  }
  return out;
}

inline double global_contrastive_loss(const Mat& s_global, const std::vector<int>& y,
                                      double tau) {
  ad::Graph g;
  return g.val(g.cross_entropy_mean(g.constant_ref(s_global), y, tau))(0, 0);
}

inline double local_contrastive_loss(const Array3& s_patch, const std::vector<int>& y,
                                     double tau) {
  if (static_cast<int>(y.size()) != s_patch.d0)
    throw InputError("local_contrastive_loss: one label per sample required");
  Mat stacked(static_cast<Eigen::Index>(s_patch.d0) * s_patch.d1, s_patch.d2);
  for (int b = 0; b < s_patch.d0; ++b)
    stacked.middleRows(static_cast<Eigen::Index>(b) * s_patch.d1, s_patch.d1) = s_patch.slab(b);
  ad::Graph g;
  return g.val(g.cross_entropy_mean(g.constant_ref(stacked), repeat_labels(y, s_patch.d1), tau))(
      0, 0);
}

inline Mat aggregate_local(const Array3& s_patch) {
  if (s_patch.d1 < 1) throw InputError("aggregate_local: need at least one patch");
  Mat out = Mat::Zero(s_patch.d0, s_patch.d2);
  for (int b = 0; b < s_patch.d0; ++b) {
    // fixed sequential reduction over patches for bit-stability
    for (int p = 0; p < s_patch.d1; ++p)
      for (int c = 0; c < s_patch.d2; ++c) out(b, c) += s_patch.at(b, p, c);
  }
  out /= static_cast<double>(s_patch.d1);
  return out;
}

inline Mat fuse(const Mat& s_local, const Mat& s_global, const FusionCoefficients& beta) {
  if (s_local.rows() != s_global.rows() || s_local.cols() != s_global.cols())
    throw InputError("fuse: shape mismatch between local and global similarities");
  return beta.beta1 * s_local + beta.beta2 * s_global;
}

inline std::vector<int> classify(const Mat& s_final) {
  if (s_final.cols() < 1) throw InputError("classify: need at least one class");
  std::vector<int> out(static_cast<std::size_t>(s_final.rows()));
  for (Eigen::Index r = 0; r < s_final.rows(); ++r) {
    int best = 0;
    for (Eigen::Index c = 1; c < s_final.cols(); ++c)
      if (s_final(r, c) > s_final(r, best)) best = static_cast<int>(c);  // ties keep lowest
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

// Full similarity set from features (value level).
inline SimilaritySet compute_similarities(const Mat& f_cls, const Array3& patches,
                                          const Mat& f_t, const FusionCoefficients& beta) {
  SimilaritySet s;
  s.s_global = global_similarity(f_cls, f_t);
  s.s_patch = patch_similarity(patches, f_t);
  s.s_local = aggregate_local(s.s_patch);
  s.s_final = fuse(s.s_local, s.s_global, beta);
  return s;
}

}  // namespace mvsl::mgcl
