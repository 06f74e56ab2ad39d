// Reference evaluators for the test suite.
//
// Everything in here is deliberately written as plain elementwise loops with
// no shortcuts, no stabilization and no reuse of library code — these are the
// independent oracles the vectorized implementations are checked against.
// Do not "optimize" this file; its slowness is the point.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mvsl/tensor.hpp"

namespace oracle {

using mvsl::Array3;
using mvsl::Mat;

// cos(a, b) with explicit accumulation loops.
inline double cosine(const Mat& a, int ra, const Mat& b, int rb, double eps = 1e-12) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index k = 0; k < a.cols(); ++k) {
    dot += a(ra, k) * b(rb, k);
    na += a(ra, k) * a(ra, k);
    nb += b(rb, k) * b(rb, k);
  }
  double da = std::sqrt(na), db = std::sqrt(nb);
  if (da < eps) da = eps;
  if (db < eps) db = eps;
  return dot / (da * db);
}

// Mean over rows of -log softmax(S/tau)[i, y_i], raw exponentials.
inline double global_contrastive(const Mat& S, const std::vector<int>& y, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index c = 0; c < S.cols(); ++c) denom += std::exp(S(i, c) / tau);
    total += -std::log(std::exp(S(i, y[i]) / tau) / denom);
  }
  return total / static_cast<double>(S.rows());
}

// Mean over batch and patches of -log softmax over classes.
inline double local_contrastive(const Array3& Sp, const std::vector<int>& y, double tau) {
  double total = 0.0;
  for (int b = 0; b < Sp.d0; ++b) {
    for (int p = 0; p < Sp.d1; ++p) {
      double denom = 0.0;
      for (int c = 0; c < Sp.d2; ++c) denom += std::exp(Sp.at(b, p, c) / tau);
      total += -std::log(std::exp(Sp.at(b, p, y[b]) / tau) / denom);
    }
  }
  return total / (static_cast<double>(Sp.d0) * static_cast<double>(Sp.d1));
}

// Mean over rows of KL(softmax(T/tau) || softmax(S/tau)).
inline double kl_alignment(const Mat& T, const Mat& S, double tau) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < T.rows(); ++r) {
    double zt = 0.0, zs = 0.0;
    for (Eigen::Index c = 0; c < T.cols(); ++c) {
      zt += std::exp(T(r, c) / tau);
      zs += std::exp(S(r, c) / tau);
    }
    for (Eigen::Index c = 0; c < T.cols(); ++c) {
      double p = std::exp(T(r, c) / tau) / zt;
      double q = std::exp(S(r, c) / tau) / zs;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(T.rows());
}

// (1/C) * sum_c ||S_c - T_c||^2.
inline double mse_alignment(const Mat& S, const Mat& T) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < S.rows(); ++r)
    for (Eigen::Index c = 0; c < S.cols(); ++c) {
      double d = S(r, c) - T(r, c);
      total += d * d;
    }
  return total / static_cast<double>(S.rows());
}

// (1/C^2) * sum_ij G_ij * ||F_i - F_j||^2, double loop.
inline double dsg(const Mat& F, const Mat& G) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < F.rows(); ++i)
    for (Eigen::Index j = 0; j < F.rows(); ++j) {
      double sq = 0.0;
      for (Eigen::Index k = 0; k < F.cols(); ++k) {
        double d = F(i, k) - F(j, k);
        sq += d * d;
      }
      total += G(i, j) * sq;
    }
  double C = static_cast<double>(F.rows());
  return total / (C * C);
}

// Row-softmaxed cosine adjacency, raw exponentials and explicit loops.
inline Mat adjacency(const Mat& means, double tau) {
  const Eigen::Index C = means.rows();
  Mat cosm(C, C);
  for (Eigen::Index i = 0; i < C; ++i)
    for (Eigen::Index j = 0; j < C; ++j) cosm(i, j) = cosine(means, static_cast<int>(i), means, static_cast<int>(j));
  Mat G(C, C);
  for (Eigen::Index i = 0; i < C; ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < C; ++j) denom += std::exp(cosm(i, j) / tau);
    for (Eigen::Index j = 0; j < C; ++j) G(i, j) = std::exp(cosm(i, j) / tau) / denom;
  }
  return G;
}

// Central finite differences of f over a list of parameter blocks.
// f is re-evaluated from scratch for every +-h probe; the blocks are
// restored exactly afterwards.
inline std::vector<Mat> fd_gradient(const std::function<double()>& f,
                                    const std::vector<Mat*>& blocks, double h = 1e-5) {
  std::vector<Mat> grads;
  grads.reserve(blocks.size());
  for (Mat* blk : blocks) {
    Mat g(blk->rows(), blk->cols());
    for (Eigen::Index i = 0; i < blk->rows(); ++i) {
      for (Eigen::Index j = 0; j < blk->cols(); ++j) {
        double saved = (*blk)(i, j);
        (*blk)(i, j) = saved + h;
        double fp = f();
        (*blk)(i, j) = saved - h;
        double fm = f();
        (*blk)(i, j) = saved;
        g(i, j) = (fp - fm) / (2.0 * h);
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// Block-scaled maximum relative error between analytic and numeric gradients:
// max_i |a_i - n_i| / max(scale, 1e-6) with scale = max_i (|a_i| + |n_i|).
// Scaling by the block's own gradient magnitude avoids 0/0 blowups on tiny
// components while still flagging any real disagreement.
inline double block_rel_err(const Mat& analytic, const Mat& numeric) {
  double scale = 0.0, diff = 0.0;
  for (Eigen::Index i = 0; i < analytic.rows(); ++i)
    for (Eigen::Index j = 0; j < analytic.cols(); ++j) {
      scale = std::max(scale, std::abs(analytic(i, j)) + std::abs(numeric(i, j)));
      diff = std::max(diff, std::abs(analytic(i, j) - numeric(i, j)));
    }
  return diff / std::max(scale, 1e-6);
}

}  // namespace oracle
