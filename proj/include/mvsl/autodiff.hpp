// Reverse-mode automatic differentiation over dense matrices.
//
// A Graph is a tape of eagerly evaluated nodes. Every op computes its value
// immediately (Eigen does the heavy lifting) and records a backward closure
// that scatters the upstream gradient into its parents. backward() walks the
// tape in reverse creation order, which is a valid topological order because
// ops can only reference earlier nodes.
//
// Design rules that the rest of the library relies on:
//   - Determinism: all reductions run in a fixed sequential order, so the
//     same graph over the same values yields bit-identical results.
//   - Frozen subgraphs: nodes created via constant()/constant_ref() never
//     receive gradient, and needs_grad propagation keeps backward() from
//     even visiting branches with no trainable ancestor.
//   - Closures capture node ids, never references into the node vector
//     (the vector reallocates while the tape grows).
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mvsl/errors.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::ad {

using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Graph() { nodes_.reserve(1024); }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // ---- node creation -------------------------------------------------

  // Trainable (or at least gradient-receiving) input.
  Var leaf(const Mat& m, bool needs_grad = true) {
    return push(Node{m, nullptr, {}, needs_grad, {}});
  }

  // Gradient-free input, stored by value.
  Var constant(Mat m) { return push(Node{std::move(m), nullptr, {}, false, {}}); }

  // Gradient-free input referencing caller-owned storage; the referenced
  // matrix must outlive every use of this graph (used for frozen weights,
  // which live in the encoder structs).
  Var constant_ref(const Mat& m) { return push(Node{Mat(), &m, {}, false, {}}); }

  const Mat& val(Var v) const { return value_of(check(v)); }

  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  // Accumulated gradient (zeros if backward never reached this node).
  Mat grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.size() == 0)
      return Mat::Zero(value_of(check(v)).rows(), value_of(check(v)).cols());
    return n.grad;
  }

  // Largest absolute gradient accumulated into any node that references m
  // through constant_ref. The frozen-set contract makes this exactly 0.0;
  // the gradient checker asserts it instead of assuming it. Requires m to
  // actually appear in the graph, otherwise the probe is vacuous.
  double max_abs_grad_for_ref(const Mat& m) const {
    bool found = false;
    double mx = 0.0;
    for (const Node& n : nodes_) {
      if (n.external != &m) continue;
      found = true;
      if (n.grad.size() != 0) mx = std::max(mx, n.grad.cwiseAbs().maxCoeff());
    }
    if (!found) throw InputError("max_abs_grad_for_ref: matrix is not referenced by this graph");
    return mx;
  }

  // ---- backward ------------------------------------------------------

  void backward(Var root) {
    const Mat& r = val(root);
    if (r.rows() != 1 || r.cols() != 1)
      throw InputError("backward: root must be a 1x1 scalar node");
    Node& rn = nodes_[root.id];
    if (!rn.needs_grad) return;  // nothing trainable upstream
    rn.grad = Mat::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.grad.size() != 0 && n.back) n.back(*this, n.grad);
    }
  }

  // ---- elementwise / linear ops ---------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Var out = make(val(a) + val(b), needs_grad(a) || needs_grad(b));
    set_back(out, [a, b](Graph& g, const Mat& G) {
      g.accumulate(a, G);
      g.accumulate(b, G);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Var out = make(val(a) - val(b), needs_grad(a) || needs_grad(b));
    set_back(out, [a, b](Graph& g, const Mat& G) {
      g.accumulate(a, G);
      g.accumulate(b, Mat(-G));
    });
    return out;
  }

  Var scale(Var a, double s) {
    Var out = make(val(a) * s, needs_grad(a));
    set_back(out, [a, s](Graph& g, const Mat& G) { g.accumulate(a, Mat(G * s)); });
    return out;
  }

  // alpha*x + (1-alpha)*y with a fixed blend coefficient.
  Var blend(Var x, Var y, double alpha) {
    same_shape(x, y, "blend");
    Var out = make(alpha * val(x) + (1.0 - alpha) * val(y), needs_grad(x) || needs_grad(y));
    set_back(out, [x, y, alpha](Graph& g, const Mat& G) {
      g.accumulate(x, Mat(G * alpha));
      g.accumulate(y, Mat(G * (1.0 - alpha)));
    });
    return out;
  }

  // alpha*x + (1-alpha)*y where alpha is a trainable 1x1 node.
  Var blend_var(Var x, Var y, Var alpha) {
    same_shape(x, y, "blend_var");
    if (val(alpha).size() != 1) throw InputError("blend_var: alpha must be 1x1");
    double a = val(alpha)(0, 0);
    Var out = make(a * val(x) + (1.0 - a) * val(y),
                   needs_grad(x) || needs_grad(y) || needs_grad(alpha));
    set_back(out, [x, y, alpha](Graph& g, const Mat& G) {
      double a = g.val(alpha)(0, 0);
      g.accumulate(x, Mat(G * a));
      g.accumulate(y, Mat(G * (1.0 - a)));
      Mat da(1, 1);
      da(0, 0) = (G.array() * (g.val(x) - g.val(y)).array()).sum();
      g.accumulate(alpha, da);
    });
    return out;
  }

  // coeffs(0)*x + coeffs(1)*y where coeffs is a 2x1 node (fusion weights).
  Var lincomb2(Var coeffs, Var x, Var y) {
    same_shape(x, y, "lincomb2");
    const Mat& c = val(coeffs);
    if (c.rows() != 2 || c.cols() != 1) throw InputError("lincomb2: coeffs must be 2x1");
    Var out = make(c(0, 0) * val(x) + c(1, 0) * val(y),
                   needs_grad(x) || needs_grad(y) || needs_grad(coeffs));
    set_back(out, [coeffs, x, y](Graph& g, const Mat& G) {
      const Mat& c = g.val(coeffs);
      g.accumulate(x, Mat(G * c(0, 0)));
      g.accumulate(y, Mat(G * c(1, 0)));
      Mat dc(2, 1);
      dc(0, 0) = (G.array() * g.val(x).array()).sum();
      dc(1, 0) = (G.array() * g.val(y).array()).sum();
      g.accumulate(coeffs, dc);
    });
    return out;
  }

  // Broadcast-add a 1 x n row (bias) to every row of a.
  Var add_row(Var a, Var row) {
    const Mat& A = val(a);
    const Mat& r = val(row);
    if (r.rows() != 1 || r.cols() != A.cols()) throw InputError("add_row: bias shape mismatch");
    Mat out = A;
    out.rowwise() += r.row(0);
    Var o = make(std::move(out), needs_grad(a) || needs_grad(row));
    set_back(o, [a, row](Graph& g, const Mat& G) {
      g.accumulate(a, G);
      g.accumulate(row, Mat(G.colwise().sum()));
    });
    return o;
  }

  Var matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.rows()) throw InputError("matmul: inner dimensions disagree");
    Var out = make(A * B, needs_grad(a) || needs_grad(b));
    set_back(out, [a, b](Graph& g, const Mat& G) {
      if (g.needs_grad(a)) g.accumulate(a, Mat(G * g.val(b).transpose()));
      if (g.needs_grad(b)) g.accumulate(b, Mat(g.val(a).transpose() * G));
    });
    return out;
  }

  // A * B^T (used for similarity matrices and attention scores).
  Var matmul_nt(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.cols()) throw InputError("matmul_nt: column dimensions disagree");
    Var out = make(A * B.transpose(), needs_grad(a) || needs_grad(b));
    set_back(out, [a, b](Graph& g, const Mat& G) {
      if (g.needs_grad(a)) g.accumulate(a, Mat(G * g.val(b)));
      if (g.needs_grad(b)) g.accumulate(b, Mat(G.transpose() * g.val(a)));
    });
    return out;
  }

  Var relu(Var a) {
    Var out = make(val(a).cwiseMax(0.0), needs_grad(a));
    set_back(out, [a, out](Graph& g, const Mat& G) {
      // Subgradient convention: d relu(0) = 0.
      Mat d = ((g.val(out).array() > 0.0).cast<double>() * G.array()).matrix();
      g.accumulate(a, d);
    });
    return out;
  }

  // tanh-approximated GELU (transformer MLP nonlinearity).
  Var gelu(Var a) {
    Mat out = val(a).unaryExpr([](double x) {
      return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
    });
    Var o = make(std::move(out), needs_grad(a));
    set_back(o, [a](Graph& g, const Mat& G) {
      Mat d = g.val(a).binaryExpr(G, [](double x, double up) {
        double u = kGeluC * (x + 0.044715 * x * x * x);
        double t = std::tanh(u);
        double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) * up;
      });
      g.accumulate(a, d);
    });
    return o;
  }

  // Row-wise layer normalization with affine parameters (1 x n each).
  // gamma/beta are frozen in this library but gradients to x are exact.
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Mat& X = val(x);
    const Mat& G0 = val(gamma);
    const Mat& B0 = val(beta);
    if (G0.rows() != 1 || G0.cols() != X.cols() || B0.rows() != 1 || B0.cols() != X.cols())
      throw InputError("layer_norm: affine parameter shape mismatch");
    const Eigen::Index n = X.cols();
    Mat xhat(X.rows(), n), out(X.rows(), n);
    Vec inv(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double mu = X.row(r).mean();
      double var = (X.row(r).array() - mu).square().sum() / static_cast<double>(n);
      double iv = 1.0 / std::sqrt(var + eps);
      inv(r) = iv;
      xhat.row(r) = ((X.row(r).array() - mu) * iv).matrix();
      out.row(r) = (xhat.row(r).array() * G0.row(0).array() + B0.row(0).array()).matrix();
    }
    Var o = make(std::move(out), needs_grad(x));
    set_back(o, [x, gamma, xh = std::move(xhat), iv = std::move(inv)](Graph& g, const Mat& G) {
      const Mat& gam = g.val(gamma);
      Mat d(xh.rows(), xh.cols());
      for (Eigen::Index r = 0; r < xh.rows(); ++r) {
        RowArr u = G.row(r).array() * gam.row(0).array();
        double mu = u.mean();
        double mxh = (u * xh.row(r).array()).mean();
        d.row(r) = ((u - mu - xh.row(r).array() * mxh) * iv(r)).matrix();
      }
      g.accumulate(x, d);
    });
    return o;
  }

  Var softmax_rows(Var a) {
    const Mat& X = val(a);
    Mat out(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double m = X.row(r).maxCoeff();
      RowArr e = (X.row(r).array() - m).exp();
      out.row(r) = (e / e.sum()).matrix();
    }
    Var o = make(std::move(out), needs_grad(a));
    set_back(o, [a, o](Graph& g, const Mat& G) {
      const Mat& Y = g.val(o);
      Mat d(Y.rows(), Y.cols());
      for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        double dot = (G.row(r).array() * Y.row(r).array()).sum();
        d.row(r) = (Y.row(r).array() * (G.row(r).array() - dot)).matrix();
      }
      g.accumulate(a, d);
    });
    return o;
  }

  // Row-wise L2 normalization with an epsilon guard. Exactly-zero rows are a
  // numeric-degeneracy error unless error_on_zero is cleared, in which case
  // the guarded denominator max(norm, eps) passes the row through scaled.
  Var l2_normalize_rows(Var a, double eps = 1e-12, bool error_on_zero = true) {
    const Mat& X = val(a);
    Mat out(X.rows(), X.cols());
    Vec denom(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double n = X.row(r).norm();
      if (n == 0.0 && error_on_zero)
        throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
      double dn = n > eps ? n : eps;
      denom(r) = dn;
      out.row(r) = X.row(r) / dn;
    }
    Var o = make(std::move(out), needs_grad(a));
    set_back(o, [a, o, dn = std::move(denom)](Graph& g, const Mat& G) {
      const Mat& Y = g.val(o);
      Mat d(Y.rows(), Y.cols());
      for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        double dot = (G.row(r).array() * Y.row(r).array()).sum();
        d.row(r) = (G.row(r) - dot * Y.row(r)) / dn(r);
      }
      g.accumulate(a, d);
    });
    return o;
  }

  // ---- slicing / concatenation ----------------------------------------

  Var slice_rows(Var a, int r0, int nr) {
    const Mat& A = val(a);
    if (r0 < 0 || nr < 0 || r0 + nr > A.rows()) throw InputError("slice_rows: out of range");
    Var out = make(Mat(A.middleRows(r0, nr)), needs_grad(a));
    set_back(out, [a, r0, nr](Graph& g, const Mat& G) {
      Mat d = Mat::Zero(g.val(a).rows(), g.val(a).cols());
      d.middleRows(r0, nr) = G;
      g.accumulate(a, d);
    });
    return out;
  }

  Var slice_cols(Var a, int c0, int nc) {
    const Mat& A = val(a);
    if (c0 < 0 || nc < 0 || c0 + nc > A.cols()) throw InputError("slice_cols: out of range");
    Var out = make(Mat(A.middleCols(c0, nc)), needs_grad(a));
    set_back(out, [a, c0, nc](Graph& g, const Mat& G) {
      Mat d = Mat::Zero(g.val(a).rows(), g.val(a).cols());
      d.middleCols(c0, nc) = G;
      g.accumulate(a, d);
    });
    return out;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_rows: empty list");
    Eigen::Index cols = val(parts[0]).cols(), rows = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).cols() != cols) throw InputError("concat_rows: column mismatch");
      rows += val(p).rows();
      ng = ng || needs_grad(p);
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    Var o = make(std::move(out), ng);
    set_back(o, [parts](Graph& g, const Mat& G) {
      Eigen::Index r = 0;
      for (Var p : parts) {
        Eigen::Index nr = g.val(p).rows();
        g.accumulate(p, Mat(G.middleRows(r, nr)));
        r += nr;
      }
    });
    return o;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_cols: empty list");
    Eigen::Index rows = val(parts[0]).rows(), cols = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows() != rows) throw InputError("concat_cols: row mismatch");
      cols += val(p).cols();
      ng = ng || needs_grad(p);
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    Var o = make(std::move(out), ng);
    set_back(o, [parts](Graph& g, const Mat& G) {
      Eigen::Index c = 0;
      for (Var p : parts) {
        Eigen::Index nc = g.val(p).cols();
        g.accumulate(p, Mat(G.middleCols(c, nc)));
        c += nc;
      }
    });
    return o;
  }

  // Mean over consecutive groups of `group` rows: (G*group) x C -> G x C.
  Var mean_group_rows(Var a, int group) {
    const Mat& A = val(a);
    if (group < 1 || A.rows() % group != 0)
      throw InputError("mean_group_rows: rows not divisible by group");
    Eigen::Index n = A.rows() / group;
    Mat out = Mat::Zero(n, A.cols());
    for (Eigen::Index j = 0; j < n; ++j) {
      for (int k = 0; k < group; ++k) out.row(j) += A.row(j * group + k);
      out.row(j) /= static_cast<double>(group);
    }
    Var o = make(std::move(out), needs_grad(a));
    set_back(o, [a, group](Graph& g, const Mat& G) {
      Mat d(G.rows() * group, G.cols());
      for (Eigen::Index j = 0; j < G.rows(); ++j)
        for (int k = 0; k < group; ++k)
          d.row(j * group + k) = G.row(j) / static_cast<double>(group);
      g.accumulate(a, d);
    });
    return o;
  }

  // ---- fused loss heads ------------------------------------------------

  // Mean over rows of -log softmax(logits/tau)[r, labels[r]].
  Var cross_entropy_mean(Var logits, const std::vector<int>& labels, double tau) {
    const Mat& S = val(logits);
    if (tau <= 0.0) throw ConfigError("cross_entropy_mean: tau must be positive");
    if (static_cast<Eigen::Index>(labels.size()) != S.rows())
      throw InputError("cross_entropy_mean: one label per row required");
    for (int y : labels)
      if (y < 0 || y >= S.cols())
        throw InputError("cross_entropy_mean: label out of range: " + std::to_string(y));
    const double R = static_cast<double>(S.rows());
    Mat probs(S.rows(), S.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      RowArr z = S.row(r).array() / tau;
      double m = z.maxCoeff();
      RowArr e = (z - m).exp();
      double sum = e.sum();
      probs.row(r) = (e / sum).matrix();
      loss += (m + std::log(sum)) - z(labels[r]);
    }
    Mat out(1, 1);
    out(0, 0) = loss / R;
    Var o = make(std::move(out), needs_grad(logits));
    set_back(o, [logits, labels, tau, P = std::move(probs)](Graph& g, const Mat& G) {
      Mat d = P;
      for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, labels[r]) -= 1.0;
      d *= G(0, 0) / (tau * static_cast<double>(d.rows()));
      g.accumulate(logits, d);
    });
    return o;
  }

  // Mean over rows of KL(softmax(teacher/tau) || softmax(student/tau)).
  // The teacher is treated as a constant; gradient flows to the student only.
  Var kl_mean(Var teacher, Var student, double tau) {
    const Mat& T = val(teacher);
    const Mat& S = val(student);
    if (tau <= 0.0) throw ConfigError("kl_mean: tau must be positive");
    if (T.rows() != S.rows() || T.cols() != S.cols()) throw InputError("kl_mean: shape mismatch");
    const double R = static_cast<double>(S.rows());
    Mat P(T.rows(), T.cols()), Q(S.rows(), S.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      RowArr zt = T.row(r).array() / tau;
      RowArr zs = S.row(r).array() / tau;
      double mt = zt.maxCoeff(), ms = zs.maxCoeff();
      RowArr et = (zt - mt).exp(), es = (zs - ms).exp();
      double st = et.sum(), ss = es.sum();
      RowArr p = et / st, q = es / ss;
      P.row(r) = p.matrix();
      Q.row(r) = q.matrix();
      RowArr logp = (zt - mt) - std::log(st);
      RowArr logq = (zs - ms) - std::log(ss);
      loss += (p * (logp - logq)).sum();
    }
    Mat out(1, 1);
    out(0, 0) = loss / R;
    Var o = make(std::move(out), needs_grad(student));
    set_back(o, [student, tau, P = std::move(P), Q = std::move(Q)](Graph& g, const Mat& G) {
      Mat d = (Q - P) * (G(0, 0) / (tau * static_cast<double>(Q.rows())));
      g.accumulate(student, d);
    });
    return o;
  }

  // (1/R) * sum over rows of ||student_row - target_row||^2 (target constant).
  Var mse_mean_rows(Var student, Var target) {
    const Mat& S = val(student);
    const Mat& T = val(target);
    if (T.rows() != S.rows() || T.cols() != S.cols())
      throw InputError("mse_mean_rows: shape mismatch");
    Mat out(1, 1);
    out(0, 0) = (S - T).squaredNorm() / static_cast<double>(S.rows());
    Var o = make(std::move(out), needs_grad(student));
    set_back(o, [student, target](Graph& g, const Mat& G) {
      const Mat& S = g.val(student);
      Mat d = (S - g.val(target)) * (2.0 * G(0, 0) / static_cast<double>(S.rows()));
      g.accumulate(student, d);
    });
    return o;
  }

  // (1/C^2) * sum_ij W(i,j) * ||F_i - F_j||^2 with a constant weight matrix W.
  // Vectorized via ||f_i - f_j||^2 = n_i + n_j - 2 f_i.f_j.
  Var pairwise_weighted_sqdist(Var f, Var w) {
    const Mat& F = val(f);
    const Mat& W = val(w);
    const Eigen::Index C = F.rows();
    if (W.rows() != C || W.cols() != C) throw InputError("pairwise_weighted_sqdist: weight shape");
    Vec n(C);
    for (Eigen::Index i = 0; i < C; ++i) n(i) = F.row(i).squaredNorm();
    Mat S = F * F.transpose();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < C; ++i)
      acc += (W.row(i).array() * (n(i) + n.transpose().array() - 2.0 * S.row(i).array())).sum();
    Mat out(1, 1);
    out(0, 0) = acc / (static_cast<double>(C) * static_cast<double>(C));
    Var o = make(std::move(out), needs_grad(f));
    set_back(o, [f, w](Graph& g, const Mat& G) {
      const Mat& F = g.val(f);
      const Mat& W = g.val(w);
      const double C = static_cast<double>(F.rows());
      Mat Wsym = W + W.transpose();
      Vec rs = Wsym.rowwise().sum();
      Mat d = (rs.asDiagonal() * F - Wsym * F) * (2.0 * G(0, 0) / (C * C));
      g.accumulate(f, d);
    });
    return o;
  }

  // Weighted sum of 1x1 scalar nodes (the total-loss combiner).
  Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
    if (terms.size() != coeffs.size() || terms.empty())
      throw InputError("weighted_sum: need equally many terms and coefficients");
    double acc = 0.0;
    bool ng = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (val(terms[i]).size() != 1) throw InputError("weighted_sum: terms must be 1x1");
      acc += coeffs[i] * val(terms[i])(0, 0);
      ng = ng || needs_grad(terms[i]);
    }
    Mat out(1, 1);
    out(0, 0) = acc;
    Var o = make(std::move(out), ng);
    set_back(o, [terms, coeffs](Graph& g, const Mat& G) {
      for (std::size_t i = 0; i < terms.size(); ++i) {
        Mat d(1, 1);
        d(0, 0) = coeffs[i] * G(0, 0);
        g.accumulate(terms[i], d);
      }
    });
    return o;
  }

  // sum(R .* x) for a fixed probe matrix R — reduces a matrix output to a
  // scalar so finite differences can exercise non-scalar heads in tests.
  Var probe(Var x, Mat R) {
    const Mat& X = val(x);
    if (R.rows() != X.rows() || R.cols() != X.cols()) throw InputError("probe: shape mismatch");
    Mat out(1, 1);
    out(0, 0) = (R.array() * X.array()).sum();
    Var o = make(std::move(out), needs_grad(x));
    set_back(o, [x, R = std::move(R)](Graph& g, const Mat& G) {
      g.accumulate(x, Mat(R * G(0, 0)));
    });
    return o;
  }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;  // set for constant_ref nodes
    Mat grad;
    bool needs_grad = false;
    std::function<void(Graph&, const Mat&)> back;
  };

  static constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

  const Mat& value_of(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw InputError("invalid graph variable");
    return v.id;
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw InputError(std::string(op) + ": shape mismatch");
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Mat v, bool needs) { return push(Node{std::move(v), nullptr, {}, needs, {}}); }

  void set_back(Var v, std::function<void(Graph&, const Mat&)> f) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].back = std::move(f);
  }

  void accumulate(Var v, const Mat& g) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  std::vector<Node> nodes_;
};

}  // namespace mvsl::ad
