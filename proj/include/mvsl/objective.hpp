// Teacher-student supervision and the composite objective: frozen-teacher
// cosine logits, KL distribution alignment, MSE text alignment, and the
// lambda-weighted total.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mvsl/autodiff.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/mgcl.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::objective {

struct LossWeights {
  double lambda1 = 0.5;
  double lambda2 = 0.25;
  double lambda3 = 0.5;
  bool tie_lambda13 = true;  // lambda3 follows lambda1

  void set_lambda1(double v) {
    lambda1 = v;
    if (tie_lambda13) lambda3 = v;
  }
  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
      throw ConfigError("LossWeights: lambdas must be nonnegative");
    if (tie_lambda13 && lambda1 != lambda3)
      throw ConfigError("LossWeights: tie flag on but lambda1 != lambda3");
  }
};

struct LossReport {
  double l_global = 0.0;
  double l_local = 0.0;
  double l_mse = 0.0;
  double l_kl = 0.0;
  double l_dsg = 0.0;
  double l_fusion = 0.0;  // optional extra CE on S_final (off by default)
  double total = 0.0;
  // which components had a live gradient path in the step that produced them
  bool grad_local = false, grad_dsg = false, grad_fusion = false;
};

// Frozen-teacher logits: cosine between frozen class-token features and the
// (current) class text features. Built on constants, so nothing
// differentiates through it by construction.
inline Mat teacher_logits(const Mat& frozen_cls, const Mat& f_t) {
  return mgcl::global_similarity(frozen_cls, f_t);
}

inline double kl_alignment_loss(const Mat& teacher, const Mat& student, double tau_kl) {
  ad::Graph g;
  return g.val(g.kl_mean(g.constant_ref(teacher), g.constant_ref(student), tau_kl))(0, 0);
}

inline double mse_alignment_loss(const Mat& student_text, const Mat& class_mean) {
  ad::Graph g;
  return g.val(g.mse_mean_rows(g.constant_ref(student_text), g.constant_ref(class_mean)))(0, 0);
}

namespace detail {
inline void check_component(double v, const char* name) {
  if (!std::isfinite(v))
    throw NumericError(std::string("total_loss: component '") + name + "' is non-finite");
}
}  // namespace detail

// Composition only; the graph-level version lives in the trainer where the
// component Vars exist. Ablations zero out terms by passing 0 weights.
inline LossReport total_loss(double l_global, double l_local, double l_mse, double l_kl,
                             double l_dsg, const LossWeights& w) {
  w.validate();
  detail::check_component(l_global, "l_global");
  detail::check_component(l_local, "l_local");
  detail::check_component(l_mse, "l_mse");
  detail::check_component(l_kl, "l_kl");
  detail::check_component(l_dsg, "l_dsg");
  LossReport r;
  r.l_global = l_global;
  r.l_local = l_local;
  r.l_mse = l_mse;
  r.l_kl = l_kl;
  r.l_dsg = l_dsg;
  r.total = l_global + l_local + w.lambda1 * l_mse + w.lambda2 * l_kl + w.lambda3 * l_dsg;
  return r;
}

}  // namespace mvsl::objective
