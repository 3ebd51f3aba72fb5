#ifndef NRSEG_EVIDENTIAL_HPP
#define NRSEG_EVIDENTIAL_HPP

#include <vector>

#include "nrseg/autodiff.hpp"
#include "nrseg/tensor.hpp"

namespace nrseg::edl {

// Per-pixel Dirichlet parameters for one cluster of classes. alpha is
// [c,H,W] with alpha >= 1 (ReLU evidence + 1); S is the per-pixel sum [1,H,W].
struct DirichletField {
    Tensor alpha;
    Tensor s;
};

// alpha = max(logits, 0) + 1.
DirichletField dirichlet_params(const Tensor& logits);

// Expected class probability alpha_j / S; sums to one per pixel.
Tensor expected_probability(const DirichletField& d);

// Vacuity u = c / S, in (0, 1].
Tensor uncertainty(const DirichletField& d);

// log Dir(p | alpha) for one pixel; p must lie on the open simplex.
double dirichlet_log_density(const std::vector<double>& p, const std::vector<double>& alpha);

// Type-II maximum-likelihood term: sum_pixels sum_j L_j * log(S / alpha_j).
double edl_nll_loss(const DirichletField& d, const Tensor& labels);

// alpha~ = L + (1 - L) . alpha: pins the labeled class to 1 so the KL term
// only penalizes evidence on the unlabeled classes.
DirichletField remove_true_evidence(const DirichletField& d, const Tensor& labels);

// KL( Dir(alpha~) || Dir(1,...,1) ), summed over pixels.
double kl_to_uniform(const DirichletField& d_tilde);

// KL ramp lambda_k = min(1, it / I).
double kl_weight(int64_t it, int64_t total_iterations);

// Differentiable building blocks on cluster logits.
ad::Var dirichlet_alpha(const ad::Var& logits);                     // relu + 1
ad::Var expected_probability(const ad::Var& alpha);                 // alpha / S
ad::Var edl_nll_loss(const ad::Var& alpha, const Tensor& labels);
ad::Var kl_to_uniform(const ad::Var& alpha, const Tensor& labels);  // on alpha~

}  // namespace nrseg::edl

#endif  // NRSEG_EVIDENTIAL_HPP
