#ifndef NRSEG_PGCM_HPP
#define NRSEG_PGCM_HPP

#include <vector>

#include "nrseg/autodiff.hpp"
#include "nrseg/mask.hpp"
#include "nrseg/tensor.hpp"

namespace nrseg::pgcm {

// Per-frame consistency score R: mean per-view IoU between reference and
// observed perspective road masks, floored away from zero so the weighted
// loss denominator stays bounded.
struct ConsistencyScore {
    double value = 1.0;                // clamped to [floor, 1]
    std::vector<double> per_view;      // raw per-camera IoUs
};

double mask_iou(const MaskImage& a, const MaskImage& b);

ConsistencyScore frame_consistency_score(const std::vector<MaskImage>& ref,
                                         const std::vector<MaskImage>& syn, double floor);

enum class DiceAggregation { SingleFraction, PerClassMean };
enum class VariantMode { M1, M2 };

// Soft DICE over a [k,H,W] probability grid and binary labels; sigma is the
// single additive smoothing constant in the denominator. The all-empty case
// (L == 0 and P == 0) contributes 0, not 1.
double dice_loss(const Tensor& p, const Tensor& labels, double sigma,
                 DiceAggregation agg = DiceAggregation::SingleFraction);

// Consistency-weighted DICE: R scales the whole denominator (smoothing
// included) and the loss may go negative; R = 1 reproduces dice_loss exactly.
double weighted_dice_loss(const Tensor& p, const Tensor& labels, double r, double sigma,
                          DiceAggregation agg = DiceAggregation::SingleFraction);

// Ablation variants: M1 scales only prediction mass by R, M2 by (2 - R).
double variant_loss(const Tensor& p, const Tensor& labels, double r, double sigma,
                    VariantMode mode, DiceAggregation agg = DiceAggregation::SingleFraction);

// Negative-region mass P_- at the zero-loss optimum for a given P_+; may be
// negative, meaning no positive-P_- optimum exists at this P_+.
double optimum_negative_mass(double p_plus, double n_plus, double r, double sigma);

// Scalarized weighted loss in the two free variables (P_+, P_-).
double scalarized_weighted_loss(double p_plus, double p_minus, double n_plus, double r,
                                double sigma);

// Differentiable versions for training; labels enter as constants.
ad::Var dice_loss(const ad::Var& p, const Tensor& labels, double sigma,
                  DiceAggregation agg = DiceAggregation::SingleFraction);
ad::Var weighted_dice_loss(const ad::Var& p, const Tensor& labels, double r, double sigma,
                           DiceAggregation agg = DiceAggregation::SingleFraction);
ad::Var variant_loss(const ad::Var& p, const Tensor& labels, double r, double sigma,
                     VariantMode mode, DiceAggregation agg = DiceAggregation::SingleFraction);

}  // namespace nrseg::pgcm

#endif  // NRSEG_PGCM_HPP
