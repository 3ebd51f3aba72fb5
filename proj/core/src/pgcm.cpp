#include "nrseg/pgcm.hpp"

#include <algorithm>
#include <cmath>

#include "nrseg/common.hpp"

namespace nrseg::pgcm {

namespace {

void check_r(double r) {
    if (!(r > 0.0) || r > 1.0) throw ValidationError("consistency score must lie in (0,1]");
}

void check_sigma(double sigma) {
    if (sigma < 0.0) throw ValidationError("dice smoothing must be non-negative");
}

struct ClassSums {
    double inter = 0.0;   // sum P*L
    double psum = 0.0;    // sum P
    double lsum = 0.0;    // sum L
};

std::vector<ClassSums> class_sums(const Tensor& p, const Tensor& labels) {
    if (!p.same_shape(labels)) throw DimensionError("dice: prediction/label shape mismatch");
    if (p.ndim() != 3) throw DimensionError("dice: expects [k,H,W]");
    int k = p.dim(0);
    int64_t hw = static_cast<int64_t>(p.dim(1)) * p.dim(2);
    std::vector<ClassSums> sums(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
        const double* pp = p.data() + c * hw;
        const double* ll = labels.data() + c * hw;
        ClassSums& s = sums[static_cast<size_t>(c)];
        for (int64_t i = 0; i < hw; ++i) {
            s.inter += pp[i] * ll[i];
            s.psum += pp[i];
            s.lsum += ll[i];
        }
    }
    return sums;
}

double weighted_term(double inter, double psum, double lsum, double r, double sigma) {
    if (psum == 0.0 && lsum == 0.0) return 0.0;  // empty-class guard
    return 1.0 - 2.0 * inter / (r * (psum + lsum + sigma));
}

double variant_term(double p_plus, double p_minus, double n_plus, double r, double sigma,
                    VariantMode mode) {
    if (p_plus == 0.0 && p_minus == 0.0 && n_plus == 0.0) return 0.0;
    double f = (mode == VariantMode::M1) ? r : (2.0 - r);
    return 1.0 - f * 2.0 * p_plus / (f * (p_plus + p_minus) + n_plus + sigma);
}

}  // namespace

double mask_iou(const MaskImage& a, const MaskImage& b) {
    if (!a.same_dims(b)) throw DimensionError("mask_iou: dimension mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

ConsistencyScore frame_consistency_score(const std::vector<MaskImage>& ref,
                                         const std::vector<MaskImage>& syn, double floor) {
    if (ref.empty() || ref.size() != syn.size())
        throw ValidationError("frame_consistency_score: needs n >= 1 matching view pairs");
    if (floor < 0.0 || floor >= 1.0)
        throw ValidationError("frame_consistency_score: floor must lie in [0,1)");
    ConsistencyScore score;
    score.per_view.reserve(ref.size());
    double mean = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        double iou = mask_iou(ref[i], syn[i]);
        score.per_view.push_back(iou);
        mean += iou;
    }
    mean /= static_cast<double>(ref.size());
    score.value = std::clamp(mean, floor, 1.0);
    return score;
}

double dice_loss(const Tensor& p, const Tensor& labels, double sigma, DiceAggregation agg) {
    return weighted_dice_loss(p, labels, 1.0, sigma, agg);
}

double weighted_dice_loss(const Tensor& p, const Tensor& labels, double r, double sigma,
                          DiceAggregation agg) {
    check_r(r);
    check_sigma(sigma);
    auto sums = class_sums(p, labels);
    if (agg == DiceAggregation::SingleFraction) {
        ClassSums total;
        for (const auto& s : sums) {
            total.inter += s.inter;
            total.psum += s.psum;
            total.lsum += s.lsum;
        }
        return weighted_term(total.inter, total.psum, total.lsum, r, sigma);
    }
    double acc = 0.0;
    for (const auto& s : sums) acc += weighted_term(s.inter, s.psum, s.lsum, r, sigma);
    return acc / static_cast<double>(sums.size());
}

double variant_loss(const Tensor& p, const Tensor& labels, double r, double sigma,
                    VariantMode mode, DiceAggregation agg) {
    check_r(r);
    check_sigma(sigma);
    auto sums = class_sums(p, labels);
    if (agg == DiceAggregation::SingleFraction) {
        ClassSums total;
        for (const auto& s : sums) {
            total.inter += s.inter;
            total.psum += s.psum;
            total.lsum += s.lsum;
        }
        return variant_term(total.inter, total.psum - total.inter, total.lsum, r, sigma, mode);
    }
    double acc = 0.0;
    for (const auto& s : sums)
        acc += variant_term(s.inter, s.psum - s.inter, s.lsum, r, sigma, mode);
    return acc / static_cast<double>(sums.size());
}

double optimum_negative_mass(double p_plus, double n_plus, double r, double sigma) {
    check_r(r);
    if (p_plus < 0.0 || n_plus < p_plus)
        throw ValidationError("optimum_negative_mass: requires N+ >= P+ >= 0");
    return (2.0 - r) / r * p_plus - n_plus - sigma;
}

double scalarized_weighted_loss(double p_plus, double p_minus, double n_plus, double r,
                                double sigma) {
    check_r(r);
    return 1.0 - 2.0 * p_plus / (r * (p_plus + p_minus + n_plus + sigma));
}

namespace {

struct VarClassSums {
    ad::Var inter;
    ad::Var psum;
    double lsum = 0.0;
};

std::vector<VarClassSums> var_class_sums(const ad::Var& p, const Tensor& labels) {
    if (!p->value.same_shape(labels)) throw DimensionError("dice: prediction/label shape mismatch");
    int k = labels.dim(0);
    std::vector<VarClassSums> out;
    out.reserve(static_cast<size_t>(k));
    ad::Var lab = ad::constant(labels);
    for (int c = 0; c < k; ++c) {
        std::vector<int> idx{c};
        ad::Var pc = ad::gather_channels(p, idx);
        ad::Var lc = ad::gather_channels(lab, idx);
        VarClassSums s;
        s.inter = ad::sum(ad::mul(pc, lc));
        s.psum = ad::sum(pc);
        int64_t hw = static_cast<int64_t>(labels.dim(1)) * labels.dim(2);
        const double* ll = labels.data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) s.lsum += ll[i];
        out.push_back(std::move(s));
    }
    return out;
}

ad::Var weighted_term_var(const ad::Var& inter, const ad::Var& psum, double lsum, double r,
                          double sigma) {
    if (ad::scalar_value(psum) == 0.0 && lsum == 0.0) return ad::constant(Tensor::scalar(0.0));
    ad::Var denom = ad::mul_scalar(ad::add_scalar(psum, lsum + sigma), r);
    ad::Var num = ad::mul_scalar(inter, 2.0);
    return ad::add_scalar(ad::neg(ad::div(num, denom)), 1.0);
}

ad::Var variant_term_var(const ad::Var& inter, const ad::Var& psum, double lsum, double r,
                         double sigma, VariantMode mode) {
    if (ad::scalar_value(psum) == 0.0 && lsum == 0.0) return ad::constant(Tensor::scalar(0.0));
    double f = (mode == VariantMode::M1) ? r : (2.0 - r);
    // P+ + P- == sum P, so the denominator uses psum directly.
    ad::Var denom = ad::add_scalar(ad::mul_scalar(psum, f), lsum + sigma);
    ad::Var num = ad::mul_scalar(inter, 2.0 * f);
    return ad::add_scalar(ad::neg(ad::div(num, denom)), 1.0);
}

template <typename TermFn>
ad::Var aggregate_var(const ad::Var& p, const Tensor& labels, DiceAggregation agg, TermFn term) {
    auto sums = var_class_sums(p, labels);
    if (agg == DiceAggregation::SingleFraction) {
        ad::Var inter = sums[0].inter;
        ad::Var psum = sums[0].psum;
        double lsum = sums[0].lsum;
        for (size_t c = 1; c < sums.size(); ++c) {
            inter = ad::add(inter, sums[c].inter);
            psum = ad::add(psum, sums[c].psum);
            lsum += sums[c].lsum;
        }
        return term(inter, psum, lsum);
    }
    ad::Var acc = ad::constant(Tensor::scalar(0.0));
    for (auto& s : sums) acc = ad::add(acc, term(s.inter, s.psum, s.lsum));
    return ad::mul_scalar(acc, 1.0 / static_cast<double>(sums.size()));
}

}  // namespace

ad::Var dice_loss(const ad::Var& p, const Tensor& labels, double sigma, DiceAggregation agg) {
    return weighted_dice_loss(p, labels, 1.0, sigma, agg);
}

ad::Var weighted_dice_loss(const ad::Var& p, const Tensor& labels, double r, double sigma,
                           DiceAggregation agg) {
    check_r(r);
    check_sigma(sigma);
    return aggregate_var(p, labels, agg, [&](const ad::Var& i, const ad::Var& s, double l) {
        return weighted_term_var(i, s, l, r, sigma);
    });
}

ad::Var variant_loss(const ad::Var& p, const Tensor& labels, double r, double sigma,
                     VariantMode mode, DiceAggregation agg) {
    check_r(r);
    check_sigma(sigma);
    return aggregate_var(p, labels, agg, [&](const ad::Var& i, const ad::Var& s, double l) {
        return variant_term_var(i, s, l, r, sigma, mode);
    });
}

}  // namespace nrseg::pgcm
