#include "nrseg/evidential.hpp"

#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "nrseg/common.hpp"

namespace nrseg::edl {

namespace {

void check_chw(const Tensor& t, const char* what) {
    if (t.ndim() != 3) throw DimensionError(std::string(what) + ": expects [c,H,W]");
}

}  // namespace

DirichletField dirichlet_params(const Tensor& logits) {
    check_chw(logits, "dirichlet_params");
    for (int64_t i = 0; i < logits.numel(); ++i)
        if (!std::isfinite(logits[i])) throw ValidationError("dirichlet_params: non-finite logit");
    DirichletField d;
    d.alpha = logits;
    for (int64_t i = 0; i < d.alpha.numel(); ++i)
        d.alpha[i] = std::max(d.alpha[i], 0.0) + 1.0;
    int c = logits.dim(0);
    int64_t hw = static_cast<int64_t>(logits.dim(1)) * logits.dim(2);
    d.s = Tensor({1, logits.dim(1), logits.dim(2)});
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) d.s[i] += d.alpha[ci * hw + i];
    return d;
}

Tensor expected_probability(const DirichletField& d) {
    int c = d.alpha.dim(0);
    int64_t hw = static_cast<int64_t>(d.alpha.dim(1)) * d.alpha.dim(2);
    Tensor out(d.alpha.shape());
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[ci * hw + i] = d.alpha[ci * hw + i] / d.s[i];
    return out;
}

Tensor uncertainty(const DirichletField& d) {
    int c = d.alpha.dim(0);
    Tensor out(d.s.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<double>(c) / d.s[i];
    return out;
}

double dirichlet_log_density(const std::vector<double>& p, const std::vector<double>& alpha) {
    if (p.size() != alpha.size() || p.empty())
        throw DimensionError("dirichlet_log_density: p/alpha size mismatch");
    double psum = 0.0;
    for (double v : p) {
        if (v <= 0.0) throw ValidationError("dirichlet_log_density: p off the open simplex");
        psum += v;
    }
    if (std::fabs(psum - 1.0) > 1e-6)
        throw ValidationError("dirichlet_log_density: p does not sum to 1");
    double a0 = 0.0, log_beta = 0.0, acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        a0 += alpha[i];
        log_beta += std::lgamma(alpha[i]);
        acc += (alpha[i] - 1.0) * std::log(p[i]);
    }
    log_beta -= std::lgamma(a0);
    return acc - log_beta;
}

double edl_nll_loss(const DirichletField& d, const Tensor& labels) {
    if (!d.alpha.same_shape(labels)) throw DimensionError("edl_nll_loss: label shape mismatch");
    int c = d.alpha.dim(0);
    int64_t hw = static_cast<int64_t>(d.alpha.dim(1)) * d.alpha.dim(2);
    double loss = 0.0;
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i)
            if (labels[ci * hw + i] != 0.0)
                loss += labels[ci * hw + i] * std::log(d.s[i] / d.alpha[ci * hw + i]);
    return loss;
}

DirichletField remove_true_evidence(const DirichletField& d, const Tensor& labels) {
    if (!d.alpha.same_shape(labels))
        throw DimensionError("remove_true_evidence: label shape mismatch");
    DirichletField out;
    out.alpha = d.alpha;
    for (int64_t i = 0; i < out.alpha.numel(); ++i)
        out.alpha[i] = labels[i] + (1.0 - labels[i]) * d.alpha[i];
    int c = out.alpha.dim(0);
    int64_t hw = static_cast<int64_t>(out.alpha.dim(1)) * out.alpha.dim(2);
    out.s = Tensor({1, out.alpha.dim(1), out.alpha.dim(2)});
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out.s[i] += out.alpha[ci * hw + i];
    return out;
}

double kl_to_uniform(const DirichletField& d_tilde) {
    int c = d_tilde.alpha.dim(0);
    int64_t hw = static_cast<int64_t>(d_tilde.alpha.dim(1)) * d_tilde.alpha.dim(2);
    double lgamma_c = std::lgamma(static_cast<double>(c));
    double total = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
        double s = d_tilde.s[i];
        double acc = std::lgamma(s) - lgamma_c;
        double psi_s = boost::math::digamma(s);
        for (int ci = 0; ci < c; ++ci) {
            double a = d_tilde.alpha[ci * hw + i];
            acc -= std::lgamma(a);
            acc += (a - 1.0) * (boost::math::digamma(a) - psi_s);
        }
        total += acc;
    }
    return total;
}

double kl_weight(int64_t it, int64_t total_iterations) {
    if (total_iterations <= 0) throw ValidationError("kl_weight: total iterations must be > 0");
    if (it < 0) throw ValidationError("kl_weight: iteration must be >= 0");
    return std::min(1.0, static_cast<double>(it) / static_cast<double>(total_iterations));
}

ad::Var dirichlet_alpha(const ad::Var& logits) {
    return ad::add_scalar(ad::relu(logits), 1.0);
}

ad::Var expected_probability(const ad::Var& alpha) {
    int c = alpha->value.dim(0);
    ad::Var s = ad::repeat_channel(ad::channel_sum(alpha), c);
    return ad::div(alpha, s);
}

ad::Var edl_nll_loss(const ad::Var& alpha, const Tensor& labels) {
    if (!alpha->value.same_shape(labels))
        throw DimensionError("edl_nll_loss: label shape mismatch");
    int c = alpha->value.dim(0);
    ad::Var log_s = ad::repeat_channel(ad::log_op(ad::channel_sum(alpha)), c);
    ad::Var log_a = ad::log_op(alpha);
    return ad::sum(ad::mul(ad::sub(log_s, log_a), ad::constant(labels)));
}

ad::Var kl_to_uniform(const ad::Var& alpha, const Tensor& labels) {
    if (!alpha->value.same_shape(labels))
        throw DimensionError("kl_to_uniform: label shape mismatch");
    int c = alpha->value.dim(0);
    int64_t hw = static_cast<int64_t>(labels.dim(1)) * labels.dim(2);
    // alpha~ = L + (1-L) . alpha
    Tensor one_minus_l = labels;
    for (int64_t i = 0; i < one_minus_l.numel(); ++i) one_minus_l[i] = 1.0 - one_minus_l[i];
    ad::Var a_tilde =
        ad::add(ad::mul(alpha, ad::constant(one_minus_l)), ad::constant(labels));
    ad::Var s_tilde = ad::channel_sum(a_tilde);

    ad::Var term_s = ad::sum(ad::lgamma_op(s_tilde));
    ad::Var term_a = ad::sum(ad::lgamma_op(a_tilde));
    ad::Var psi_s = ad::repeat_channel(ad::digamma_op(s_tilde), c);
    ad::Var inner = ad::mul(ad::add_scalar(a_tilde, -1.0), ad::sub(ad::digamma_op(a_tilde), psi_s));
    double lgamma_c = std::lgamma(static_cast<double>(c));
    ad::Var kl = ad::add(ad::sub(term_s, term_a), ad::sum(inner));
    return ad::add_scalar(kl, -lgamma_c * static_cast<double>(hw));
}

}  // namespace nrseg::edl
