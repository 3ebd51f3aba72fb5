#ifndef NRSEG_GRADCHECK_HPP
#define NRSEG_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "nrseg/autodiff.hpp"

namespace nrseg::gradcheck {

struct Result {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t entries = 0;
};

// Central finite differences against reverse-mode gradients. `build` must
// rebuild the scalar loss graph from the current parameter values on every
// call; params are perturbed in place.
inline Result check(const std::function<ad::Var()>& build, const std::vector<ad::Var>& params,
                    double step = 1e-4) {
    for (const auto& p : params) {
        p->grad = Tensor();
        p->ensure_grad();
    }
    ad::Var root = build();
    ad::backward(root);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    Result res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        ad::Node* p = params[pi].get();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            double saved = p->value[i];
            p->value[i] = saved + step;
            double up = ad::scalar_value(build());
            p->value[i] = saved - step;
            double down = ad::scalar_value(build());
            p->value[i] = saved;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic[pi][i];
            double abs_err = std::fabs(a - numeric);
            double rel_err = abs_err / std::max({std::fabs(numeric), std::fabs(a), 1e-8});
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            res.max_rel_err = std::max(res.max_rel_err, rel_err);
            ++res.entries;
        }
    }
    return res;
}

}  // namespace nrseg::gradcheck

#endif  // NRSEG_GRADCHECK_HPP
