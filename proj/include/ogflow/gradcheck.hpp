#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ogflow/autodiff.hpp"
#include "ogflow/tensor.hpp"

// Central finite-difference verification of analytic gradients. Runs in
// float64 only; the tolerances are meaningless in float32.

namespace ogflow {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

/// make_loss receives fresh leaf Values built from `leaves` and must return
/// a scalar. The harness compares backward() against (L(x+h)-L(x-h))/2h for
/// every element of every leaf. Relative error uses denominator
/// max(|analytic|, |numeric|, 1).
inline GradCheckResult grad_check(
    std::vector<Tensor<double>*> leaves,
    const std::function<Value<double>(const std::vector<Value<double>>&)>& make_loss,
    double h = 1e-5) {
    auto build = [&]() {
        std::vector<Value<double>> vals;
        vals.reserve(leaves.size());
        for (auto* t : leaves) vals.push_back(Value<double>::leaf(*t, true));
        return std::make_pair(vals, Value<double>());
    };

    // Analytic pass.
    std::vector<Value<double>> vals;
    for (auto* t : leaves) vals.push_back(Value<double>::leaf(*t, true));
    Value<double> loss = make_loss(vals);
    backward(loss);
    std::vector<Tensor<double>> analytic;
    for (auto& v : vals)
        analytic.push_back(v.has_grad() ? v.grad() : Tensor<double>::zeros(v.shape()));

    auto eval = [&]() {
        std::vector<Value<double>> vs;
        for (auto* t : leaves) vs.push_back(Value<double>::leaf(*t, false));
        return make_loss(vs).data().v[0];
    };

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor<double>& t = *leaves[li];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = t.v[i];
            t.v[i] = orig + h;
            const double lp = eval();
            t.v[i] = orig - h;
            const double lm = eval();
            t.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[li].v[i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(an - fd) / denom);
            ++res.checked;
        }
    }
    return res;
}

/// Variant for persistent leaves (e.g. model parameters): the same leaf
/// Values are reused across evaluations and perturbed in place. make_loss
/// must rebuild the forward graph from the leaves' current data.
inline GradCheckResult leaf_grad_check(std::vector<Value<double>> leaves,
                                       const std::function<Value<double>()>& make_loss,
                                       double h = 1e-5) {
    for (auto& l : leaves) l.reset_grad();
    Value<double> loss = make_loss();
    backward(loss);
    std::vector<Tensor<double>> analytic;
    for (auto& l : leaves)
        analytic.push_back(l.has_grad() ? l.grad() : Tensor<double>::zeros(l.shape()));

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor<double>& t = leaves[li].data();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = t.v[i];
            t.v[i] = orig + h;
            const double lp = make_loss().data().v[0];
            t.v[i] = orig - h;
            const double lm = make_loss().data().v[0];
            t.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[li].v[i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(an - fd) / denom);
            ++res.checked;
        }
    }
    for (auto& l : leaves) l.reset_grad();
    return res;
}

} // namespace ogflow
