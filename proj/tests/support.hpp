#pragma once

#include "mdsq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mdsq::testing {

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct FdResult {
    double max_rel_err = 0.0;
    std::vector<std::vector<double>> analytic;
    std::vector<std::vector<double>> numeric;
};

// Central differences over every element of every input. The error of each
// input is max|a - n| / max(max|a|, max|n|, floor), taken over that tensor.
inline FdResult finite_difference_check(std::vector<Tensor>& inputs, const LossFn& f, double h = 1e-5,
                                        double floor = 1e-8)
{
    FdResult r;
    for (Tensor& t : inputs)
        t.clear_grad();
    {
        Tape tape;
        std::vector<Var> leaves;
        for (Tensor& t : inputs)
            leaves.push_back(tape.leaf(t));
        tape.backward(f(tape, leaves));
    }
    auto value = [&]() {
        Tape tape;
        std::vector<Var> vs;
        for (const Tensor& t : inputs)
            vs.push_back(tape.watch(t));
        return f(tape, vs).value().item();
    };
    for (Tensor& t : inputs) {
        std::vector<double> a(t.grad().begin(), t.grad().end());
        std::vector<double> n(t.size());
        double diff = 0.0, scale = floor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double up = value();
            t.data()[i] = saved - h;
            const double down = value();
            t.data()[i] = saved;
            n[i] = (up - down) / (2 * h);
            diff = std::max(diff, std::abs(a[i] - n[i]));
            scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
        }
        r.max_rel_err = std::max(r.max_rel_err, diff / scale);
        r.analytic.push_back(std::move(a));
        r.numeric.push_back(std::move(n));
    }
    return r;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace mdsq::testing
