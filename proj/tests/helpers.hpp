#pragma once

#include <functional>

#include "tavit/tensor.hpp"

namespace tavit::testing {

inline Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    auto t = make_tensor<double>(std::move(shape));
    for (auto& v : t->data) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor<float> random_tensorf(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    auto t = make_tensor<float>(std::move(shape));
    for (auto& v : t->data) v = float(rng.uniform(lo, hi));
    return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    double m = 0;
    for (size_t i = 0; i < a->data.size(); ++i)
        m = std::max(m, std::abs(double(a->data[i]) - double(b->data[i])));
    return m;
}

// Scalar wrapper so gradient checks can target a multi-output op: the loss is
// a fixed random linear functional of the op output.
inline std::function<Tensor<double>(const Tensor<double>&)> weighted_sum(
    const std::function<Tensor<double>(const Tensor<double>&)>& op, uint64_t seed) {
    return [op, seed](const Tensor<double>& x) {
        auto y = op(x);
        Rng rng(seed);
        auto wgt = make_tensor<double>(y->shape);
        for (auto& v : wgt->data) v = rng.uniform(-1.0, 1.0);
        return sum_all(mul(y, wgt));
    };
}

}  // namespace tavit::testing
