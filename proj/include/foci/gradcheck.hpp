#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "foci/graph.hpp"

namespace foci {

// Central-difference gradient verification. `build` must construct a fresh
// scalar graph from the current leaf values on every call. Returns the worst
// error max |analytic - numeric| / max(1, |numeric|) over all leaf elements.
inline double grad_check(
    const std::function<NodePtr(const std::vector<NodePtr>&)>& build,
    const std::vector<NodePtr>& leaves, double step = 1e-5) {
    for (const auto& leaf : leaves) leaf->zero_grad();
    NodePtr root = build(leaves);
    backward(root);

    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) analytic.push_back(leaf->grad);

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& v = leaves[li]->value;
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double saved = v.data[k];
            v.data[k] = saved + step;
            const double up = build(leaves)->value.item();
            v.data[k] = saved - step;
            const double down = build(leaves)->value.item();
            v.data[k] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double err = std::abs(analytic[li].data[k] - numeric) /
                               std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace foci
