#pragma once

#include <string>
#include <vector>

#include "foci/graph.hpp"
#include "foci/rng.hpp"

namespace foci {

// One trainable leaf with its name (checkpoint key) and whether decoupled
// weight decay applies (biases and other 1-d parameters are excluded).
struct ParamRef {
    std::string name;
    NodePtr node;
    bool decay = true;
};

// Ordered parameter registry shared by the models and the optimizer. Order
// is registration order and is part of the determinism contract.
class ParamList {
public:
    NodePtr add(std::string name, Tensor init, bool decay = true) {
        auto node = parameter(std::move(init));
        refs_.push_back({std::move(name), node, decay});
        return node;
    }

    std::vector<ParamRef>& refs() { return refs_; }
    const std::vector<ParamRef>& refs() const { return refs_; }

    NodePtr find(const std::string& name) const {
        for (const auto& r : refs_)
            if (r.name == name) return r.node;
        return nullptr;
    }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (const auto& r : refs_) n += r.node->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& r : refs_) r.node->zero_grad();
    }

    // Drops every leaf out of gradient tracking; forwards through these
    // parameters still carry gradients from other inputs but the leaves
    // themselves stop accumulating and can no longer be stepped.
    void freeze() {
        for (auto& r : refs_) {
            r.node->requires_grad = false;
            r.node->grad = Tensor();
        }
    }

    bool frozen() const {
        for (const auto& r : refs_)
            if (r.node->requires_grad) return false;
        return true;
    }

private:
    std::vector<ParamRef> refs_;
};

inline Tensor gaussian_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Tensor t(rows, cols);
    for (double& v : t.data) v = stddev * rng.gaussian();
    return t;
}

// N(0, 1/fan_in) for a matrix applied as x @ W.
inline Tensor linear_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    return gaussian_init(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

} // namespace foci
