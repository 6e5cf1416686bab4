#pragma once

#include <cmath>
#include <vector>

#include "foci/errors.hpp"
#include "foci/params.hpp"

namespace foci {

// Adam with decoupled weight decay. Decay is applied only to parameters
// whose ParamRef opts in (matrices, not biases), scaled by the current
// learning rate as in the decoupled formulation.
class AdamW {
public:
    explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<ParamRef>& params, double lr) {
        if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
        if (m_.empty()) {
            for (const auto& r : params) {
                m_.emplace_back(r.node->value.rows, r.node->value.cols);
                v_.emplace_back(r.node->value.rows, r.node->value.cols);
            }
        }
        if (m_.size() != params.size())
            throw ConfigError("optimizer: parameter set changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Node& node = *params[p].node;
            if (!node.requires_grad)
                throw ConfigError("optimizer: stepping a frozen parameter");
            Tensor& value = node.value;
            const Tensor& grad = node.grad;
            for (std::size_t k = 0; k < value.size(); ++k) {
                const double g = grad.data[k];
                if (!std::isfinite(g))
                    throw NumericError("optimizer: non-finite gradient in " +
                                       params[p].name);
                double& m = m_[p].data[k];
                double& v = v_[p].data[k];
                m = beta1_ * m + (1.0 - beta1_) * g;
                v = beta2_ * v + (1.0 - beta2_) * g * g;
                const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
                value.data[k] -= lr * update;
                if (params[p].decay) value.data[k] -= lr * wd_ * value.data[k];
            }
        }
    }

private:
    double wd_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// Linear warmup to `base`, then cosine decay from `base` to `floor_lr` so the
// final epoch lands exactly on the floor.
inline double scheduled_lr(std::size_t epoch, std::size_t epochs, std::size_t warmup,
                           double base, double floor_lr) {
    if (warmup > epochs) throw ConfigError("schedule: warmup exceeds epochs");
    if (epoch < warmup)
        return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
    const std::size_t span = epochs > warmup + 1 ? epochs - 1 - warmup : 1;
    const double t = static_cast<double>(epoch - warmup) / static_cast<double>(span);
    return floor_lr +
           0.5 * (base - floor_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

} // namespace foci
