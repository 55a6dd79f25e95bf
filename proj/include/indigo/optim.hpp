#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "indigo/config.hpp"
#include "indigo/params.hpp"
#include "indigo/tensor.hpp"

namespace indigo {

/// One SGD step on a single tensor: weight decay is added to the gradient
/// (g <- g + wd * p), then the nesterov momentum recurrence
///   v <- mu * v + g;  p <- p - lr * (g + mu * v)   (nesterov)
///   v <- mu * v + g;  p <- p - lr * v              (plain momentum)
template <typename T>
void sgd_nesterov_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
                         double weight_decay, double momentum, bool nesterov) {
    if (!param.same_shape(grad)) throw std::invalid_argument("sgd: grad shape mismatch");
    if (velocity.numel() == 0) velocity = Tensor<T>(param.shape);
    for (long i = 0; i < param.numel(); ++i) {
        const double g = static_cast<double>(grad.data[i]) +
                         weight_decay * static_cast<double>(param.data[i]);
        if (std::isnan(g)) throw std::runtime_error("sgd: NaN gradient encountered");
        double v = momentum * static_cast<double>(velocity.data[i]) + g;
        velocity.data[i] = static_cast<T>(v);
        const double d = nesterov ? g + momentum * v : v;
        param.data[i] = static_cast<T>(static_cast<double>(param.data[i]) - lr * d);
    }
}

/// Two parameter groups at their own learning rates (visual branch vs fusion
/// side), sharing decay/momentum settings. Owns the per-parameter velocity.
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(ParamStore<T>& store, const OptimConfig& cfg)
        : store_(&store), cfg_(cfg), velocity_(static_cast<std::size_t>(store.size())) {}

    void add_group(std::vector<int> param_ids, double base_lr) {
        groups_.push_back(Group{std::move(param_ids), base_lr});
    }

    /// lr_scale multiplies every group's base rate (the epoch schedule).
    void step(const GradSink<T>& grads, double lr_scale) {
        for (const auto& g : groups_) {
            for (int pid : g.param_ids) {
                if (!store_->trainable(pid) || !grads.touched(pid)) continue;
                sgd_nesterov_update(store_->value(pid), grads.raw(pid), velocity_[pid],
                                    g.base_lr * lr_scale, cfg_.weight_decay, cfg_.momentum,
                                    cfg_.nesterov);
            }
        }
    }

private:
    struct Group {
        std::vector<int> param_ids;
        double base_lr;
    };
    ParamStore<T>* store_;
    OptimConfig cfg_;
    std::vector<Tensor<T>> velocity_;
    std::vector<Group> groups_;
};

} // namespace indigo
