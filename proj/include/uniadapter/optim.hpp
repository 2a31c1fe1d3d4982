#pragma once

// AdamW with decoupled weight decay plus the cosine-decay-with-warmup
// schedule used by every training command.

#include "uniadapter/params.hpp"

namespace uniadapter {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (lr <= 0) throw ConfigError("learning rate must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must lie in [0, 1)");
        if (weight_decay < 0) throw ConfigError("weight decay must be nonnegative");
    }
};

// Linear warmup over the first `warmup_fraction` of steps, then cosine decay
// to zero at `total` steps.
inline double cosine_warmup_lr(double base_lr, std::size_t step, std::size_t total, double warmup_fraction = 0.05) {
    if (total == 0) return base_lr;
    const std::size_t warmup = std::max<std::size_t>(1, static_cast<std::size_t>(warmup_fraction * static_cast<double>(total)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress =
        static_cast<double>(step - warmup) / std::max<double>(1.0, static_cast<double>(total - warmup));
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, progress)));
}

template <typename R>
class AdamW {
public:
    AdamW(ParameterStore<R>& store, OptimizerConfig cfg) : store_(&store), cfg_(cfg) {
        cfg_.validate();
        store.for_each_trainable([&](const std::string& name, Tensor<R>& t) {
            states_.push_back(State{name, t, std::vector<R>(t.numel(), R(0)), std::vector<R>(t.numel(), R(0))});
        });
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& s : states_) n += s.param.numel();
        return n;
    }

    // One update from the accumulated gradients; missing gradients count as
    // zero. Gradients are cleared afterwards.
    void step(double lr) {
        ++t_;
        const R b1 = static_cast<R>(cfg_.beta1), b2 = static_cast<R>(cfg_.beta2);
        const R bias1 = R(1) - static_cast<R>(std::pow(cfg_.beta1, static_cast<double>(t_)));
        const R bias2 = R(1) - static_cast<R>(std::pow(cfg_.beta2, static_cast<double>(t_)));
        for (auto& s : states_) {
            auto& theta = s.param.data();
            const bool has_grad = s.param.has_grad();
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const R g = has_grad ? s.param.grad()[i] : R(0);
                s.m[i] = b1 * s.m[i] + (R(1) - b1) * g;
                s.v[i] = b2 * s.v[i] + (R(1) - b2) * g * g;
                const R mhat = s.m[i] / bias1;
                const R vhat = s.v[i] / bias2;
                theta[i] -= static_cast<R>(lr) * (mhat / (std::sqrt(vhat) + static_cast<R>(cfg_.eps)) +
                                                  static_cast<R>(cfg_.weight_decay) * theta[i]);
            }
            s.param.zero_grad();
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    struct State {
        std::string name;
        Tensor<R> param;  // shares storage with the store entry
        std::vector<R> m, v;
    };
    ParameterStore<R>* store_;
    OptimizerConfig cfg_;
    std::vector<State> states_;
    std::size_t t_ = 0;
};

}  // namespace uniadapter
