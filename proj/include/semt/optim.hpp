// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "semt/tensor.hpp"

namespace semt {

struct Parameter {
    std::string name;
    Tensor tensor;
};

/// Ordered set of uniquely named trainable tensors. Order is registration
/// order and is what checkpoints and optimizers iterate over.
class ParameterRegistry {
public:
    Tensor add(std::string name, Tensor t) {
        if (name.empty()) throw ConfigError("parameter name must be nonempty");
        if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        if (!t.requires_grad()) t = Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
        index_[name] = params_.size();
        params_.push_back({std::move(name), t});
        return t;
    }

    const Parameter* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return params_[it->second].tensor;
    }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;

    struct Moments {
        std::vector<double> first;
        std::vector<double> second;
    };
    std::map<std::string, Moments> moments;
};

/// One bias-corrected Adam update over every registered parameter, using
/// the gradients currently stored on the parameter tensors.
inline void adam_step(ParameterRegistry& params, AdamState& state, double lr) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) throw TrainingError("missing gradient for parameter '" + p.name + "'");
    }
    state.step += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& p : params) {
        auto& mom = state.moments[p.name];
        const std::size_t n = p.tensor.numel();
        if (mom.first.size() != n) {
            mom.first.assign(n, 0.0);
            mom.second.assign(n, 0.0);
        }
        auto w = p.tensor.mutable_data();
        auto g = p.tensor.grad();
        for (std::size_t i = 0; i < n; ++i) {
            mom.first[i] = state.beta1 * mom.first[i] + (1.0 - state.beta1) * g[i];
            mom.second[i] = state.beta2 * mom.second[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = mom.first[i] / c1;
            const double v_hat = mom.second[i] / c2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

/// Constant learning rate for the first `constant_epochs` epochs, then
/// exponential decay by `decay` per epoch.
struct LrSchedule {
    double base = 1e-4;
    double decay = 0.95;
    int constant_epochs = 5;

    double at(int epoch) const {
        if (epoch < constant_epochs) return base;
        return base * std::pow(decay, epoch - constant_epochs + 1);
    }
};

} // namespace semt
