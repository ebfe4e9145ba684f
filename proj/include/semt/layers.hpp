// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>

#include "semt/optim.hpp"
#include "semt/tensor.hpp"

namespace semt {

struct LayerNormParams {
    Tensor scale, shift;

    static LayerNormParams create(ParameterRegistry& reg, const std::string& prefix, std::size_t d) {
        return {reg.add(prefix + ".scale", Tensor::filled({d}, 1.0)),
                reg.add(prefix + ".shift", Tensor::zeros({d}))};
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, scale, shift); }
};

/// Two affine layers with a Relu between them.
struct FeedForward {
    Tensor w1, b1, w2, b2;

    template <class Rng>
    static FeedForward create(ParameterRegistry& reg, const std::string& prefix, std::size_t d_model,
                              std::size_t d_ff, Rng& rng) {
        FeedForward f;
        f.w1 = reg.add(prefix + ".w1", Tensor::randn({d_model, d_ff}, 1.0 / std::sqrt(double(d_model)), rng));
        f.b1 = reg.add(prefix + ".b1", Tensor::zeros({d_ff}));
        f.w2 = reg.add(prefix + ".w2", Tensor::randn({d_ff, d_model}, 1.0 / std::sqrt(double(d_ff)), rng));
        f.b2 = reg.add(prefix + ".b2", Tensor::zeros({d_model}));
        return f;
    }

    Tensor operator()(const Tensor& x) const { return affine(relu(affine(x, w1, b1)), w2, b2); }
};

/// Training-time dropout applied to sublayer outputs. A default-constructed
/// value (or rate 0) is the identity.
struct Dropout {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;

    Tensor operator()(const Tensor& x) const {
        if (rate <= 0.0 || rng == nullptr) return x;
        return dropout(x, rate, *rng);
    }
};

} // namespace semt
