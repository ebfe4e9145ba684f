// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file attention.hpp
 * @brief Traditional, memory-augmented and static-expansion attention.
 *
 * All sequences are row-major [positions × features] matrices. Projections
 * follow the x·W convention, so every weight matrix is laid out [in × out].
 */

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "semt/optim.hpp"
#include "semt/tensor.hpp"

namespace semt {

enum class MaskMode { none, causal };

inline constexpr double kMaskedLogit = -1e9;

struct AttentionWeights {
    Tensor w_q, w_k, w_v, w_o;
    std::size_t heads = 1;

    std::size_t d_model() const { return w_q.rows(); }
    std::size_t d_k() const { return d_model() / heads; }

    template <class Rng>
    static AttentionWeights create(ParameterRegistry& reg, const std::string& prefix, std::size_t d_model,
                                   std::size_t heads, Rng& rng) {
        if (heads == 0 || d_model % heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                              std::to_string(heads));
        }
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
        AttentionWeights w;
        w.heads = heads;
        w.w_q = reg.add(prefix + ".w_q", Tensor::randn({d_model, d_model}, sd, rng));
        w.w_k = reg.add(prefix + ".w_k", Tensor::randn({d_model, d_model}, sd, rng));
        w.w_v = reg.add(prefix + ".w_v", Tensor::randn({d_model, d_model}, sd, rng));
        w.w_o = reg.add(prefix + ".w_o", Tensor::randn({d_model, d_model}, sd, rng));
        return w;
    }
};

/// Learnable key/value slots appended after the projected keys and values.
struct MemorySlots {
    Tensor m_k, m_v;

    std::size_t slots() const { return m_k.defined() ? m_k.rows() : 0; }

    template <class Rng>
    static MemorySlots create(ParameterRegistry& reg, const std::string& prefix, std::size_t n_mem,
                              std::size_t d_model, Rng& rng) {
        MemorySlots m;
        if (n_mem == 0) return m;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
        m.m_k = reg.add(prefix + ".mem_k", Tensor::randn({n_mem, d_model}, sd, rng));
        m.m_v = reg.add(prefix + ".mem_v", Tensor::randn({n_mem, d_model}, sd, rng));
        return m;
    }
};

/// Expansion directions P, laid out [d_model × L_exp].
struct ExpansionMatrix {
    Tensor p;

    std::size_t length() const { return p.cols(); }

    template <class Rng>
    static ExpansionMatrix create(ParameterRegistry& reg, const std::string& prefix, std::size_t d_model,
                                  std::size_t l_exp, Rng& rng) {
        if (l_exp == 0) throw ConfigError("expansion length must be at least 1");
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
        return {reg.add(prefix + ".expansion_p", Tensor::randn({d_model, l_exp}, sd, rng))};
    }
};

/// Additive logit bias: 0 where attention is allowed, kMaskedLogit where not.
inline Tensor mask_bias(std::size_t queries, std::size_t keys, MaskMode mode) {
    std::vector<double> bias(queries * keys, 0.0);
    if (mode == MaskMode::causal) {
        for (std::size_t i = 0; i < queries; ++i)
            for (std::size_t j = i + 1; j < keys; ++j) bias[i * keys + j] = kMaskedLogit;
    }
    return Tensor({queries, keys}, std::move(bias));
}

/// softmax(q·kᵀ/√d_k + mask)·v. When `weights_out` is given the attention
/// probabilities are stored there.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, MaskMode mask,
                                   Tensor* weights_out = nullptr) {
    detail::require_rank2(q, "scaled_dot_attention");
    detail::require_rank2(k, "scaled_dot_attention");
    detail::require_rank2(v, "scaled_dot_attention");
    if (q.cols() != k.cols() || k.rows() != v.rows()) {
        throw ShapeError("scaled_dot_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " are incompatible");
    }
    if (mask == MaskMode::causal && q.rows() != k.rows()) {
        throw ShapeError("scaled_dot_attention: causal mask needs square logits, got " +
                         std::to_string(q.rows()) + " queries and " + std::to_string(k.rows()) + " keys");
    }
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
    if (mask == MaskMode::causal) logits = add(logits, mask_bias(q.rows(), k.rows(), mask));
    Tensor weights = softmax_rows(logits);
    if (weights_out) *weights_out = weights;
    return matmul(weights, v);
}

/// Multi-head attention with queries from `query_src` and keys/values from
/// `kv_src`. Memory slots, when present, are appended to the projected keys
/// and values before the head split. `head_weights`, if given, receives the
/// per-head attention probabilities.
inline Tensor multi_head_attention(const Tensor& query_src, const Tensor& kv_src, const AttentionWeights& w,
                                   MaskMode mask, const MemorySlots* mem = nullptr,
                                   std::vector<Tensor>* head_weights = nullptr) {
    const std::size_t d = w.d_model();
    if (query_src.rank() != 2 || query_src.cols() != d || kv_src.rank() != 2 || kv_src.cols() != d) {
        throw ShapeError("multi_head_attention: inputs " + shape_str(query_src.shape()) + " and " +
                         shape_str(kv_src.shape()) + " do not match d_model " + std::to_string(d));
    }
    const bool with_memory = mem && mem->slots() > 0;
    if (with_memory && mask == MaskMode::causal) {
        throw ConfigError("memory slots cannot be combined with a causal mask");
    }
    Tensor q = matmul(query_src, w.w_q);
    Tensor k = matmul(kv_src, w.w_k);
    Tensor v = matmul(kv_src, w.w_v);
    if (with_memory) {
        if (mem->m_k.cols() != d || mem->m_v.shape() != mem->m_k.shape()) {
            throw ShapeError("memory slots " + shape_str(mem->m_k.shape()) + " do not match d_model " +
                             std::to_string(d));
        }
        k = concat_rows({k, mem->m_k});
        v = concat_rows({v, mem->m_v});
    }
    if (head_weights) head_weights->clear();

    Tensor merged;
    if (w.heads == 1) {
        Tensor weights;
        merged = scaled_dot_attention(q, k, v, mask, &weights);
        if (head_weights) head_weights->push_back(weights);
    } else {
        const std::size_t dk = w.d_k();
        std::vector<Tensor> outs;
        outs.reserve(w.heads);
        for (std::size_t h = 0; h < w.heads; ++h) {
            const std::size_t b = h * dk, e = b + dk;
            Tensor weights;
            outs.push_back(scaled_dot_attention(slice_cols(q, b, e), slice_cols(k, b, e), slice_cols(v, b, e),
                                                mask, &weights));
            if (head_weights) head_weights->push_back(weights);
        }
        merged = concat_cols(outs);
    }
    return matmul(merged, w.w_o);
}

inline Tensor multi_head_self_attention(const Tensor& x, const AttentionWeights& w, MaskMode mask,
                                        const MemorySlots* mem = nullptr,
                                        std::vector<Tensor>* head_weights = nullptr) {
    return multi_head_attention(x, x, w, mask, mem, head_weights);
}

/// Static expansion over the full feature width:
///   M = normalize_rows(relu(x·P))   [F × L_exp]
///   I = Mᵀ·x                        [L_exp × d]   (expanded sequence)
///   O = M·I                         [F × d]
inline Tensor static_expansion(const Tensor& x, const ExpansionMatrix& exp, Tensor* expanded_out = nullptr) {
    detail::require_rank2(x, "static_expansion");
    if (x.cols() != exp.p.rows()) {
        throw ShapeError("static_expansion: input " + shape_str(x.shape()) + " does not match P " +
                         shape_str(exp.p.shape()));
    }
    Tensor m = l2_normalize_rows(relu(matmul(x, exp.p)));
    Tensor expanded = matmul(transpose(m), x);
    if (expanded_out) *expanded_out = expanded;
    return matmul(m, expanded);
}

} // namespace semt
