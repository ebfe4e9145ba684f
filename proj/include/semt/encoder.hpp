// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semt/attention.hpp"
#include "semt/layers.hpp"

namespace semt {

enum class AttentionKind { traditional, memory_augmented, static_expansion };

inline const char* to_string(AttentionKind k) {
    switch (k) {
    case AttentionKind::traditional: return "traditional";
    case AttentionKind::memory_augmented: return "memory-augmented";
    case AttentionKind::static_expansion: return "static-expansion";
    }
    return "?";
}

struct EncoderBlock {
    AttentionKind kind = AttentionKind::traditional;
    LayerNormParams norm1, norm2;
    std::optional<AttentionWeights> attention;  // traditional / memory-augmented
    MemorySlots memory;                         // memory-augmented only
    std::optional<ExpansionMatrix> expansion;   // static-expansion only
    FeedForward ffn;

    template <class Rng>
    static EncoderBlock create(ParameterRegistry& reg, const std::string& prefix, AttentionKind kind,
                               std::size_t d_model, std::size_t heads, std::size_t d_ff, std::size_t n_mem,
                               std::size_t l_exp, Rng& rng) {
        EncoderBlock b;
        b.kind = kind;
        b.norm1 = LayerNormParams::create(reg, prefix + ".norm1", d_model);
        if (kind == AttentionKind::static_expansion) {
            b.expansion = ExpansionMatrix::create(reg, prefix + ".attn", d_model, l_exp, rng);
        } else {
            b.attention = AttentionWeights::create(reg, prefix + ".attn", d_model, heads, rng);
            if (kind == AttentionKind::memory_augmented) {
                b.memory = MemorySlots::create(reg, prefix + ".attn", n_mem, d_model, rng);
            }
        }
        b.norm2 = LayerNormParams::create(reg, prefix + ".norm2", d_model);
        b.ffn = FeedForward::create(reg, prefix + ".ffn", d_model, d_ff, rng);
        return b;
    }

    std::size_t d_model() const { return norm1.scale.numel(); }

    Tensor attend(const Tensor& x) const {
        if (kind == AttentionKind::static_expansion) return static_expansion(x, *expansion);
        return multi_head_self_attention(x, *attention, MaskMode::none,
                                         kind == AttentionKind::memory_augmented ? &memory : nullptr);
    }
};

/// Backbone output followed by every encoder block output, in order.
struct FeatureLevels {
    std::vector<Tensor> levels;

    std::size_t size() const { return levels.size(); }
    bool empty() const { return levels.empty(); }
    const Tensor& operator[](std::size_t i) const { return levels[i]; }
    Tensor& operator[](std::size_t i) { return levels[i]; }
    const Tensor& back() const { return levels.back(); }
};

/// Pre-norm residual block: h = x + Attn(LN(x)); out = h + FFN(LN(h)).
inline Tensor encoder_block_forward(const Tensor& x, const EncoderBlock& block, const Dropout& drop = {}) {
    if (x.rank() != 2 || x.cols() != block.d_model()) {
        throw ShapeError("encoder block expects width " + std::to_string(block.d_model()) + ", got " +
                         shape_str(x.shape()));
    }
    Tensor h = add(x, drop(block.attend(block.norm1(x))));
    return add(h, drop(block.ffn(block.norm2(h))));
}

inline FeatureLevels encoder_forward(const Tensor& e1, std::span<const EncoderBlock> blocks,
                                     const Dropout& drop = {}) {
    FeatureLevels out;
    out.levels.reserve(blocks.size() + 1);
    out.levels.push_back(e1);
    for (const auto& b : blocks) out.levels.push_back(encoder_block_forward(out.levels.back(), b, drop));
    return out;
}

} // namespace semt
