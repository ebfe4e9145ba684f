// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file decoder.hpp
 * @brief Mesh decoder: causal self-attention, cross-attention against every
 * feature level, sigmoid gating and gated aggregation.
 *
 * Within one mesh layer the cross-attention weights and the gate are shared
 * across levels. The aggregation is a plain sum over levels (no 1/√I
 * rescaling).
 */

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semt/attention.hpp"
#include "semt/encoder.hpp"
#include "semt/layers.hpp"

namespace semt {

/// R = sigmoid(concat(T, D_a)·W + b), W laid out [2·d_model × d_model].
struct MeshGate {
    Tensor w, b;

    template <class Rng>
    static MeshGate create(ParameterRegistry& reg, const std::string& prefix, std::size_t d_model, Rng& rng) {
        return {reg.add(prefix + ".gate_w",
                        Tensor::randn({2 * d_model, d_model}, 1.0 / std::sqrt(2.0 * double(d_model)), rng)),
                reg.add(prefix + ".gate_b", Tensor::zeros({d_model}))};
    }
};

/// How the gate output is produced. `force_one` replaces R_i by 1 and exists
/// so tests can compare the mesh against a plain cross-attention layer.
enum class GateMode { sigmoid, force_one };

struct MeshLayer {
    AttentionWeights self_attention;
    AttentionWeights cross_attention;
    /// Absent when the mesh is switched off: the layer then cross-attends to
    /// the last feature level only and applies no gate.
    std::optional<MeshGate> gate;
    GateMode gate_mode = GateMode::sigmoid;

    std::size_t d_model() const { return self_attention.d_model(); }
};

/// Intermediate values of one mesh layer evaluation.
struct MeshTrace {
    Tensor d_a;
    std::vector<Tensor> cross;  // T_i
    std::vector<Tensor> gates;  // R_i
};

inline Tensor mesh_layer_forward(const Tensor& d_prev, const FeatureLevels& levels, const MeshLayer& layer,
                                 MeshTrace* trace = nullptr) {
    if (levels.empty()) throw ShapeError("mesh layer needs at least one feature level");
    const std::size_t d = layer.d_model();
    for (const auto& e : levels.levels) {
        if (e.rank() != 2 || e.cols() != d) {
            throw ShapeError("feature level " + shape_str(e.shape()) + " does not match d_model " +
                             std::to_string(d));
        }
    }
    Tensor d_a = multi_head_self_attention(d_prev, layer.self_attention, MaskMode::causal);
    if (trace) *trace = MeshTrace{d_a, {}, {}};

    if (!layer.gate) {
        Tensor t = multi_head_attention(d_a, levels.back(), layer.cross_attention, MaskMode::none);
        if (trace) trace->cross.push_back(t);
        return t;
    }

    Tensor out;
    for (const auto& e : levels.levels) {
        Tensor t = multi_head_attention(d_a, e, layer.cross_attention, MaskMode::none);
        Tensor term;
        if (layer.gate_mode == GateMode::force_one) {
            term = t;
            if (trace) trace->gates.push_back(Tensor::filled(t.shape(), 1.0));
        } else {
            Tensor r = sigmoid(affine(concat_cols({t, d_a}), layer.gate->w, layer.gate->b));
            term = mul(r, t);
            if (trace) trace->gates.push_back(r);
        }
        if (trace) trace->cross.push_back(t);
        out = out.defined() ? add(out, term) : term;
    }
    return out;
}

struct DecoderBlock {
    MeshLayer mesh;
    LayerNormParams norm1, norm2;
    FeedForward ffn;

    template <class Rng>
    static DecoderBlock create(ParameterRegistry& reg, const std::string& prefix, bool meshed, std::size_t d_model,
                               std::size_t heads, std::size_t d_ff, Rng& rng) {
        DecoderBlock b;
        b.norm1 = LayerNormParams::create(reg, prefix + ".norm1", d_model);
        b.mesh.self_attention = AttentionWeights::create(reg, prefix + ".self_attn", d_model, heads, rng);
        b.mesh.cross_attention = AttentionWeights::create(reg, prefix + ".cross_attn", d_model, heads, rng);
        if (meshed) b.mesh.gate = MeshGate::create(reg, prefix + ".mesh", d_model, rng);
        b.norm2 = LayerNormParams::create(reg, prefix + ".norm2", d_model);
        b.ffn = FeedForward::create(reg, prefix + ".ffn", d_model, d_ff, rng);
        return b;
    }
};

/// Pre-norm residual wiring around the mesh layer and the FFN.
inline Tensor decoder_block_forward(const Tensor& d_prev, const FeatureLevels& levels, const DecoderBlock& block,
                                    const Dropout& drop = {}) {
    if (d_prev.rank() != 2 || d_prev.cols() != block.mesh.d_model()) {
        throw ShapeError("decoder block expects width " + std::to_string(block.mesh.d_model()) + ", got " +
                         shape_str(d_prev.shape()));
    }
    Tensor h = add(d_prev, drop(mesh_layer_forward(block.norm1(d_prev), levels, block.mesh)));
    return add(h, drop(block.ffn(block.norm2(h))));
}

/// Called once per block with the levels object that block consumed.
using LevelsObserver = std::function<void(std::size_t block, const FeatureLevels& levels)>;

inline Tensor decoder_forward(const Tensor& d1, const FeatureLevels& levels, std::span<const DecoderBlock> blocks,
                              const Dropout& drop = {}, const LevelsObserver& observer = {}) {
    Tensor x = d1;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (observer) observer(i, levels);
        x = decoder_block_forward(x, levels, blocks[i], drop);
    }
    return x;
}

} // namespace semt
