// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "semt/decoder.hpp"
#include "semt/gradcheck.hpp"
#include "test_util.hpp"

using namespace semt;
using semt::test::random_tensor;

namespace {

FeatureLevels random_levels(std::size_t n, std::size_t rows, std::size_t d, std::mt19937_64& rng) {
    FeatureLevels lv;
    for (std::size_t i = 0; i < n; ++i) lv.levels.push_back(random_tensor({rows, d}, rng));
    return lv;
}

DecoderBlock make_block(ParameterRegistry& reg, const std::string& prefix, bool meshed, std::size_t d,
                        std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    return DecoderBlock::create(reg, prefix, meshed, d, 2, 4 * d, rng);
}

void zero_gate(MeshLayer& layer) {
    for (auto& v : layer.gate->w.mutable_data()) v = 0.0;
    for (auto& v : layer.gate->b.mutable_data()) v = 0.0;
}

Tensor perturb_row(const Tensor& x, std::size_t row, double delta) {
    std::vector<double> data(x.data().begin(), x.data().end());
    for (std::size_t c = 0; c < x.cols(); ++c) data[row * x.cols() + c] += delta;
    return Tensor(x.shape(), data);
}

} // namespace

TEST(MeshLayer, SingleLevelIsGateTimesCross) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    std::mt19937_64 rng(2);
    auto lv = random_levels(1, 6, 8, rng);
    MeshTrace trace;
    auto out = mesh_layer_forward(random_tensor({4, 8}, rng), lv, block.mesh, &trace);
    ASSERT_EQ(trace.cross.size(), 1u);
    EXPECT_TRUE(test::bitwise_equal(out, mul(trace.gates[0], trace.cross[0])));
}

TEST(MeshLayer, ZeroGateHalvesTheSum) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    zero_gate(block.mesh);
    std::mt19937_64 rng(3);
    auto lv = random_levels(3, 5, 8, rng);
    MeshTrace trace;
    auto out = mesh_layer_forward(random_tensor({4, 8}, rng), lv, block.mesh, &trace);
    for (const auto& r : trace.gates)
        for (double v : r.data()) EXPECT_EQ(v, 0.5);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double s = trace.cross[0][i] + trace.cross[1][i] + trace.cross[2][i];
        EXPECT_NEAR(out[i], 0.5 * s, 1e-14);
    }
}

TEST(MeshLayer, IdenticalLevelsWithZeroGate) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    zero_gate(block.mesh);
    std::mt19937_64 rng(4);
    auto e = random_tensor({5, 8}, rng);
    for (std::size_t n : {1u, 2u, 5u}) {
        FeatureLevels lv{std::vector<Tensor>(n, e)};
        MeshTrace trace;
        auto out = mesh_layer_forward(random_tensor({3, 8}, rng), lv, block.mesh, &trace);
        for (std::size_t i = 0; i < out.numel(); ++i)
            EXPECT_NEAR(out[i], 0.5 * double(n) * trace.cross[0][i], 1e-13);
    }
}

TEST(MeshLayer, ForcedUnitGateEqualsPlainCrossAttention) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    block.mesh.gate_mode = GateMode::force_one;
    std::mt19937_64 rng(5);
    auto lv = random_levels(1, 6, 8, rng);
    auto x = random_tensor({4, 8}, rng);
    auto d_a = multi_head_self_attention(x, block.mesh.self_attention, MaskMode::causal);
    auto plain = multi_head_attention(d_a, lv[0], block.mesh.cross_attention, MaskMode::none);
    EXPECT_TRUE(test::bitwise_equal(mesh_layer_forward(x, lv, block.mesh), plain));
}

TEST(MeshLayer, MeshOffUsesLastLevelOnly) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", false, 8);
    EXPECT_FALSE(block.mesh.gate.has_value());
    std::mt19937_64 rng(6);
    auto lv = random_levels(3, 5, 8, rng);
    auto x = random_tensor({4, 8}, rng);
    auto out = mesh_layer_forward(x, lv, block.mesh);
    auto changed = lv;
    changed[0] = random_tensor({5, 8}, rng);
    changed[1] = random_tensor({5, 8}, rng);
    EXPECT_TRUE(test::bitwise_equal(mesh_layer_forward(x, changed, block.mesh), out));
    auto d_a = multi_head_self_attention(x, block.mesh.self_attention, MaskMode::causal);
    EXPECT_TRUE(test::bitwise_equal(out, multi_head_attention(d_a, lv[2], block.mesh.cross_attention, MaskMode::none)));
}

TEST(MeshLayer, MatchesLoopOracleWithThreeLevels) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    std::mt19937_64 rng(7);
    auto lv = random_levels(3, 5, 8, rng);
    auto x = random_tensor({4, 8}, rng);
    auto out = mesh_layer_forward(x, lv, block.mesh);

    const auto& g = *block.mesh.gate;
    auto d_a = multi_head_self_attention(x, block.mesh.self_attention, MaskMode::causal);
    std::vector<double> expect(4 * 8, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
        auto t = multi_head_attention(d_a, lv[i], block.mesh.cross_attention, MaskMode::none);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 8; ++c) {
                double z = g.b[c];
                for (std::size_t k = 0; k < 8; ++k) z += t.at(r, k) * g.w.at(k, c);
                for (std::size_t k = 0; k < 8; ++k) z += d_a.at(r, k) * g.w.at(8 + k, c);
                expect[r * 8 + c] += t.at(r, c) / (1.0 + std::exp(-z));
            }
    }
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(MeshLayer, GateRangeAndAggregationBound) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        auto lv = random_levels(1 + trial % 4, 3 + trial % 3, 8, rng);
        MeshTrace trace;
        auto out = mesh_layer_forward(random_tensor({2 + trial % 5, 8}, rng), lv, block.mesh, &trace);
        for (const auto& r : trace.gates)
            for (double v : r.data()) {
                EXPECT_GT(v, 0.0);
                EXPECT_LT(v, 1.0);
            }
        for (std::size_t i = 0; i < out.numel(); ++i) {
            double bound = 0.0;
            for (const auto& t : trace.cross) bound += std::abs(t[i]);
            EXPECT_LE(std::abs(out[i]), bound + 1e-15);
        }
    }
}

TEST(MeshLayer, EmptyOrMismatchedLevelsAreErrors) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 8);
    EXPECT_THROW(mesh_layer_forward(Tensor::zeros({2, 8}), FeatureLevels{}, block.mesh), ShapeError);
    FeatureLevels bad{{Tensor::zeros({3, 8}), Tensor::zeros({3, 6})}};
    EXPECT_THROW(mesh_layer_forward(Tensor::zeros({2, 8}), bad, block.mesh), ShapeError);
}

TEST(DecoderBlock, ShapeCausalityAndGradcheck) {
    ParameterRegistry reg;
    auto block = make_block(reg, "dec", true, 4);
    std::mt19937_64 rng(9);
    auto lv = random_levels(2, 3, 4, rng);
    auto x = reg.add("x", random_tensor({3, 4}, rng));
    auto out = decoder_block_forward(x, lv, block);
    EXPECT_EQ(out.shape(), x.shape());

    for (std::size_t t = 0; t < 3; ++t) {
        auto pert = decoder_block_forward(perturb_row(x, t, 2.5), lv, block);
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_LT(std::abs(pert.at(r, c) - out.at(r, c)), 1e-12);
    }
    auto rep = finite_diff_gradcheck([&] { return test::readout(decoder_block_forward(x, lv, block)); }, reg);
    EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(DecoderStack, EveryBlockSeesTheSameLevels) {
    ParameterRegistry reg;
    std::vector<DecoderBlock> blocks;
    for (int i = 0; i < 4; ++i) blocks.push_back(make_block(reg, "dec." + std::to_string(i), true, 8, 10 + i));
    std::mt19937_64 rng(10);
    auto lv = random_levels(5, 4, 8, rng);
    std::vector<const FeatureLevels*> seen;
    decoder_forward(random_tensor({3, 8}, rng), lv, blocks, {},
                    [&](std::size_t, const FeatureLevels& l) { seen.push_back(&l); });
    ASSERT_EQ(seen.size(), 4u);
    for (const auto* p : seen) EXPECT_EQ(p, &lv);
}

TEST(DecoderStack, NoBlocksIsIdentity) {
    std::mt19937_64 rng(11);
    auto x = random_tensor({3, 8}, rng);
    auto lv = random_levels(2, 4, 8, rng);
    EXPECT_TRUE(test::bitwise_equal(decoder_forward(x, lv, {}), x));
}

TEST(DecoderStack, CausalThroughTwoBlocks) {
    ParameterRegistry reg;
    std::vector<DecoderBlock> blocks{make_block(reg, "dec.0", true, 8, 1), make_block(reg, "dec.1", true, 8, 2)};
    std::mt19937_64 rng(12);
    auto lv = random_levels(3, 4, 8, rng);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = random_tensor({6, 8}, rng);
        auto base = decoder_forward(x, lv, blocks);
        for (std::size_t t = 0; t < 6; ++t) {
            auto pert = decoder_forward(perturb_row(x, t, -1.5), lv, blocks);
            for (std::size_t r = 0; r < t; ++r)
                for (std::size_t c = 0; c < 8; ++c) EXPECT_LT(std::abs(pert.at(r, c) - base.at(r, c)), 1e-12);
        }
    }
}
