// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "semt/data.hpp"
#include "semt/gradcheck.hpp"
#include "semt/model.hpp"
#include "test_util.hpp"

using namespace semt;

namespace {

TokenSequence random_caption(std::size_t L, std::size_t V, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> word(4, int(V) - 1);
    TokenSequence s{std::vector<int>(L, kPadId), L};
    s.ids[0] = kBosId;
    for (std::size_t i = 1; i < L; ++i) s.ids[i] = word(rng);
    return s;
}

Tensor random_image(const ModelConfig& c, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto s = std::size_t(c.image_size);
    std::vector<double> px(s * s * std::size_t(c.channels));
    for (auto& v : px) v = u(rng);
    return Tensor({s, s, std::size_t(c.channels)}, px);
}

ModelConfig small_config(Variant v) {
    auto c = ModelConfig::toy();
    c.variant = v;
    c.d_model = 16;
    c.heads = 2;
    c.enc_blocks = 2;
    c.dec_blocks = 2;
    c.max_len = 8;
    c.vocab_size = 12;
    return c;
}

bool has_name_containing(const CaptionModel& m, const std::string& needle) {
    for (const auto& p : m.parameters())
        if (p.name.find(needle) != std::string::npos) return true;
    return false;
}

} // namespace

TEST(Variants, WiringMatrix) {
    EXPECT_EQ(parse_variant("M5"), Variant::m5);
    EXPECT_THROW(parse_variant("m6"), ConfigError);
    const auto t1 = traits(Variant::m1), t3 = traits(Variant::m3), t5 = traits(Variant::m5);
    EXPECT_FALSE(t1.mesh || t1.memory || t1.static_expansion);
    EXPECT_TRUE(t3.mesh && t3.memory && !t3.static_expansion);
    EXPECT_TRUE(t5.mesh && !t5.memory && t5.static_expansion);
}

TEST(BuildModel, M5CarriesExpansionButNoMemory) {
    auto m = build_model(small_config(Variant::m5));
    for (const auto& b : m.encoder_blocks()) {
        EXPECT_TRUE(b.expansion.has_value());
        EXPECT_EQ(b.memory.slots(), 0u);
        EXPECT_EQ(b.expansion->length(), 32u);  // 2 x 16 patches
    }
    for (const auto& b : m.decoder_blocks()) EXPECT_TRUE(b.mesh.gate.has_value());
}

TEST(BuildModel, ParameterNameAudit) {
    for (auto v : kAllVariants) {
        auto m = build_model(small_config(v));
        const auto t = traits(v);
        EXPECT_EQ(has_name_containing(m, "mem_"), t.memory) << to_string(v);
        EXPECT_EQ(has_name_containing(m, "expansion_p"), t.static_expansion) << to_string(v);
        EXPECT_EQ(has_name_containing(m, "encoder.0.attn.w_q"), !t.static_expansion) << to_string(v);
        EXPECT_EQ(has_name_containing(m, "mesh.gate"), t.mesh) << to_string(v);
        EXPECT_TRUE(m.parameters().find("head.w") != nullptr);
        EXPECT_TRUE(m.parameters().find("embedding.tokens") != nullptr);
    }
}

TEST(BuildModel, MeshAddsExactlyTheGates) {
    auto c = small_config(Variant::m1);
    const auto m1 = build_model(c).parameters().scalar_count();
    c.variant = Variant::m2;
    const auto m2 = build_model(c).parameters().scalar_count();
    const auto d = std::size_t(c.d_model);
    EXPECT_EQ(m2, m1 + std::size_t(c.dec_blocks) * (2 * d * d + d));
}

TEST(BuildModel, InvalidConfigsAreRejected) {
    auto c = small_config(Variant::m1);
    c.heads = 3;
    EXPECT_THROW(build_model(c), ConfigError);
    c = small_config(Variant::m1);
    c.patch_size = 7;
    EXPECT_THROW(build_model(c), ConfigError);
}

TEST(Forward, ShapeDeterminismAndSeedSensitivity) {
    std::mt19937_64 rng(1);
    auto c = small_config(Variant::m5);
    auto img = random_image(c, rng);
    auto cap = random_caption(8, 12, rng);
    auto a = build_model(c).forward(img, cap);
    auto b = build_model(c).forward(img, cap);
    EXPECT_EQ(a.shape(), (Shape{8, 12}));
    EXPECT_TRUE(test::bitwise_equal(a, b));
    c.seed = 1;
    EXPECT_FALSE(test::bitwise_equal(a, build_model(c).forward(img, cap)));
}

TEST(Forward, LastPatchReachesTheLogits) {
    std::mt19937_64 rng(2);
    for (auto v : kAllVariants) {
        auto c = small_config(v);
        auto m = build_model(c);
        auto img = random_image(c, rng);
        auto cap = random_caption(8, 12, rng);
        auto changed = std::vector<double>(img.data().begin(), img.data().end());
        changed[(31 * 32 + 31) * 3] = 1.0 - changed[(31 * 32 + 31) * 3];
        EXPECT_GT(test::max_abs_diff(m.forward(img, cap), m.forward(Tensor(img.shape(), changed), cap)), 0.0)
            << to_string(v);
    }
}

TEST(Forward, ImageSizeMismatch) {
    auto m = build_model(small_config(Variant::m1));
    std::mt19937_64 rng(3);
    EXPECT_THROW(m.forward(Tensor::zeros({16, 16, 3}), random_caption(8, 12, rng)), ShapeError);
}

TEST(Forward, TeacherForcingIsCausal) {
    std::mt19937_64 rng(4);
    for (auto v : kAllVariants) {
        auto c = small_config(v);
        auto m = build_model(c);
        auto img = random_image(c, rng);
        auto cap = random_caption(8, 12, rng);
        auto base = m.forward(img, cap);
        for (std::size_t t = 0; t + 1 < 8; ++t) {
            auto pert = cap;
            for (std::size_t j = t + 1; j < 8; ++j) pert.ids[j] = 4 + (pert.ids[j] - 3) % 8;
            auto out = m.forward(img, pert);
            for (std::size_t r = 0; r <= t; ++r)
                for (std::size_t k = 0; k < 12; ++k) EXPECT_LT(std::abs(out.at(r, k) - base.at(r, k)), 1e-12);
        }
    }
}

TEST(Forward, UntrainedLossNearLogVocab) {
    std::mt19937_64 rng(5);
    auto c = ModelConfig::toy();
    c.vocab_size = 26;
    auto m = build_model(c);
    double total = 0.0;
    for (int i = 0; i < 4; ++i)
        total += example_loss(m, {random_image(c, rng), random_caption(16, 26, rng)}).item();
    const double mean = total / 4.0;
    EXPECT_GT(mean, 0.8 * std::log(26.0));
    EXPECT_LT(mean, 1.2 * std::log(26.0));
}

TEST(Gradients, MicroModelEveryVariant) {
    std::mt19937_64 rng(6);
    for (auto v : kAllVariants) {
        auto c = ModelConfig::micro(v);
        auto m = build_model(c);
        TrainingExample ex{random_image(c, rng), random_caption(4, 11, rng)};
        ex.tokens.ids[3] = kEosId;
        auto rep = finite_diff_gradcheck([&] { return example_loss(m, ex); }, m.parameters(), 1e-5, 1e-4);
        EXPECT_TRUE(rep.passed()) << to_string(v) << " max rel error " << rep.max_rel_error;
        EXPECT_EQ(rep.entries.size(), m.parameters().size());
    }
}

TEST(Training, LossHalvesOnRepeatedSample) {
    std::mt19937_64 rng(7);
    auto c = small_config(Variant::m5);
    auto m = build_model(c);
    std::vector<TrainingExample> batch{{random_image(c, rng), random_caption(8, 12, rng)}};
    AdamState st;
    const double first = train_step(m, batch, st, 1e-3);
    double last = first;
    for (int i = 1; i < 50; ++i) last = train_step(m, batch, st, 1e-3);
    EXPECT_LT(last, 0.5 * first);
    EXPECT_EQ(st.step, 50);
}

TEST(Training, EmptyBatchIsAnError) {
    auto m = build_model(small_config(Variant::m1));
    AdamState st;
    EXPECT_THROW(train_step(m, {}, st, 1e-3), TrainingError);
}

TEST(Decode, DeterministicAndWellFormed) {
    std::mt19937_64 rng(8);
    for (auto v : kAllVariants) {
        auto c = small_config(v);
        auto m = build_model(c);
        auto img = random_image(c, rng);
        for (std::size_t max_len : {1u, 3u, 20u}) {
            auto a = greedy_decode(m, img, max_len);
            EXPECT_EQ(a, greedy_decode(m, img, max_len));
            EXPECT_EQ(a.ids.size(), 8u);
            EXPECT_EQ(a.ids[0], kBosId);
            EXPECT_LE(a.length - 1, std::min<std::size_t>(max_len, 7));
            for (std::size_t i = 1; i < a.length; ++i) {
                EXPECT_NE(a.ids[i], kPadId);
                EXPECT_NE(a.ids[i], kBosId);
            }
            for (std::size_t i = a.length; i < a.ids.size(); ++i) EXPECT_EQ(a.ids[i], kPadId);
        }
    }
}

TEST(Decode, OverfitSingleSampleReturnsCaption) {
    auto recs = generate_synthetic(1, 3);
    auto vocab = Vocabulary::build(all_captions(recs));
    auto c = small_config(Variant::m5);
    c.vocab_size = long(vocab.size());
    c.max_len = 10;
    auto m = build_model(c);
    std::vector<TrainingExample> batch{{recs[0].image, vocab.encode(recs[0].captions[0], 10)}};
    AdamState st;
    for (int i = 0; i < 150; ++i) train_step(m, batch, st, 1e-3);
    EXPECT_EQ(vocab.decode(greedy_decode(m, recs[0].image, 10)), recs[0].captions[0]);
}

TEST(Config, JsonRoundTripAndUnknownField) {
    auto c = small_config(Variant::m3);
    c.dropout = 0.1;
    c.seed = 42;
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
    EXPECT_THROW(model_config_from_json({{"d_modle", 8}}), ConfigError);
    EXPECT_THROW(model_config_from_json({{"d_model", "wide"}}), ConfigError);
    auto other = c;
    other.variant = Variant::m5;
    EXPECT_EQ(first_config_difference(c, other), "variant");
    EXPECT_EQ(first_config_difference(c, c), "");
}

TEST(Schedule, BoundaryEpochs) {
    LrSchedule s;
    EXPECT_EQ(s.at(4), 1e-4);
    EXPECT_NEAR(s.at(5), 9.5e-5, 1e-20);
    for (long e = 5; e < 30; ++e) EXPECT_DOUBLE_EQ(s.at(e), 1e-4 * std::pow(0.95, double(e - 4)));
}
