// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file model.hpp
 * @brief Captioning model: patch backbone, word embedding, encoder stack,
 * mesh decoder and output head, in the five M1-M5 wirings.
 *
 *   variant | encoder attention   | mesh | memory
 *   --------+---------------------+------+-------
 *   M1      | traditional         | off  | off
 *   M2      | traditional         | on   | off
 *   M3      | traditional         | on   | on
 *   M4      | static expansion    | off  | off
 *   M5      | static expansion    | on   | off
 */

#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semt/decoder.hpp"
#include "semt/encoder.hpp"
#include "semt/optim.hpp"
#include "semt/vocab.hpp"

namespace semt {

enum class Variant { m1, m2, m3, m4, m5 };

struct VariantTraits {
    bool static_expansion;
    bool mesh;
    bool memory;
};

constexpr VariantTraits traits(Variant v) {
    switch (v) {
    case Variant::m1: return {false, false, false};
    case Variant::m2: return {false, true, false};
    case Variant::m3: return {false, true, true};
    case Variant::m4: return {true, false, false};
    case Variant::m5: return {true, true, false};
    }
    return {false, false, false};
}

inline std::string to_string(Variant v) { return "m" + std::to_string(static_cast<int>(v) + 1); }

inline Variant parse_variant(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s.size() == 2 && s[0] == 'm' && s[1] >= '1' && s[1] <= '5') return static_cast<Variant>(s[1] - '1');
    throw ConfigError("unknown variant '" + s + "' (expected m1..m5)");
}

inline constexpr std::array<Variant, 5> kAllVariants{Variant::m1, Variant::m2, Variant::m3, Variant::m4, Variant::m5};

struct ModelConfig {
    Variant variant = Variant::m5;
    long d_model = 64;
    long heads = 8;
    long enc_blocks = 4;
    long dec_blocks = 4;
    long n_mem = -1;   // -1: 8 slots when memory is on
    long l_exp = -1;   // -1: twice the number of image patches
    long vocab_size = 40;
    long max_len = 16;
    long patch_size = 8;
    long image_size = 32;
    long channels = 3;
    long d_ff = -1;    // -1: 4 * d_model
    double dropout = 0.0;
    std::uint64_t seed = 0;

    /// Desk-scale defaults.
    static ModelConfig toy() { return {}; }

    /// Widths and depths at the published scale.
    static ModelConfig paper() {
        ModelConfig c;
        c.d_model = 768;
        c.max_len = 53;
        c.image_size = 256;
        c.patch_size = 32;
        c.vocab_size = 3153;
        return c;
    }

    /// Smallest wiring that still exercises every mechanism; used for
    /// finite-difference checks.
    static ModelConfig micro(Variant v) {
        ModelConfig c;
        c.variant = v;
        c.d_model = 8;
        c.heads = 2;
        c.enc_blocks = 1;
        c.dec_blocks = 1;
        c.max_len = 4;
        c.image_size = 8;
        c.patch_size = 4;
        c.vocab_size = 11;
        return c;
    }

    long patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    long resolved_d_ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    long resolved_n_mem() const { return traits(variant).memory ? (n_mem >= 0 ? n_mem : 8) : 0; }
    long resolved_l_exp() const { return traits(variant).static_expansion ? (l_exp > 0 ? l_exp : 2 * patches()) : 0; }

    void validate() const {
        auto positive = [](long v, const char* name) {
            if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
        };
        positive(d_model, "d_model");
        positive(heads, "heads");
        positive(vocab_size, "vocab_size");
        positive(patch_size, "patch_size");
        positive(image_size, "image_size");
        positive(channels, "channels");
        if (enc_blocks < 0) throw ConfigError("enc_blocks must be non-negative");
        if (dec_blocks < 0) throw ConfigError("dec_blocks must be non-negative");
        if (max_len < 2) throw ConfigError("max_len must be at least 2");
        if (d_model % heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                              std::to_string(heads));
        }
        if (image_size % patch_size != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                              std::to_string(patch_size));
        }
        if (vocab_size < 5) throw ConfigError("vocab_size must cover the 4 reserved ids plus one word");
        if (n_mem < -1) throw ConfigError("n_mem must be >= 0 (or -1 for the default)");
        if (l_exp == 0 || l_exp < -1) throw ConfigError("l_exp must be >= 1 (or -1 for the default)");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"variant", to_string(c.variant)}, {"d_model", c.d_model},       {"heads", c.heads},
            {"enc_blocks", c.enc_blocks},      {"dec_blocks", c.dec_blocks}, {"n_mem", c.n_mem},
            {"l_exp", c.l_exp},                {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
            {"patch_size", c.patch_size},      {"image_size", c.image_size}, {"channels", c.channels},
            {"d_ff", c.d_ff},                  {"dropout", c.dropout},       {"seed", c.seed}};
}

/// Overlays the fields present in `j` onto `base`. Unknown keys are errors.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "variant") base.variant = parse_variant(value.get<std::string>());
            else if (key == "d_model") base.d_model = value.get<long>();
            else if (key == "heads") base.heads = value.get<long>();
            else if (key == "enc_blocks") base.enc_blocks = value.get<long>();
            else if (key == "dec_blocks") base.dec_blocks = value.get<long>();
            else if (key == "n_mem") base.n_mem = value.get<long>();
            else if (key == "l_exp") base.l_exp = value.get<long>();
            else if (key == "vocab_size") base.vocab_size = value.get<long>();
            else if (key == "max_len") base.max_len = value.get<long>();
            else if (key == "patch_size") base.patch_size = value.get<long>();
            else if (key == "image_size") base.image_size = value.get<long>();
            else if (key == "channels") base.channels = value.get<long>();
            else if (key == "d_ff") base.d_ff = value.get<long>();
            else if (key == "dropout") base.dropout = value.get<double>();
            else if (key == "seed") base.seed = value.get<std::uint64_t>();
            else throw ConfigError("unknown model config field '" + key + "'");
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("model config field '" + key + "' has the wrong type");
        }
    }
    return base;
}

/// Name of the first field that differs between two configs, or empty.
inline std::string first_config_difference(const ModelConfig& a, const ModelConfig& b) {
    const auto ja = to_json(a), jb = to_json(b);
    for (const auto& [key, value] : ja.items()) {
        if (jb.at(key) != value) return key;
    }
    return {};
}

/// Sinusoidal position table [rows × d].
inline Tensor sinusoidal_positions(std::size_t rows, std::size_t d) {
    std::vector<double> pe(rows * d);
    for (std::size_t pos = 0; pos < rows; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
            pe[pos * d + i] = std::sin(static_cast<double>(pos) / freq);
            if (i + 1 < d) pe[pos * d + i + 1] = std::cos(static_cast<double>(pos) / freq);
        }
    }
    return Tensor({rows, d}, std::move(pe));
}

/// Splits an [H × W × C] image into non-overlapping p×p patches, flattened
/// in row-major patch order; result is [(H/p)·(W/p) × p·p·C].
inline Tensor patchify(const Tensor& image, std::size_t p) {
    if (image.rank() != 3) throw ShapeError("image must be [H x W x C], got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h % p || w % p) throw ShapeError("image " + shape_str(image.shape()) + " is not divisible into patches of " +
                                         std::to_string(p));
    const std::size_t ph = h / p, pw = w / p, width = p * p * c;
    std::vector<double> out(ph * pw * width);
    for (std::size_t by = 0; by < ph; ++by)
        for (std::size_t bx = 0; bx < pw; ++bx)
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        out[(by * pw + bx) * width + (y * p + x) * c + ch] =
                            image[((by * p + y) * w + bx * p + x) * c + ch];
    return Tensor({ph * pw, width}, std::move(out));
}

/// Learnable patch embedder standing in for a pretrained CNN: flattens the
/// patch grid into F_f rows, projects to d_model and adds fixed positions.
struct ToyBackbone {
    Tensor w, b, positions;
    std::size_t patch_size = 1;

    template <class Rng>
    static ToyBackbone create(ParameterRegistry& reg, const ModelConfig& c, Rng& rng) {
        ToyBackbone bb;
        bb.patch_size = static_cast<std::size_t>(c.patch_size);
        const auto in = static_cast<std::size_t>(c.patch_size * c.patch_size * c.channels);
        const auto d = static_cast<std::size_t>(c.d_model);
        bb.w = reg.add("backbone.w", Tensor::randn({in, d}, 1.0 / std::sqrt(double(in)), rng));
        bb.b = reg.add("backbone.b", Tensor::zeros({d}));
        bb.positions = sinusoidal_positions(static_cast<std::size_t>(c.patches()), d);
        return bb;
    }

    Tensor operator()(const Tensor& image) const {
        return add(affine(patchify(image, patch_size), w, b), positions);
    }
};

struct WordEmbedding {
    Tensor table;      // [vocab × d_model]
    Tensor positions;  // [L × d_model], fixed

    template <class Rng>
    static WordEmbedding create(ParameterRegistry& reg, const ModelConfig& c, Rng& rng) {
        const auto v = static_cast<std::size_t>(c.vocab_size), d = static_cast<std::size_t>(c.d_model);
        return {reg.add("embedding.tokens", Tensor::randn({v, d}, 1.0, rng)),
                sinusoidal_positions(static_cast<std::size_t>(c.max_len), d)};
    }

    Tensor operator()(std::span<const int> ids) const {
        if (ids.size() > positions.rows()) {
            throw ShapeError("caption of " + std::to_string(ids.size()) + " tokens exceeds max_len " +
                             std::to_string(positions.rows()));
        }
        Tensor tok = embedding(table, ids);
        if (ids.size() == positions.rows()) return add(tok, positions);
        std::vector<double> pe(positions.data().begin(),
                               positions.data().begin() + static_cast<long>(ids.size() * positions.cols()));
        return add(tok, Tensor({ids.size(), positions.cols()}, std::move(pe)));
    }
};

class CaptionModel {
public:
    explicit CaptionModel(const ModelConfig& cfg) : config_(cfg), rng_(cfg.seed) {
        cfg.validate();
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto heads = static_cast<std::size_t>(cfg.heads);
        const auto d_ff = static_cast<std::size_t>(cfg.resolved_d_ff());
        const auto tr = traits(cfg.variant);
        const AttentionKind kind = tr.static_expansion ? AttentionKind::static_expansion
                                   : tr.memory         ? AttentionKind::memory_augmented
                                                       : AttentionKind::traditional;
        std::mt19937_64 init(cfg.seed);
        backbone_ = ToyBackbone::create(params_, cfg, init);
        embedding_ = WordEmbedding::create(params_, cfg, init);
        for (long i = 0; i < cfg.enc_blocks; ++i) {
            encoder_.push_back(EncoderBlock::create(params_, "encoder." + std::to_string(i), kind, d, heads, d_ff,
                                                    static_cast<std::size_t>(cfg.resolved_n_mem()),
                                                    static_cast<std::size_t>(cfg.resolved_l_exp()), init));
        }
        for (long i = 0; i < cfg.dec_blocks; ++i) {
            decoder_.push_back(
                DecoderBlock::create(params_, "decoder." + std::to_string(i), tr.mesh, d, heads, d_ff, init));
        }
        final_norm_ = LayerNormParams::create(params_, "decoder.final_norm", d);
        head_w_ = params_.add("head.w", Tensor::randn({d, static_cast<std::size_t>(cfg.vocab_size)},
                                                     1.0 / std::sqrt(double(d)), init));
        head_b_ = params_.add("head.b", Tensor::zeros({static_cast<std::size_t>(cfg.vocab_size)}));
    }

    CaptionModel(const CaptionModel&) = delete;
    CaptionModel& operator=(const CaptionModel&) = delete;
    CaptionModel(CaptionModel&&) = default;
    CaptionModel& operator=(CaptionModel&&) = default;

    const ModelConfig& config() const { return config_; }
    ParameterRegistry& parameters() { return params_; }
    const ParameterRegistry& parameters() const { return params_; }
    std::span<const EncoderBlock> encoder_blocks() const { return encoder_; }
    std::span<const DecoderBlock> decoder_blocks() const { return decoder_; }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    void check_image(const Tensor& image) const {
        const auto s = static_cast<std::size_t>(config_.image_size);
        const Shape want{s, s, static_cast<std::size_t>(config_.channels)};
        if (image.shape() != want) {
            throw ShapeError("image size mismatch: model expects " + shape_str(want) + ", got " +
                             shape_str(image.shape()));
        }
    }

    /// E_1 followed by every encoder block output.
    FeatureLevels encode(const Tensor& image) const {
        check_image(image);
        return encoder_forward(backbone_(image), encoder_, dropout());
    }

    /// Next-token logits [len(ids) × vocab] given precomputed feature levels.
    Tensor decode_logits(const FeatureLevels& levels, std::span<const int> ids,
                         const LevelsObserver& observer = {}) const {
        Tensor d = decoder_forward(embedding_(ids), levels, decoder_, dropout(), observer);
        return affine(final_norm_(d), head_w_, head_b_);
    }

    Tensor forward(const Tensor& image, const TokenSequence& caption_in) const {
        return decode_logits(encode(image), caption_in.ids);
    }

private:
    Dropout dropout() const { return training_ ? Dropout{config_.dropout, &rng_} : Dropout{}; }

    ModelConfig config_;
    ParameterRegistry params_;
    ToyBackbone backbone_;
    WordEmbedding embedding_;
    std::vector<EncoderBlock> encoder_;
    std::vector<DecoderBlock> decoder_;
    LayerNormParams final_norm_;
    Tensor head_w_, head_b_;
    bool training_ = false;
    mutable std::mt19937_64 rng_;
};

inline CaptionModel build_model(const ModelConfig& cfg) { return CaptionModel(cfg); }

struct TrainingExample {
    Tensor image;
    TokenSequence tokens;
};

/// Teacher-forced token cross-entropy of one example.
inline Tensor example_loss(const CaptionModel& model, const TrainingExample& ex) {
    const auto targets = shifted_targets(ex.tokens);
    return cross_entropy_loss(model.forward(ex.image, ex.tokens), targets, kPadId);
}

/// One Adam update on the mean loss of `batch`; returns that mean loss.
inline double train_step(CaptionModel& model, std::span<const TrainingExample> batch, AdamState& optimizer,
                         double lr) {
    if (batch.empty()) throw TrainingError("empty batch");
    model.parameters().zero_grad();
    model.set_training(true);
    const double inv = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const auto& ex : batch) {
        Tensor loss = example_loss(model, ex);
        total += loss.item();
        loss.backward(inv);
    }
    model.set_training(false);
    adam_step(model.parameters(), optimizer, lr);
    return total * inv;
}

/// Greedy decoding from BOS. Produces at most `max_len` tokens after BOS
/// (EOS included when emitted), never more than the model's L - 1. PAD and
/// BOS are never chosen.
inline TokenSequence greedy_decode(const CaptionModel& model, const Tensor& image, std::size_t max_len) {
    NoGradGuard no_grad;
    const auto L = static_cast<std::size_t>(model.config().max_len);
    const std::size_t steps = std::min(max_len, L - 1);
    const FeatureLevels levels = model.encode(image);

    TokenSequence seq;
    seq.ids.assign(L, kPadId);
    seq.ids[0] = kBosId;
    seq.length = 1;
    for (std::size_t t = 0; t < steps; ++t) {
        const std::span<const int> prefix(seq.ids.data(), seq.length);
        const Tensor logits = model.decode_logits(levels, prefix);
        const std::size_t V = logits.cols();
        int best = -1;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < V; ++j) {
            if (static_cast<int>(j) == kPadId || static_cast<int>(j) == kBosId) continue;
            const double v = logits.at(seq.length - 1, j);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(j);
            }
        }
        seq.ids[seq.length++] = best;
        if (best == kEosId) break;
    }
    return seq;
}

} // namespace semt
