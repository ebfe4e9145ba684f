// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file checkpoint.hpp
 * @brief Single-file model checkpoints.
 *
 * Layout:
 *   bytes 0..7    magic "SEMTCKPT"
 *   bytes 8..15   header length N, little-endian uint64
 *   next N bytes  JSON header: format_version, config, vocabulary, epoch,
 *                 rng_seed, optional adam {step, beta1, beta2, epsilon},
 *                 and a manifest of {name, shape, offset, count} entries
 *   remainder     little-endian IEEE-754 float64 blobs in manifest order;
 *                 offsets are relative to the start of the blob section
 *
 * Adam moment buffers appear in the manifest as "adam.m/<param>" and
 * "adam.v/<param>".
 */

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semt/model.hpp"

namespace semt {

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'T', 'C', 'K', 'P', 'T'};

struct NamedArray {
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    int version = kCheckpointVersion;
    ModelConfig config;
    std::vector<std::string> vocabulary;
    std::map<std::string, NamedArray> parameters;
    std::optional<AdamState> adam;
    long epoch = 0;
    std::uint64_t rng_seed = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void put_f64_le(std::string& out, double d) { put_u64_le(out, std::bit_cast<std::uint64_t>(d)); }

} // namespace detail

inline Checkpoint make_checkpoint(const CaptionModel& model, const Vocabulary* vocab = nullptr,
                                  const AdamState* adam = nullptr, long epoch = 0) {
    Checkpoint c;
    c.config = model.config();
    if (vocab) c.vocabulary = vocab->tokens();
    for (const auto& p : model.parameters()) {
        c.parameters[p.name] = {p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}};
    }
    if (adam) c.adam = *adam;
    c.epoch = epoch;
    c.rng_seed = model.config().seed;
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    nlohmann::json manifest = nlohmann::json::array();
    std::string blobs;
    std::uint64_t offset = 0;
    auto emit = [&](const std::string& name, const Shape& shape, const std::vector<double>& values) {
        manifest.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
        for (double v : values) detail::put_f64_le(blobs, v);
        offset += values.size() * 8;
    };
    for (const auto& [name, arr] : c.parameters) emit(name, arr.shape, arr.values);

    nlohmann::json header = {{"format_version", c.version}, {"config", to_json(c.config)},
                             {"vocabulary", c.vocabulary},  {"epoch", c.epoch},
                             {"rng_seed", c.rng_seed}};
    if (c.adam) {
        header["adam"] = {{"step", c.adam->step},
                          {"beta1", c.adam->beta1},
                          {"beta2", c.adam->beta2},
                          {"epsilon", c.adam->epsilon}};
        for (const auto& [name, mom] : c.adam->moments) {
            emit("adam.m/" + name, {mom.first.size()}, mom.first);
            emit("adam.v/" + name, {mom.second.size()}, mom.second);
        }
    }
    header["manifest"] = manifest;

    const std::string header_text = header.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u64_le(out, header_text.size());
    out += header_text;
    out += blobs;

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw CheckpointError("io", "cannot write checkpoint " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("io", "failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const CaptionModel& model,
                            const Vocabulary* vocab = nullptr, const AdamState* adam = nullptr, long epoch = 0) {
    save_checkpoint(path, make_checkpoint(model, vocab, adam, epoch));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("io", "cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto corrupt = [&](const std::string& why) {
        return CheckpointError("corrupt-checkpoint", path.string() + ": " + why);
    };
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw corrupt("missing checkpoint magic");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t header_len = detail::get_u64_le(raw + 8);
    if (header_len > bytes.size() - 16) throw corrupt("truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception&) {
        throw corrupt("unreadable header");
    }
    const std::size_t blob_start = 16 + header_len;
    const std::size_t blob_size = bytes.size() - blob_start;

    Checkpoint c;
    try {
        c.version = header.at("format_version").get<int>();
        if (c.version != kCheckpointVersion) {
            throw CheckpointError("version-mismatch", path.string() + ": checkpoint format version " +
                                                          std::to_string(c.version) + ", expected " +
                                                          std::to_string(kCheckpointVersion));
        }
        c.config = model_config_from_json(header.at("config"));
        c.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
        c.epoch = header.at("epoch").get<long>();
        c.rng_seed = header.at("rng_seed").get<std::uint64_t>();

        std::map<std::string, NamedArray> arrays;
        for (const auto& entry : header.at("manifest")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto off = entry.at("offset").get<std::uint64_t>();
            const auto count = entry.at("count").get<std::uint64_t>();
            if (shape_numel(shape) != count) throw corrupt("manifest shape/count disagree for " + name);
            if (off % 8 != 0 || off > blob_size || count > (blob_size - off) / 8) {
                throw corrupt("parameter blob for " + name + " lies outside the file");
            }
            NamedArray arr{shape, std::vector<double>(count)};
            for (std::size_t i = 0; i < count; ++i) {
                arr.values[i] = std::bit_cast<double>(detail::get_u64_le(raw + blob_start + off + 8 * i));
            }
            arrays[name] = std::move(arr);
        }
        if (header.contains("adam")) {
            AdamState st;
            const auto& a = header.at("adam");
            st.step = a.at("step").get<long>();
            st.beta1 = a.at("beta1").get<double>();
            st.beta2 = a.at("beta2").get<double>();
            st.epsilon = a.at("epsilon").get<double>();
            c.adam = std::move(st);
        }
        for (auto& [name, arr] : arrays) {
            if (name.rfind("adam.m/", 0) == 0 && c.adam) {
                c.adam->moments[name.substr(7)].first = std::move(arr.values);
            } else if (name.rfind("adam.v/", 0) == 0 && c.adam) {
                c.adam->moments[name.substr(7)].second = std::move(arr.values);
            } else {
                c.parameters[name] = std::move(arr);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(std::string("malformed header: ") + e.what());
    } catch (const ConfigError& e) {
        throw corrupt(std::string("bad config: ") + e.what());
    }
    return c;
}

/// Copies checkpoint parameters into `model`. The model's config must equal
/// the checkpoint's, and every model parameter must be present with the
/// same shape.
inline void restore(CaptionModel& model, const Checkpoint& c) {
    if (const auto field = first_config_difference(model.config(), c.config); !field.empty()) {
        throw CheckpointError("config-mismatch", "checkpoint config differs in field '" + field + "': checkpoint has " +
                                                     to_json(c.config).at(field).dump() + ", model has " +
                                                     to_json(model.config()).at(field).dump());
    }
    for (auto& p : model.parameters()) {
        auto it = c.parameters.find(p.name);
        if (it == c.parameters.end()) throw CheckpointError("missing-parameter", "checkpoint lacks parameter '" + p.name + "'");
        if (it->second.shape != p.tensor.shape()) {
            throw CheckpointError("shape-mismatch", "parameter '" + p.name + "' has shape " +
                                                        shape_str(it->second.shape) + " in checkpoint, expected " +
                                                        shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
}

inline CaptionModel model_from_checkpoint(const Checkpoint& c) {
    CaptionModel m(c.config);
    restore(m, c);
    return m;
}

} // namespace semt
