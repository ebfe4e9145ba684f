// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file data.hpp
 * @brief Caption records, the synthetic shapes dataset, JSONL annotation
 * files and PPM image I/O.
 */

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semt/tensor.hpp"
#include "semt/vocab.hpp"

namespace semt {

using json = nlohmann::json;

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DataError("unknown split '" + s + "'");
}

// --- synthetic scenes -------------------------------------------------------

inline constexpr std::size_t kSceneSize = 32;
inline constexpr std::size_t kSceneCell = kSceneSize / 2;

inline const std::array<std::string, 3> kShapeNames{"square", "circle", "cross"};
inline const std::array<std::string, 3> kShapePlurals{"squares", "circles", "crosses"};
inline const std::array<std::string, 4> kColorNames{"red", "green", "blue", "yellow"};
inline const std::array<std::array<double, 3>, 4> kColorRgb{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}}};
inline const std::array<std::string, 5> kCountWords{"", "one", "two", "three", "four"};

/// Caption templates. `single` describes one shape and its quadrant,
/// `counted` describes several identical shapes.
enum SceneTemplate : int { kTemplateSingle = 0, kTemplateCounted = 1 };

struct PlacedShape {
    std::string shape;
    std::string color;
    int x = 0;  // centre column
    int y = 0;  // centre row

    bool operator==(const PlacedShape&) const = default;
};

struct SceneDescriptor {
    std::vector<PlacedShape> shapes;
    int template_index = kTemplateSingle;

    bool operator==(const SceneDescriptor&) const = default;
};

inline json to_json(const SceneDescriptor& s) {
    json shapes = json::array();
    for (const auto& p : s.shapes) shapes.push_back({{"shape", p.shape}, {"color", p.color}, {"x", p.x}, {"y", p.y}});
    return {{"shapes", shapes}, {"template", s.template_index}};
}

inline SceneDescriptor scene_from_json(const json& j) {
    SceneDescriptor s;
    for (const auto& p : j.at("shapes")) {
        s.shapes.push_back({p.at("shape").get<std::string>(), p.at("color").get<std::string>(), p.at("x").get<int>(),
                            p.at("y").get<int>()});
    }
    s.template_index = j.at("template").get<int>();
    return s;
}

template <class Names>
std::size_t index_of(const Names& names, const std::string& v, const char* what) {
    auto it = std::find(names.begin(), names.end(), v);
    if (it == names.end()) throw DataError(std::string("unknown ") + what + " '" + v + "'");
    return static_cast<std::size_t>(it - names.begin());
}

inline std::string quadrant_phrase(int x, int y) {
    return std::string(y < int(kSceneCell) ? "top" : "bottom") + " " + (x < int(kSceneCell) ? "left" : "right");
}

inline std::string caption_for(const SceneDescriptor& s) {
    if (s.shapes.empty() || s.shapes.size() > 4) throw DataError("scene must hold 1 to 4 shapes");
    const auto& first = s.shapes.front();
    for (const auto& p : s.shapes) {
        if (p.shape != first.shape || p.color != first.color) {
            throw DataError("synthetic scenes hold shapes of a single kind and colour");
        }
    }
    switch (s.template_index) {
    case kTemplateSingle:
        if (s.shapes.size() != 1) throw DataError("single-shape template used with several shapes");
        return "a " + first.color + " " + first.shape + " at the " + quadrant_phrase(first.x, first.y);
    case kTemplateCounted:
        if (s.shapes.size() < 2) throw DataError("counted template needs at least two shapes");
        return kCountWords[s.shapes.size()] + " " + first.color + " " +
               kShapePlurals[index_of(kShapeNames, first.shape, "shape")] + " in the image";
    default:
        throw DataError("unknown caption template " + std::to_string(s.template_index));
    }
}

/// What a caption states about its scene.
struct ParsedCaption {
    std::string shape;
    std::string color;
    std::size_t count = 0;
    int template_index = -1;
    std::string quadrant;  // single-shape template only

    bool operator==(const ParsedCaption&) const = default;
};

/// Inverse of caption_for over the caption-visible scene fields.
inline ParsedCaption parse_caption(const std::string& caption) {
    const auto w = tokenize(caption);
    ParsedCaption p;
    if (w.size() == 7 && w[0] == "a" && w[3] == "at" && w[4] == "the") {
        p.template_index = kTemplateSingle;
        p.color = kColorNames[index_of(kColorNames, w[1], "colour")];
        p.shape = kShapeNames[index_of(kShapeNames, w[2], "shape")];
        p.count = 1;
        if ((w[5] != "top" && w[5] != "bottom") || (w[6] != "left" && w[6] != "right")) {
            throw DataError("bad quadrant in caption '" + caption + "'");
        }
        p.quadrant = w[5] + " " + w[6];
        return p;
    }
    if (w.size() == 6 && w[3] == "in" && w[4] == "the" && w[5] == "image") {
        p.template_index = kTemplateCounted;
        p.count = index_of(kCountWords, w[0], "count");
        if (p.count < 2) throw DataError("bad count in caption '" + caption + "'");
        p.color = kColorNames[index_of(kColorNames, w[1], "colour")];
        p.shape = kShapeNames[index_of(kShapePlurals, w[2], "shape")];
        return p;
    }
    throw DataError("caption does not follow a scene template: '" + caption + "'");
}

/// Rasterises a scene to a [32 × 32 × 3] image with values in {0, 1}.
inline Tensor rasterize(const SceneDescriptor& s) {
    std::vector<double> px(kSceneSize * kSceneSize * 3, 0.0);
    for (const auto& p : s.shapes) {
        const auto shape = index_of(kShapeNames, p.shape, "shape");
        const auto& rgb = kColorRgb[index_of(kColorNames, p.color, "colour")];
        for (int r = 0; r < int(kSceneSize); ++r) {
            for (int c = 0; c < int(kSceneSize); ++c) {
                const int dx = c - p.x, dy = r - p.y;
                bool on = false;
                switch (shape) {
                case 0: on = std::abs(dx) <= 4 && std::abs(dy) <= 4; break;
                case 1: on = dx * dx + dy * dy <= 25; break;
                default: on = (std::abs(dx) <= 1 && std::abs(dy) <= 5) || (std::abs(dy) <= 1 && std::abs(dx) <= 5);
                }
                if (!on) continue;
                for (std::size_t ch = 0; ch < 3; ++ch) px[(std::size_t(r) * kSceneSize + std::size_t(c)) * 3 + ch] = rgb[ch];
            }
        }
    }
    return Tensor({kSceneSize, kSceneSize, 3}, std::move(px));
}

// --- records ------------------------------------------------------------------

struct CaptionRecord {
    std::string id;
    Tensor image;  // [H × W × C], values in [0, 1]
    std::vector<std::string> captions;
    Split split = Split::train;
    std::optional<SceneDescriptor> scene;
};

struct SplitSizes {
    std::size_t train, val, test;
};

/// 80/10/10, with validation and test each floor(n/10).
inline SplitSizes split_sizes(std::size_t n) {
    const std::size_t tenth = n / 10;
    return {n - 2 * tenth, tenth, tenth};
}

/// Deterministic synthetic dataset: each record holds one to four shapes of
/// a single kind and colour placed in distinct quadrants.
inline std::vector<CaptionRecord> generate_synthetic(long n, std::uint64_t seed) {
    if (n < 1) throw DataError("synthetic dataset size must be at least 1, got " + std::to_string(n));
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_shape(0, kShapeNames.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_color(0, kColorNames.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_count(1, 4);
    std::uniform_int_distribution<int> jitter(-2, 2);

    const auto sizes = split_sizes(static_cast<std::size_t>(n));
    std::vector<CaptionRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
        SceneDescriptor scene;
        const auto shape = pick_shape(rng);
        const auto color = pick_color(rng);
        const auto count = pick_count(rng);
        std::array<int, 4> cells{0, 1, 2, 3};
        std::shuffle(cells.begin(), cells.end(), rng);
        std::sort(cells.begin(), cells.begin() + static_cast<long>(count));
        for (std::size_t k = 0; k < count; ++k) {
            const int cx = (cells[k] % 2) * int(kSceneCell) + int(kSceneCell) / 2 + jitter(rng);
            const int cy = (cells[k] / 2) * int(kSceneCell) + int(kSceneCell) / 2 + jitter(rng);
            scene.shapes.push_back({kShapeNames[shape], kColorNames[color], cx, cy});
        }
        scene.template_index = count == 1 ? kTemplateSingle : kTemplateCounted;

        CaptionRecord rec;
        char id[32];
        std::snprintf(id, sizeof id, "syn-%05zu", i);
        rec.id = id;
        rec.image = rasterize(scene);
        rec.captions = {caption_for(scene)};
        rec.split = i < sizes.train ? Split::train : (i < sizes.train + sizes.val ? Split::val : Split::test);
        rec.scene = std::move(scene);
        out.push_back(std::move(rec));
    }
    return out;
}

inline std::vector<CaptionRecord> select_split(const std::vector<CaptionRecord>& records, Split s) {
    std::vector<CaptionRecord> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(r);
    return out;
}

inline std::vector<std::string> all_captions(const std::vector<CaptionRecord>& records) {
    std::vector<std::string> out;
    for (const auto& r : records) out.insert(out.end(), r.captions.begin(), r.captions.end());
    return out;
}

// --- PPM ----------------------------------------------------------------------

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image file " + path.string());
    auto next_token = [&]() {
        std::string tok;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(c);
        }
        return tok;
    };
    const std::string magic = next_token();
    if (magic != "P6" && magic != "P3") throw DataError("unsupported image format in " + path.string());
    std::size_t w = 0, h = 0;
    double maxval = 0;
    try {
        w = std::stoul(next_token());
        h = std::stoul(next_token());
        maxval = std::stod(next_token());
    } catch (const std::exception&) {
        throw DataError("corrupt PPM header in " + path.string());
    }
    if (w == 0 || h == 0 || maxval <= 0 || maxval > 255) throw DataError("unsupported PPM header in " + path.string());
    std::vector<double> px(w * h * 3);
    if (magic == "P6") {
        std::vector<unsigned char> raw(px.size());
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw DataError("truncated image " + path.string());
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = raw[i] / maxval;
    } else {
        for (auto& v : px) {
            const auto tok = next_token();
            if (tok.empty()) throw DataError("truncated image " + path.string());
            v = std::stod(tok) / maxval;
        }
    }
    return Tensor({h, w, 3}, std::move(px));
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) throw DataError("PPM output needs an [H x W x 3] image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image file " + path.string());
    out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    for (double v : image.data()) {
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
}

// --- JSONL annotations -----------------------------------------------------------

inline json image_to_json(const Tensor& image) {
    json rows = json::array();
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    for (std::size_t r = 0; r < h; ++r) {
        json row = json::array();
        for (std::size_t col = 0; col < w; ++col) {
            json px = json::array();
            for (std::size_t ch = 0; ch < c; ++ch) px.push_back(image[(r * w + col) * c + ch]);
            row.push_back(std::move(px));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Tensor image_from_json(const json& j) {
    if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty() || !j[0][0].is_array() || j[0][0].empty()) {
        throw DataError("inline image must be a nonempty [H][W][C] array");
    }
    const std::size_t h = j.size(), w = j[0].size(), c = j[0][0].size();
    std::vector<double> px;
    px.reserve(h * w * c);
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != w) throw DataError("ragged inline image");
        for (const auto& p : row) {
            if (!p.is_array() || p.size() != c) throw DataError("ragged inline image");
            for (const auto& v : p) {
                if (!v.is_number()) throw DataError("inline image values must be numbers");
                const double d = v.get<double>();
                if (!(d >= 0.0 && d <= 1.0)) throw DataError("inline image values must lie in [0, 1]");
                px.push_back(d);
            }
        }
    }
    return Tensor({h, w, c}, std::move(px));
}

inline json record_to_json(const CaptionRecord& r) {
    json j = {{"id", r.id}, {"image", image_to_json(r.image)}, {"captions", r.captions}, {"split", to_string(r.split)}};
    if (r.scene) j["scene"] = to_json(*r.scene);
    return j;
}

/// One record per line: {"id", "image", "captions", "split"} plus an
/// optional "scene" descriptor. "image" is a path (relative paths resolve
/// against the annotation file's directory) or an inline [H][W][C] array.
inline std::vector<CaptionRecord> load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open annotation file " + path.string());
    std::vector<CaptionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        try {
            const json j = json::parse(line);
            CaptionRecord r;
            r.id = j.at("id").get<std::string>();
            r.captions = j.at("captions").get<std::vector<std::string>>();
            if (r.captions.empty()) throw DataError("record has an empty captions list");
            r.split = parse_split(j.at("split").get<std::string>());
            const auto& img = j.at("image");
            if (img.is_string()) {
                std::filesystem::path p = img.get<std::string>();
                if (p.is_relative()) p = path.parent_path() / p;
                if (!std::filesystem::exists(p)) throw DataError("missing image file " + p.string());
                r.image = read_ppm(p);
            } else {
                r.image = image_from_json(img);
            }
            if (j.contains("scene")) r.scene = scene_from_json(j.at("scene"));
            out.push_back(std::move(r));
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        } catch (const json::exception& e) {
            throw DataError(where + ": malformed record: " + e.what());
        }
    }
    return out;
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<CaptionRecord>& records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write annotation file " + path.string());
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

} // namespace semt
