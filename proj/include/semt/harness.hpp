// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file harness.hpp
 * @brief Run configuration, training loop, evaluation and gradient-check
 * drivers behind the `semt` command-line tool.
 *
 * A run directory holds:
 *
 *   config.json        resolved RunConfig
 *   checkpoints/       final.ckpt (every epoch), best.ckpt (best val BLEU-4)
 *   logs.jsonl         one {epoch, lr, train_loss, val_bleu4} object per epoch
 *   report.json        summary plus the final validation EvalReport
 */

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semt/checkpoint.hpp"
#include "semt/data.hpp"
#include "semt/gradcheck.hpp"
#include "semt/metrics.hpp"
#include "semt/model.hpp"

namespace semt {

/// Desk-scale optimizer settings used by the toy profile.
inline constexpr double kToyBaseLr = 1e-3;
inline constexpr long kToyBatchSize = 2;

struct SyntheticSpec {
    long n = 512;
    std::uint64_t seed = 7;
    bool operator==(const SyntheticSpec&) const = default;
};

struct RunConfig {
    std::string profile = "toy";
    ModelConfig model = ModelConfig::toy();
    long epochs = 20;
    long batch_size = kToyBatchSize;
    double lr = 1e-4;
    double decay = 0.95;
    long constant_epochs = 5;
    std::uint64_t seed = 0;
    std::string dataset;  // annotation JSONL; empty means synthetic
    SyntheticSpec synthetic;
    std::string out = "runs/latest";
    std::string train_on = "train";  // "train" or "all" splits
    std::optional<double> target_loss;
    std::optional<double> target_bleu4;
    BleuSmoothing smoothing = BleuSmoothing::none;

    static RunConfig preset(const std::string& profile) {
        RunConfig c;
        if (profile == "toy") {
            c.lr = kToyBaseLr;
            c.batch_size = kToyBatchSize;
        } else if (profile == "paper") {
            c.profile = "paper";
            c.model = ModelConfig::paper();
            c.batch_size = 500;
            c.lr = 1e-4;
        } else {
            throw ConfigError("unknown profile '" + profile + "' (expected toy or paper)");
        }
        return c;
    }

    LrSchedule schedule() const { return {lr, decay, static_cast<int>(constant_epochs)}; }

    void validate() const {
        model.validate();
        if (epochs < 0) throw ConfigError("epochs must be non-negative");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
        if (constant_epochs < 0) throw ConfigError("constant_epochs must be non-negative");
        if (dataset.empty() && synthetic.n <= 0) throw ConfigError("synthetic.n must be positive");
        if (train_on != "train" && train_on != "all") {
            throw ConfigError("train_on must be 'train' or 'all', got '" + train_on + "'");
        }
    }
};

inline std::string to_string(BleuSmoothing s) { return s == BleuSmoothing::epsilon ? "epsilon" : "none"; }

inline BleuSmoothing parse_smoothing(const std::string& s) {
    if (s == "none") return BleuSmoothing::none;
    if (s == "epsilon") return BleuSmoothing::epsilon;
    throw ConfigError("unknown smoothing '" + s + "' (expected none or epsilon)");
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j = {{"profile", c.profile},
                        {"model", to_json(c.model)},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"decay", c.decay},
                        {"constant_epochs", c.constant_epochs},
                        {"seed", c.seed},
                        {"dataset", c.dataset},
                        {"synthetic", {{"n", c.synthetic.n}, {"seed", c.synthetic.seed}}},
                        {"out", c.out},
                        {"train_on", c.train_on},
                        {"target_loss", nullptr},
                        {"target_bleu4", nullptr},
                        {"smoothing", to_string(c.smoothing)}};
    if (c.target_loss) j["target_loss"] = *c.target_loss;
    if (c.target_bleu4) j["target_bleu4"] = *c.target_bleu4;
    return j;
}

/// Overlays the fields present in `j` onto `base`. Unknown keys are errors.
/// The "profile" key is recorded but does not reset other fields; pick the
/// preset before overlaying.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "profile") base.profile = value.get<std::string>();
            else if (key == "model") base.model = model_config_from_json(value, base.model);
            else if (key == "epochs") base.epochs = value.get<long>();
            else if (key == "batch_size") base.batch_size = value.get<long>();
            else if (key == "lr") base.lr = value.get<double>();
            else if (key == "decay") base.decay = value.get<double>();
            else if (key == "constant_epochs") base.constant_epochs = value.get<long>();
            else if (key == "seed") base.seed = value.get<std::uint64_t>();
            else if (key == "dataset") base.dataset = value.get<std::string>();
            else if (key == "out") base.out = value.get<std::string>();
            else if (key == "train_on") base.train_on = value.get<std::string>();
            else if (key == "smoothing") base.smoothing = parse_smoothing(value.get<std::string>());
            else if (key == "target_loss") base.target_loss = value.is_null() ? std::nullopt : std::optional(value.get<double>());
            else if (key == "target_bleu4") base.target_bleu4 = value.is_null() ? std::nullopt : std::optional(value.get<double>());
            else if (key == "synthetic") {
                if (!value.is_object()) throw ConfigError("field 'synthetic' must be an object");
                for (const auto& [k, v] : value.items()) {
                    if (k == "n") base.synthetic.n = v.get<long>();
                    else if (k == "seed") base.synthetic.seed = v.get<std::uint64_t>();
                    else throw ConfigError("unknown config field 'synthetic." + k + "'");
                }
            } else {
                throw ConfigError("unknown config field '" + key + "'");
            }
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config field '" + key + "' has the wrong type");
        }
    }
    return base;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// Profile preset, then config file contents (null when there is no file),
/// then `flags` (a JSON object of the same shape). Later layers win.
inline RunConfig resolve_run_config(const std::optional<std::string>& profile_flag, const nlohmann::json& file,
                                    const nlohmann::json& flags) {
    std::string profile = "toy";
    if (file.is_object() && file.contains("profile")) {
        try {
            profile = file.at("profile").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config field 'profile' has the wrong type");
        }
    }
    if (profile_flag) profile = *profile_flag;
    RunConfig c = RunConfig::preset(profile);
    if (!file.is_null()) c = run_config_from_json(file, c);
    c = run_config_from_json(flags, c);
    c.profile = profile;
    c.model.seed = c.seed;
    return c;
}

// ---------------------------------------------------------------------------

inline std::vector<CaptionRecord> load_records(const RunConfig& c) {
    if (!c.dataset.empty()) return load_annotations(c.dataset);
    return generate_synthetic(c.synthetic.n, c.synthetic.seed);
}

inline std::vector<CaptionRecord> training_records(const RunConfig& c, const std::vector<CaptionRecord>& all) {
    return c.train_on == "all" ? all : select_split(all, Split::train);
}

/// One example per (record, caption) pair.
inline std::vector<TrainingExample> make_examples(const std::vector<CaptionRecord>& records, const Vocabulary& vocab,
                                                  std::size_t max_len) {
    std::vector<TrainingExample> out;
    for (const auto& r : records)
        for (const auto& cap : r.captions) out.push_back({r.image, vocab.encode(cap, max_len)});
    return out;
}

/// Greedy-decodes every record and scores it against all of its captions.
inline EvalReport evaluate_model(const CaptionModel& model, const Vocabulary& vocab,
                                 const std::vector<CaptionRecord>& records,
                                 BleuSmoothing smoothing = BleuSmoothing::none) {
    std::vector<std::string> candidates;
    std::vector<std::vector<std::string>> references;
    const auto max_len = static_cast<std::size_t>(model.config().max_len);
    for (const auto& r : records) {
        candidates.push_back(vocab.decode(greedy_decode(model, r.image, max_len)));
        references.push_back(r.captions);
    }
    return evaluate_captions(candidates, references, smoothing);
}

struct EpochLog {
    long epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_bleu4;
};

inline nlohmann::json to_json(const EpochLog& e) {
    nlohmann::json j = {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val_bleu4", nullptr}};
    if (e.val_bleu4) j["val_bleu4"] = *e.val_bleu4;
    return j;
}

struct TrainOutcome {
    CaptionModel model;
    Vocabulary vocab;
    AdamState adam;
    std::vector<EpochLog> history;
    std::optional<double> best_val_bleu4;
    long best_epoch = -1;
    std::optional<double> train_bleu4;  // set when the targets stopped training
    bool reached_target = false;
    double seconds = 0.0;
};

struct TrainOptions {
    bool write_artifacts = true;
    std::optional<std::filesystem::path> resume;
    std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline void append_line(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw CheckpointError("io", "cannot write " + path.string());
    f << j.dump() << '\n';
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw CheckpointError("io", "cannot write " + path.string());
    f << j.dump(2) << '\n';
}

} // namespace detail

/// Full training run. Epoch e uses lr = schedule().at(e); batches are a
/// fresh shuffle of the training examples drawn from seed and epoch.
inline TrainOutcome train(RunConfig cfg, const TrainOptions& opt = {}) {
    namespace fs = std::filesystem;
    cfg.model.seed = cfg.seed;
    const auto records = load_records(cfg);
    const auto train_recs = training_records(cfg, records);
    if (train_recs.empty()) throw DataError("training split is empty");
    const auto val_recs = select_split(records, Split::val);

    Vocabulary vocab = Vocabulary::build(all_captions(train_recs));
    cfg.model.vocab_size = static_cast<long>(vocab.size());
    cfg.validate();

    TrainOutcome run{build_model(cfg.model), vocab, {}, {}, {}, -1, {}, false, 0.0};
    long first_epoch = 0;
    if (opt.resume) {
        const Checkpoint ck = load_checkpoint(*opt.resume);
        restore(run.model, ck);
        if (ck.vocabulary != vocab.tokens()) {
            throw CheckpointError("config-mismatch", "checkpoint vocabulary differs from the training data");
        }
        if (ck.adam) run.adam = *ck.adam;
        first_epoch = ck.epoch + 1;
    }

    const fs::path out(cfg.out);
    if (opt.write_artifacts) {
        fs::create_directories(out / "checkpoints");
        detail::write_json(out / "config.json", to_json(cfg));
        if (!opt.resume) std::ofstream(out / "logs.jsonl", std::ios::trunc);
    }

    auto examples = make_examples(train_recs, vocab, static_cast<std::size_t>(cfg.model.max_len));
    const auto schedule = cfg.schedule();
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const auto t0 = std::chrono::steady_clock::now();

    for (long epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(examples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochLog log;
        log.epoch = epoch;
        log.lr = schedule.at(static_cast<int>(epoch));
        double weighted = 0.0;
        std::vector<TrainingExample> batch;
        for (std::size_t i = 0; i < order.size(); i += bs) {
            batch.clear();
            for (std::size_t j = i; j < std::min(order.size(), i + bs); ++j) batch.push_back(examples[order[j]]);
            weighted += train_step(run.model, batch, run.adam, log.lr) * static_cast<double>(batch.size());
        }
        log.train_loss = weighted / static_cast<double>(examples.size());
        if (!val_recs.empty()) log.val_bleu4 = evaluate_model(run.model, vocab, val_recs, cfg.smoothing).bleu4;
        run.history.push_back(log);

        const bool improved = log.val_bleu4 && (!run.best_val_bleu4 || *log.val_bleu4 > *run.best_val_bleu4);
        if (improved) {
            run.best_val_bleu4 = log.val_bleu4;
            run.best_epoch = epoch;
        }
        if (opt.write_artifacts) {
            detail::append_line(out / "logs.jsonl", to_json(log));
            const auto ck = make_checkpoint(run.model, &vocab, &run.adam, epoch);
            save_checkpoint(out / "checkpoints" / "final.ckpt", ck);
            if (improved || (val_recs.empty() && epoch == first_epoch)) save_checkpoint(out / "checkpoints" / "best.ckpt", ck);
        }
        if (opt.on_epoch) opt.on_epoch(log);

        if (cfg.target_loss && log.train_loss <= *cfg.target_loss) {
            bool done = true;
            if (cfg.target_bleu4) {
                run.train_bleu4 = evaluate_model(run.model, vocab, train_recs, cfg.smoothing).bleu4;
                done = *run.train_bleu4 >= *cfg.target_bleu4;
            }
            if (done) {
                run.reached_target = true;
                break;
            }
        }
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (opt.write_artifacts) {
        nlohmann::json report = {{"config", to_json(cfg)},
                                 {"epochs_run", run.history.size()},
                                 {"final_train_loss", nullptr},
                                 {"best_val_bleu4", nullptr},
                                 {"best_epoch", run.best_epoch},
                                 {"reached_target", run.reached_target},
                                 {"seconds", run.seconds},
                                 {"val", nullptr}};
        if (!run.history.empty()) report["final_train_loss"] = run.history.back().train_loss;
        if (run.best_val_bleu4) report["best_val_bleu4"] = *run.best_val_bleu4;
        if (!val_recs.empty()) report["val"] = to_json(evaluate_model(run.model, vocab, val_recs, cfg.smoothing));
        detail::write_json(out / "report.json", report);
    }
    return run;
}

// ---------------------------------------------------------------------------

struct GradcheckGroup {
    std::string group;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

struct GradcheckSummary {
    Variant variant = Variant::m1;
    double tolerance = 1e-4;
    double max_rel_error = 0.0;
    std::vector<GradcheckGroup> groups;
    bool passed() const { return max_rel_error < tolerance; }
};

/// "decoder.0.mesh.gate.w" -> "decoder.0.mesh.gate"
inline std::string parameter_group(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

/// Finite-difference check of the teacher-forced loss of a micro model of
/// `variant` on one fixed random example.
inline GradcheckSummary run_gradcheck(Variant variant, double tolerance = 1e-4, std::uint64_t seed = 0) {
    auto cfg = ModelConfig::micro(variant);
    cfg.seed = seed;
    auto model = build_model(cfg);

    std::mt19937_64 rng(seed + 17);
    std::uniform_real_distribution<double> pixel(0.0, 1.0);
    const auto s = static_cast<std::size_t>(cfg.image_size), ch = static_cast<std::size_t>(cfg.channels);
    std::vector<double> px(s * s * ch);
    for (auto& v : px) v = pixel(rng);
    const auto L = static_cast<std::size_t>(cfg.max_len);
    std::uniform_int_distribution<int> word(4, static_cast<int>(cfg.vocab_size) - 1);
    TokenSequence tokens{std::vector<int>(L), L};
    tokens.ids[0] = kBosId;
    for (std::size_t i = 1; i + 1 < L; ++i) tokens.ids[i] = word(rng);
    tokens.ids[L - 1] = kEosId;
    const TrainingExample ex{Tensor({s, s, ch}, std::move(px)), tokens};

    const auto rep = finite_diff_gradcheck([&] { return example_loss(model, ex); }, model.parameters(), 1e-5, tolerance);
    GradcheckSummary out{variant, tolerance, rep.max_rel_error, {}};
    std::map<std::string, std::size_t> index;
    for (const auto& e : rep.entries) {
        const auto g = parameter_group(e.name);
        auto [it, fresh] = index.emplace(g, out.groups.size());
        if (fresh) out.groups.push_back({g, 0, 0.0});
        auto& row = out.groups[it->second];
        row.coordinates += e.coordinates;
        row.max_rel_error = std::max(row.max_rel_error, e.max_rel_error);
    }
    return out;
}

inline std::string to_table(const GradcheckSummary& s) {
    std::ostringstream os;
    char buf[160];
    for (const auto& g : s.groups) {
        std::snprintf(buf, sizeof buf, "%-3s %-32s %6zu  %.3e  %s\n", to_string(s.variant).c_str(), g.group.c_str(),
                      g.coordinates, g.max_rel_error, g.max_rel_error < s.tolerance ? "ok" : "FAIL");
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-3s %-32s %6s  %.3e  %s\n", to_string(s.variant).c_str(), "(all)", "",
                  s.max_rel_error, s.passed() ? "PASS" : "FAIL");
    os << buf;
    return os.str();
}

} // namespace semt
