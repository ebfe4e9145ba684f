// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "semt/harness.hpp"
#include "test_util.hpp"

using namespace semt;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("semt_harness_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct CliResult {
    int status = -1;
    std::string out, err;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("\"") + SEMT_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                            err.string() + "\"";
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

json small_model() {
    return {{"d_model", 16}, {"heads", 2}, {"enc_blocks", 1}, {"dec_blocks", 1}, {"max_len", 12}};
}

RunConfig small_run(const fs::path& out, long epochs) {
    json overrides = {{"model", small_model()}, {"epochs", epochs}, {"lr", 1e-4}, {"synthetic", {{"n", 40}}},
                      {"out", out.string()}};
    return resolve_run_config("toy", nullptr, overrides);
}

std::vector<json> read_jsonl(const fs::path& p) {
    std::vector<json> lines;
    std::ifstream f(p);
    for (std::string line; std::getline(f, line);)
        if (!line.empty()) lines.push_back(json::parse(line));
    return lines;
}

} // namespace

TEST(RunConfig, ProfilesAndDefaults) {
    const RunConfig plain;
    EXPECT_EQ(plain.epochs, 20);
    EXPECT_EQ(plain.lr, 1e-4);
    EXPECT_EQ(plain.decay, 0.95);
    EXPECT_EQ(plain.constant_epochs, 5);
    const auto paper = RunConfig::preset("paper");
    EXPECT_EQ(paper.batch_size, 500);
    EXPECT_EQ(paper.lr, 1e-4);
    EXPECT_EQ(paper.model.d_model, 768);
    const auto toy = RunConfig::preset("toy");
    EXPECT_EQ(toy.lr, kToyBaseLr);
    EXPECT_EQ(toy.batch_size, kToyBatchSize);
    EXPECT_THROW(RunConfig::preset("huge"), ConfigError);
}

TEST(RunConfig, JsonRoundTrip) {
    auto c = RunConfig::preset("toy");
    c.target_loss = 0.1;
    c.smoothing = BleuSmoothing::epsilon;
    c.synthetic.n = 64;
    c.train_on = "all";
    const auto back = run_config_from_json(to_json(c), RunConfig{});
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(RunConfig, UnknownFieldsAreNamed) {
    auto msg = [](const json& j) {
        try {
            run_config_from_json(j, RunConfig{});
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(msg({{"epochz", 3}}).find("epochz"), std::string::npos);
    EXPECT_NE(msg({{"synthetic", {{"count", 3}}}}).find("synthetic.count"), std::string::npos);
    EXPECT_NE(msg({{"model", {{"layers", 3}}}}).find("layers"), std::string::npos);
    EXPECT_NE(msg({{"lr", "fast"}}).find("lr"), std::string::npos);
}

TEST(RunConfig, FlagsBeatFileBeatsProfile) {
    const json file = {{"profile", "paper"}, {"epochs", 3}, {"lr", 5e-4}};
    auto c = resolve_run_config(std::nullopt, file, json::object());
    EXPECT_EQ(c.profile, "paper");
    EXPECT_EQ(c.batch_size, 500);
    EXPECT_EQ(c.epochs, 3);
    EXPECT_EQ(c.lr, 5e-4);
    c = resolve_run_config("toy", file, {{"lr", 1e-3}, {"seed", 9}});
    EXPECT_EQ(c.profile, "toy");
    EXPECT_EQ(c.batch_size, kToyBatchSize);
    EXPECT_EQ(c.lr, 1e-3);
    EXPECT_EQ(c.model.seed, 9u);
}

TEST(Gradcheck, GroupsByParameterPrefix) {
    EXPECT_EQ(parameter_group("decoder.0.mesh.gate.w"), "decoder.0.mesh.gate");
    EXPECT_EQ(parameter_group("head"), "head");
    const auto s = run_gradcheck(Variant::m3);
    EXPECT_TRUE(s.passed()) << to_table(s);
    bool saw_memory = false;
    for (const auto& g : s.groups) {
        EXPECT_LT(g.max_rel_error, 1e-4) << g.group;
        saw_memory = saw_memory || g.group.find("attn") != std::string::npos;
    }
    EXPECT_TRUE(saw_memory);
}

TEST(Gradcheck, CorruptedBackwardFails) {
    semt::testing::ScopedBackwardFault fault("softmax_rows", 1.5);
    EXPECT_FALSE(run_gradcheck(Variant::m1).passed());
}

TEST(Train, WritesRunDirectoryAndLogsTheSchedule) {
    const auto dir = scratch_dir("train");
    const auto cfg = small_run(dir / "run", 7);
    const auto run = train(cfg);
    for (const char* f : {"config.json", "logs.jsonl", "report.json", "checkpoints/final.ckpt", "checkpoints/best.ckpt"})
        EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;

    const auto logs = read_jsonl(dir / "run" / "logs.jsonl");
    ASSERT_EQ(logs.size(), 7u);
    for (long e = 0; e < 7; ++e) {
        const auto& l = logs[std::size_t(e)];
        EXPECT_EQ(l.at("epoch").get<long>(), e);
        const double want = e < 5 ? 1e-4 : 1e-4 * std::pow(0.95, double(e - 4));
        EXPECT_EQ(l.at("lr").get<double>(), want) << e;
        EXPECT_TRUE(l.at("train_loss").is_number());
        EXPECT_TRUE(l.at("val_bleu4").is_number());
    }
    const auto report = json::parse(slurp(dir / "run" / "report.json"));
    EXPECT_EQ(report.at("epochs_run"), 7);
    EXPECT_EQ(report.at("final_train_loss").get<double>(), run.history.back().train_loss);
    for (const char* k : {"bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rougeL", "samples"})
        EXPECT_TRUE(report.at("val").contains(k)) << k;
    const auto saved = json::parse(slurp(dir / "run" / "config.json"));
    EXPECT_EQ(saved.at("model").at("vocab_size").get<long>(), long(run.vocab.size()));
}

TEST(Train, SameSeedIsBitReproducible) {
    const auto dir = scratch_dir("repro");
    const auto a = train(small_run(dir / "a", 3));
    const auto b = train(small_run(dir / "b", 3));
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a.history[i].train_loss),
                  std::bit_cast<std::uint64_t>(b.history[i].train_loss));
    for (const auto& p : a.model.parameters())
        EXPECT_TRUE(test::bitwise_equal(p.tensor, b.model.parameters().find(p.name)->tensor)) << p.name;

    auto other = small_run(dir / "c", 3);
    other.seed = 1;
    EXPECT_NE(train(other).history.back().train_loss, a.history.back().train_loss);
}

TEST(Train, ResumeContinuesTheSameTrajectory) {
    const auto dir = scratch_dir("resume");
    const auto straight = train(small_run(dir / "straight", 4));
    train(small_run(dir / "split", 2));
    TrainOptions opt;
    opt.resume = dir / "split" / "checkpoints" / "final.ckpt";
    const auto resumed = train(small_run(dir / "split", 4), opt);
    ASSERT_EQ(resumed.history.size(), 2u);
    EXPECT_EQ(resumed.history[0].epoch, 2);
    EXPECT_EQ(resumed.history.back().train_loss, straight.history.back().train_loss);
    EXPECT_EQ(read_jsonl(dir / "split" / "logs.jsonl").size(), 4u);
}

TEST(Train, ResumeFromMismatchedCheckpointFails) {
    const auto dir = scratch_dir("mismatch");
    train(small_run(dir / "m5", 1));
    auto cfg = small_run(dir / "m1", 2);
    cfg.model.variant = Variant::m1;
    TrainOptions opt;
    opt.resume = dir / "m5" / "checkpoints" / "final.ckpt";
    try {
        train(cfg, opt);
        FAIL() << "expected a config mismatch";
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.kind(), "config-mismatch");
        EXPECT_NE(std::string(e.what()).find("variant"), std::string::npos);
    }
}

TEST(Train, InvalidConfigIsRejectedBeforeTraining) {
    const auto dir = scratch_dir("invalid");
    auto cfg = small_run(dir / "run", 1);
    cfg.batch_size = 0;
    EXPECT_THROW(train(cfg), ConfigError);
    EXPECT_FALSE(fs::exists(dir / "run" / "logs.jsonl"));
}

TEST(Evaluate, TwiceGivesIdenticalReports) {
    auto recs = generate_synthetic(12, 1);
    auto vocab = Vocabulary::build(all_captions(recs));
    auto c = ModelConfig::micro(Variant::m5);
    c.image_size = 32;
    c.patch_size = 8;
    c.max_len = 12;
    c.vocab_size = long(vocab.size());
    auto m = build_model(c);
    EXPECT_EQ(to_json(evaluate_model(m, vocab, recs)), to_json(evaluate_model(m, vocab, recs)));
}

// -- command line -----------------------------------------------------------

TEST(Cli, PrintConfigMergesLayers) {
    const auto dir = scratch_dir("cli_print");
    std::ofstream(dir / "cfg.json") << json{{"epochs", 3}, {"lr", 0.5}}.dump();
    const auto r = run_cli("print-config --config \"" + (dir / "cfg.json").string() + "\" --lr 0.25 --variant m2", dir);
    ASSERT_EQ(r.status, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_EQ(j.at("epochs"), 3);
    EXPECT_EQ(j.at("lr"), 0.25);
    EXPECT_EQ(j.at("model").at("variant"), "m2");
    EXPECT_EQ(j.at("batch_size"), kToyBatchSize);
}

TEST(Cli, ErrorsAreOneMachineParsableLine) {
    const auto dir = scratch_dir("cli_err");
    std::ofstream(dir / "bad.json") << R"({"epochz": 3})";
    for (const auto& [args, kind] : std::vector<std::pair<std::string, std::string>>{
             {"print-config --config \"" + (dir / "bad.json").string() + "\"", "config"},
             {"print-config --variant m9", "config"},
             {"print-config --profile huge", "config"},
             {"train --no-such-flag", "usage"},
             {"caption --checkpoint \"" + (dir / "none.ckpt").string() + "\" --image x.ppm", "io"}}) {
        const auto r = run_cli(args, dir);
        EXPECT_NE(r.status, 0) << args;
        EXPECT_EQ(r.err.rfind("error[" + kind + "]: ", 0), 0u) << args << " -> " << r.err;
        EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    }
}

TEST(Cli, GenerateDataIsDeterministic) {
    const auto dir = scratch_dir("cli_gen");
    const auto a = dir / "a.jsonl", b = dir / "b.jsonl";
    ASSERT_EQ(run_cli("generate-data --n 50 --seed 3 --out \"" + a.string() + "\"", dir).status, 0);
    ASSERT_EQ(run_cli("generate-data --n 50 --seed 3 --out \"" + b.string() + "\"", dir).status, 0);
    EXPECT_EQ(slurp(a), slurp(b));
    const auto recs = load_annotations(a);
    ASSERT_EQ(recs.size(), 50u);
    EXPECT_EQ(select_split(recs, Split::train).size(), 40u);
    EXPECT_EQ(select_split(recs, Split::val).size(), 5u);
    EXPECT_EQ(select_split(recs, Split::test).size(), 5u);
}

TEST(Cli, GradcheckPassesAndNegativeControlFails) {
    const auto dir = scratch_dir("cli_grad");
    const auto ok = run_cli("gradcheck --variant m4", dir);
    EXPECT_EQ(ok.status, 0) << ok.err;
    EXPECT_NE(ok.out.find("PASS"), std::string::npos);
    EXPECT_NE(ok.out.find("encoder.0.attn "), std::string::npos) << ok.out;
    const auto bad = run_cli("gradcheck --variant m4 --corrupt-backward 1.5", dir);
    EXPECT_NE(bad.status, 0);
    EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
    EXPECT_EQ(bad.err.rfind("error[gradcheck]: ", 0), 0u);
}

TEST(Cli, TrainEvalCaption) {
    const auto dir = scratch_dir("cli_train");
    std::ofstream(dir / "cfg.json") << json{{"model", small_model()}, {"synthetic", {{"n", 40}}}}.dump();
    const auto cfg = "--config \"" + (dir / "cfg.json").string() + "\"";
    const auto run = dir / "run";
    const auto t = run_cli("train " + cfg + " --epochs 2 --variant m5 --out \"" + run.string() + "\"", dir);
    ASSERT_EQ(t.status, 0) << t.err;
    EXPECT_EQ(read_jsonl(run / "logs.jsonl").size(), 2u);

    const auto ckpt = "--checkpoint \"" + (run / "checkpoints" / "best.ckpt").string() + "\"";
    const auto r1 = dir / "r1.json", r2 = dir / "r2.json";
    ASSERT_EQ(run_cli("eval " + cfg + " " + ckpt + " --split val --report \"" + r1.string() + "\"", dir).status, 0);
    ASSERT_EQ(run_cli("eval " + cfg + " " + ckpt + " --split val --report \"" + r2.string() + "\"", dir).status, 0);
    EXPECT_EQ(slurp(r1), slurp(r2));
    EXPECT_EQ(json::parse(slurp(r1)).at("samples").size(), 4u);

    const auto recs = generate_synthetic(1, 0);
    write_ppm(dir / "img.ppm", recs[0].image);
    const auto c1 = run_cli("caption " + ckpt + " --image \"" + (dir / "img.ppm").string() + "\"", dir);
    const auto c2 = run_cli("caption " + ckpt + " --image \"" + (dir / "img.ppm").string() + "\"", dir);
    ASSERT_EQ(c1.status, 0) << c1.err;
    EXPECT_EQ(c1.out, c2.out);
    EXPECT_FALSE(c1.out.empty());

    write_ppm(dir / "small.ppm", Tensor::zeros({16, 16, 3}));
    const auto bad = run_cli("caption " + ckpt + " --image \"" + (dir / "small.ppm").string() + "\"", dir);
    EXPECT_NE(bad.status, 0);
    EXPECT_EQ(bad.err.rfind("error[shape]: ", 0), 0u) << bad.err;
}
