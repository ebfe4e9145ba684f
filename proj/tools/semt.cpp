// SPDX-License-Identifier: Apache-2.0
// semt: train, evaluate and inspect toy mesh captioning models.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "semt/harness.hpp"

using namespace semt;
using nlohmann::json;

namespace {

struct CommonFlags {
    std::optional<std::string> config, profile, out, variant, data;
    std::optional<std::uint64_t> seed;
    std::optional<long> epochs, batch_size;
    std::optional<double> lr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config, "JSON run config file");
        cmd->add_option("--profile", profile, "preset: toy or paper");
        cmd->add_option("--seed", seed, "training and initialization seed");
        cmd->add_option("--out", out, "run directory");
        cmd->add_option("--variant", variant, "m1, m2, m3, m4 or m5");
        cmd->add_option("--epochs", epochs);
        cmd->add_option("--batch-size", batch_size);
        cmd->add_option("--lr", lr, "base learning rate");
        cmd->add_option("--data", data, "annotation JSONL (default: synthetic)");
    }

    RunConfig resolve() const {
        json file;
        if (config) file = read_json_file(*config);
        json flags = json::object();
        if (seed) flags["seed"] = *seed;
        if (out) flags["out"] = *out;
        if (variant) flags["model"]["variant"] = *variant;
        if (epochs) flags["epochs"] = *epochs;
        if (batch_size) flags["batch_size"] = *batch_size;
        if (lr) flags["lr"] = *lr;
        if (data) flags["dataset"] = *data;
        return resolve_run_config(profile, file, flags);
    }
};

void print_epoch(const EpochLog& e) {
    std::printf("epoch %3ld  lr %.3e  train_loss %.5f", e.epoch, e.lr, e.train_loss);
    if (e.val_bleu4) std::printf("  val_bleu4 %.4f", *e.val_bleu4);
    std::printf("\n");
    std::fflush(stdout);
}

std::vector<CaptionRecord> records_for_split(const std::vector<CaptionRecord>& all, const std::string& split) {
    if (split == "all") return all;
    return select_split(all, parse_split(split));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy mesh / static-expansion transformer captioner"};
    app.require_subcommand(1);

    CommonFlags train_flags, print_flags, eval_flags;
    std::optional<std::string> resume;
    auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
    train_flags.attach(train_cmd);
    train_cmd->add_option("--resume", resume, "checkpoint to continue from");

    auto* print_cmd = app.add_subcommand("print-config", "print the resolved run config as JSON");
    print_flags.attach(print_cmd);

    std::string eval_ckpt, eval_split = "test", eval_smoothing = "none";
    std::optional<std::string> eval_report;
    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    eval_flags.attach(eval_cmd);
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
    eval_cmd->add_option("--split", eval_split, "train, val, test or all");
    eval_cmd->add_option("--smoothing", eval_smoothing, "none or epsilon");
    eval_cmd->add_option("--report", eval_report, "write the report JSON here");

    std::string cap_ckpt, cap_image;
    auto* caption_cmd = app.add_subcommand("caption", "caption one PPM image");
    caption_cmd->add_option("--checkpoint", cap_ckpt)->required();
    caption_cmd->add_option("--image", cap_image)->required();

    std::optional<std::string> gc_variant;
    double gc_tol = 1e-4;
    std::optional<double> gc_fault;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of micro models");
    grad_cmd->add_option("--variant", gc_variant, "check one variant (default: all)");
    grad_cmd->add_option("--tol", gc_tol);
    grad_cmd->add_option("--corrupt-backward", gc_fault, "scale the softmax backward pass (test hook)");

    long gen_n = 512;
    std::uint64_t gen_seed = 7;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("generate-data", "write a synthetic JSONL dataset");
    gen_cmd->add_option("--n", gen_n);
    gen_cmd->add_option("--seed", gen_seed);
    gen_cmd->add_option("--out", gen_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::fprintf(stderr, "error[usage]: %s\n", msg.c_str());
        return 2;
    }

    try {
        if (*print_cmd) {
            std::cout << to_json(print_flags.resolve()).dump(2) << '\n';
        } else if (*train_cmd) {
            TrainOptions opt;
            if (resume) opt.resume = *resume;
            opt.on_epoch = print_epoch;
            const auto cfg = train_flags.resolve();
            const auto run = train(cfg, opt);
            std::printf("run directory %s (%zu epochs, %.1f s)\n", cfg.out.c_str(), run.history.size(), run.seconds);
        } else if (*eval_cmd) {
            const auto ck = load_checkpoint(eval_ckpt);
            const auto model = model_from_checkpoint(ck);
            const auto vocab = Vocabulary::from_tokens(ck.vocabulary);
            const auto records = records_for_split(load_records(eval_flags.resolve()), eval_split);
            if (records.empty()) throw DataError("split '" + eval_split + "' is empty");
            const auto rep = evaluate_model(model, vocab, records, parse_smoothing(eval_smoothing));
            std::cout << to_table(rep, to_string(model.config().variant));
            if (eval_report) detail::write_json(*eval_report, to_json(rep));
        } else if (*caption_cmd) {
            const auto ck = load_checkpoint(cap_ckpt);
            const auto model = model_from_checkpoint(ck);
            const auto vocab = Vocabulary::from_tokens(ck.vocabulary);
            const auto image = read_ppm(cap_image);
            const auto seq = greedy_decode(model, image, static_cast<std::size_t>(model.config().max_len));
            std::cout << vocab.decode(seq) << '\n';
        } else if (*grad_cmd) {
            std::optional<testing::ScopedBackwardFault> fault;
            if (gc_fault) fault.emplace("softmax_rows", *gc_fault);
            bool ok = true;
            for (auto v : kAllVariants) {
                if (gc_variant && parse_variant(*gc_variant) != v) continue;
                const auto s = run_gradcheck(v, gc_tol);
                std::cout << to_table(s);
                ok = ok && s.passed();
            }
            if (!ok) {
                std::fprintf(stderr, "error[gradcheck]: analytic gradients disagree with finite differences\n");
                return 1;
            }
        } else if (*gen_cmd) {
            const auto recs = generate_synthetic(gen_n, gen_seed);
            write_annotations(gen_out, recs);
            const auto sz = split_sizes(recs.size());
            std::printf("wrote %zu records to %s (train %zu, val %zu, test %zu)\n", recs.size(), gen_out.c_str(),
                        sz.train, sz.val, sz.test);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error[%s]: %s\n", e.kind().c_str(), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[internal]: %s\n", e.what());
        return 2;
    }
    return 0;
}
