// Command-line entry point: dataset build, DAMSM pre-training, GAN training,
// evaluation, sample generation, and the caption-edit sensitivity test.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cagan/checkpoint.hpp"
#include "cagan/config.hpp"
#include "cagan/io.hpp"
#include "cagan/metrics.hpp"
#include "cagan/toyset.hpp"
#include "cagan/train.hpp"

namespace fs = std::filesystem;
using namespace cagan;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
};

void add_common_flags(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "config file (key = value lines)");
    auto override_opt = [cmd, &opts](const std::string& flag, const std::string& key,
                                     const std::string& desc) {
        cmd->add_option_function<std::string>(
            flag, [&opts, key](const std::string& v) { opts.overrides.emplace_back(key, v); }, desc);
    };
    override_opt("--profile", "profile", "desk, paper-cub, or paper-coco");
    override_opt("--variant", "variant", "se or l+se");
    override_opt("--seed", "seed", "run seed");
    override_opt("--lambda", "lambda", "matching-loss weight");
    override_opt("--r", "r", "SE reduction ratio");
    override_opt("--batch", "batch", "batch size");
    override_opt("--lr", "lr", "Adam learning rate");
    override_opt("--epochs", "epochs", "training epochs");
    override_opt("--stage-h0", "stage_h0", "first stage resolution");
    override_opt("--max-steps", "max_steps", "cap on optimization steps (smoke runs)");
    override_opt("--threads", "threads", "worker thread count (1 = fully serial)");
    override_opt("--eval-every", "eval_every", "epochs between metric rows");
    override_opt("--eval-samples", "eval_samples", "samples per metric row");
    override_opt("--damsm-epochs", "damsm_epochs", "DAMSM pre-training epochs");
    override_opt("--n-train", "n_train", "training set size (build-data)");
    override_opt("--n-test", "n_test", "test set size (build-data)");
    override_opt("--placement", "placement", "local-attention sites, comma separated");
}

RunConfig resolve(const CommonOpts& opts) {
    std::vector<std::pair<std::string, std::string>> file_pairs;
    if (!opts.config_path.empty()) {
        if (!fs::exists(opts.config_path))
            throw IoError("config file not found: " + opts.config_path);
        file_pairs = parse_config_pairs(read_text_file(opts.config_path));
    }
    return resolve_config(file_pairs, opts.overrides);
}

RunConfig resolve_near_checkpoint(const CommonOpts& opts, const std::string& ckpt_path) {
    if (!opts.config_path.empty()) return resolve(opts);
    const fs::path sibling = fs::path(ckpt_path).parent_path() / "run.cfg";
    if (!fs::exists(sibling))
        throw IoError("no --config given and " + sibling.string() + " not found");
    CommonOpts with_sibling = opts;
    with_sibling.config_path = sibling.string();
    return resolve(with_sibling);
}

ToyDataset load_split_checked(const std::string& data_dir, const std::string& split) {
    if (!fs::exists(fs::path(data_dir) / split / "captions.tsv"))
        throw IoError("dataset split missing: " + (fs::path(data_dir) / split).string() +
                      " (run build-data first)");
    return load_dataset_split(data_dir, split);
}

// Rebuilds the generator and text encoder recorded in a training checkpoint.
struct LoadedGenerator {
    GanModel model;
    RunConfig cfg;
    Vocabulary vocab;
};

LoadedGenerator load_generator(const RunConfig& cfg, const std::string& data_dir,
                               const std::string& ckpt_path) {
    if (!fs::exists(ckpt_path)) throw IoError("checkpoint not found: " + ckpt_path);
    LoadedGenerator out{build_gan_model(cfg, load_dataset_vocab(data_dir)), cfg,
                        load_dataset_vocab(data_dir)};
    NamedTensors ckpt = load_checkpoint(ckpt_path);
    NamedTensors g = out.model.gen_params();
    assign_from_checkpoint(g, ckpt);
    NamedTensors frozen;
    out.model.txt.collect(frozen, "damsm.txt");
    assign_from_checkpoint(frozen, ckpt);
    freeze(frozen);
    return out;
}

int cmd_build_data(const CommonOpts& opts, const std::string& data_dir) {
    RunConfig cfg = resolve(opts);
    build_dataset(data_dir, cfg.n_train, cfg.n_test, cfg.seed, cfg.final_resolution());
    write_text_file((fs::path(data_dir) / "build.cfg").string(), cfg.serialize());
    std::cout << "wrote " << cfg.n_train << " train / " << cfg.n_test << " test images at "
              << cfg.final_resolution() << "x" << cfg.final_resolution() << " under " << data_dir
              << "\n";
    return 0;
}

int cmd_pretrain(const CommonOpts& opts, const std::string& data_dir, const std::string& out_dir) {
    RunConfig cfg = resolve(opts);
    apply_thread_config(cfg);
    fs::create_directories(out_dir);
    ToyDataset train = load_split_checked(data_dir, "train");
    Vocabulary vocab = load_dataset_vocab(data_dir);

    DamsmTrainResult res = pretrain_damsm(cfg, train, vocab, std::cout);
    NamedTensors damsm_params;
    res.model.collect(damsm_params);
    save_checkpoint((fs::path(out_dir) / "damsm.cagan").string(), damsm_params);

    EvalNet net = train_evalnet(cfg, train, std::cout);
    NamedTensors eval_params;
    net.collect(eval_params);
    save_checkpoint((fs::path(out_dir) / "evalnet.cagan").string(), eval_params);

    write_text_file((fs::path(out_dir) / "pretrain.cfg").string(), cfg.serialize());
    std::vector<double> curve = res.losses;
    write_line_chart_ppm((fs::path(out_dir) / "damsm_loss.ppm").string(), {curve});
    std::ostringstream losses_csv;
    losses_csv << "step,loss\n";
    losses_csv.precision(10);
    for (std::size_t i = 0; i < res.losses.size(); ++i) losses_csv << i << ',' << res.losses[i] << '\n';
    write_text_file((fs::path(out_dir) / "damsm_loss.csv").string(), losses_csv.str());
    std::cout << "saved DAMSM and EvalNet checkpoints under " << out_dir << "\n";
    return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_dir, const std::string& pretrain_dir,
              const std::string& out_dir, bool resume) {
    RunConfig cfg = resolve(opts);
    apply_thread_config(cfg);
    const std::string damsm_path = (fs::path(pretrain_dir) / "damsm.cagan").string();
    const std::string evalnet_path = (fs::path(pretrain_dir) / "evalnet.cagan").string();
    if (!fs::exists(damsm_path)) throw IoError("missing DAMSM checkpoint: " + damsm_path);
    if (!fs::exists(evalnet_path)) throw IoError("missing EvalNet checkpoint: " + evalnet_path);

    ToyDataset train = load_split_checked(data_dir, "train");
    ToyDataset test = load_split_checked(data_dir, "test");
    Vocabulary vocab = load_dataset_vocab(data_dir);

    GanModel model = build_gan_model(cfg, vocab);
    adopt_damsm(model, load_checkpoint(damsm_path));

    Rng eval_rng(0);
    EvalNet net(kClassCount, eval_rng);
    NamedTensors eval_params;
    net.collect(eval_params);
    assign_from_checkpoint(eval_params, load_checkpoint(evalnet_path));
    freeze(eval_params);

    EvalContext ctx = make_eval_context(net, test, model.txt, vocab, cfg);
    ctx.evalnet_hash = hash_file(evalnet_path);

    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "run.cfg").string(), cfg.serialize());
    TrainOutcome outcome = train_gan(cfg, model, train, ctx, vocab, out_dir, resume, std::cout);
    std::cout << "finished after " << outcome.steps_run << " steps; report at "
              << (fs::path(out_dir) / "report.csv").string() << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
             const std::string& evalnet_path, std::size_t n_samples) {
    RunConfig cfg = resolve_near_checkpoint(opts, ckpt);
    if (n_samples > 0) cfg.eval_samples = n_samples - n_samples % cfg.n_splits;
    apply_thread_config(cfg);
    if (!fs::exists(evalnet_path)) throw IoError("missing EvalNet checkpoint: " + evalnet_path);

    LoadedGenerator lg = load_generator(cfg, data_dir, ckpt);
    ToyDataset test = load_split_checked(data_dir, "test");

    Rng tmp(0);
    EvalNet net(kClassCount, tmp);
    NamedTensors eval_params;
    net.collect(eval_params);
    assign_from_checkpoint(eval_params, load_checkpoint(evalnet_path));
    freeze(eval_params);

    EvalContext ctx = make_eval_context(net, test, lg.model.txt, lg.vocab, cfg);
    ctx.evalnet_hash = hash_file(evalnet_path);
    MetricRow row = evaluate_generator(lg.model.gen, ctx, cfg, 0);
    std::cout.precision(4);
    std::cout << "IS " << row.is_mean << " +/- " << row.is_std << ", FID " << row.fid
              << "  (n=" << cfg.eval_samples << ", evalnet=" << std::hex << ctx.evalnet_hash
              << std::dec << ")\n";
    return 0;
}

int cmd_generate(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
                 const std::string& captions_path, const std::string& out_dir) {
    RunConfig cfg = resolve_near_checkpoint(opts, ckpt);
    apply_thread_config(cfg);
    if (!fs::exists(captions_path)) throw IoError("captions file not found: " + captions_path);
    LoadedGenerator lg = load_generator(cfg, data_dir, ckpt);
    fs::create_directories(out_dir);

    std::istringstream captions(read_text_file(captions_path));
    std::string line;
    std::size_t index = 0, written = 0;
    while (std::getline(captions, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            ++index;
            continue;
        }
        for (const auto& w : split_words(line))
            if (!lg.vocab.contains(w))
                std::cerr << "warning: unknown token '" << w << "' mapped to <unk>\n";
        Rng rng = Rng(cfg.seed).fork(0x6E4E0000 + index);
        std::vector<Tensor> stages =
            generate_stages(lg.model.gen, lg.model.txt, lg.vocab, line, cfg.max_len, rng);
        const std::size_t final_res = stages.back().dim(1);
        std::vector<Tensor> panels;
        for (auto& st : stages) {
            Tensor batched = reshape(st, {1, 3, st.dim(1), st.dim(2)});
            Tensor up = st.dim(1) == final_res ? batched : resize_bilinear(batched, final_res, final_res);
            panels.push_back(reshape(up, {3, final_res, final_res}));
        }
        char name[32];
        std::snprintf(name, sizeof(name), "caption_%03zu.ppm", index);
        write_ppm((fs::path(out_dir) / name).string(), tile_images(panels, panels.size()));
        ++index;
        ++written;
    }
    std::cout << "wrote " << written << " image grids to " << out_dir << "\n";
    return 0;
}

int cmd_sensitivity(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
                    const std::string& base_caption, const std::string& from_word,
                    const std::string& to_word, std::size_t draws, const std::string& out_path) {
    RunConfig cfg = resolve_near_checkpoint(opts, ckpt);
    apply_thread_config(cfg);
    LoadedGenerator lg = load_generator(cfg, data_dir, ckpt);
    SensitivityReport rep = run_sensitivity(lg.model.gen, lg.model.txt, lg.vocab, base_caption,
                                            from_word, to_word, draws, cfg.seed, cfg.max_len);
    const std::string text = rep.to_text();
    if (!out_path.empty()) write_text_file(out_path, text);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"combined-attention text-to-image model on a synthetic shapes dataset"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string data_dir = "data";
    std::string out_dir = "out";
    std::string pretrain_dir;
    std::string ckpt, captions_path, evalnet_path;
    std::string base_caption, from_word, to_word, report_path;
    std::size_t n_samples = 0, draws = 50;
    bool resume = false;

    auto* build = app.add_subcommand("build-data", "render the captioned shapes dataset");
    build->add_option("--data", data_dir, "dataset directory")->required();
    add_common_flags(build, opts);

    auto* pre = app.add_subcommand("pretrain-damsm", "pre-train the matching model and EvalNet");
    pre->add_option("--data", data_dir)->required();
    pre->add_option("--out", out_dir, "output directory for checkpoints")->required();
    add_common_flags(pre, opts);

    auto* train = app.add_subcommand("train", "adversarial training with periodic IS/FID rows");
    train->add_option("--data", data_dir)->required();
    train->add_option("--pretrain", pretrain_dir, "directory holding damsm.cagan + evalnet.cagan")
        ->required();
    train->add_option("--out", out_dir)->required();
    train->add_flag("--resume", resume, "resume from gan_latest.cagan in --out");
    add_common_flags(train, opts);

    auto* eval = app.add_subcommand("eval", "score a checkpoint (IS and FID)");
    eval->add_option("--data", data_dir)->required();
    eval->add_option("--ckpt", ckpt)->required();
    eval->add_option("--evalnet", evalnet_path)->required();
    eval->add_option("--n-samples", n_samples, "overrides eval_samples");
    add_common_flags(eval, opts);

    auto* gen = app.add_subcommand("generate", "render stage images for a caption file");
    gen->add_option("--data", data_dir)->required();
    gen->add_option("--ckpt", ckpt)->required();
    gen->add_option("--captions", captions_path, "one caption per line")->required();
    gen->add_option("--out", out_dir)->required();
    add_common_flags(gen, opts);

    auto* sens = app.add_subcommand("sensitivity", "caption-edit sensitivity test");
    sens->add_option("--data", data_dir)->required();
    sens->add_option("--ckpt", ckpt)->required();
    sens->add_option("--caption", base_caption, "base caption")->required();
    sens->add_option("--from", from_word, "word to replace")->required();
    sens->add_option("--to", to_word, "replacement word")->required();
    sens->add_option("--draws", draws, "noise draws");
    sens->add_option("--report", report_path, "write the report here");
    add_common_flags(sens, opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (build->parsed()) return cmd_build_data(opts, data_dir);
        if (pre->parsed()) return cmd_pretrain(opts, data_dir, out_dir);
        if (train->parsed()) return cmd_train(opts, data_dir, pretrain_dir, out_dir, resume);
        if (eval->parsed()) return cmd_eval(opts, data_dir, ckpt, evalnet_path, n_samples);
        if (gen->parsed()) return cmd_generate(opts, data_dir, ckpt, captions_path, out_dir);
        if (sens->parsed())
            return cmd_sensitivity(opts, data_dir, ckpt, base_caption, from_word, to_word, draws,
                                   report_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
