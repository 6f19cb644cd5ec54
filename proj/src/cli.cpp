#include "personalize/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "personalize/errors.hpp"
#include "personalize/evaluation.hpp"
#include "personalize/trainer.hpp"

namespace personalize {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::vector<double> parse_csv_doubles(const std::string& s, size_t n, const std::string& flag) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(flag + ": cannot parse '" + item + "' as a number");
        }
    }
    if (out.size() != n)
        throw UsageError(flag + " expects " + std::to_string(n) + " comma-separated values");
    return out;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

// --method {ti, ti+, neti, neti+}. The plain variants are strict reductions
// of the "+" pipeline: subject pool only, no background loss, no contrastive
// schedule — one code path for baselines and the full method.
struct MethodFlag {
    Method method = Method::kTI;
    bool plus = true;
};

MethodFlag parse_method_flag(const std::string& s) {
    if (s == "ti") return {Method::kTI, false};
    if (s == "ti+") return {Method::kTI, true};
    if (s == "neti") return {Method::kNeTI, false};
    if (s == "neti+") return {Method::kNeTI, true};
    throw UsageError("--method must be one of ti, ti+, neti, neti+");
}

struct BackboneFlags {
    int width = 16;
    int layers = 4;
    int timesteps = 100;
    std::string schedule = "linear";
    uint64_t seed = 11;
    uint64_t encoder_seed = 1234;
};

void add_backbone_flags(CLI::App* cmd, BackboneFlags& flags) {
    cmd->add_option("--backbone-width", flags.width, "denoiser channel width");
    cmd->add_option("--backbone-layers", flags.layers, "denoiser cross-attention layers");
    cmd->add_option("--backbone-timesteps", flags.timesteps, "diffusion timesteps T");
    cmd->add_option("--backbone-schedule", flags.schedule, "noise schedule: linear|cosine");
    cmd->add_option("--backbone-seed", flags.seed, "frozen denoiser init seed");
    cmd->add_option("--encoder-seed", flags.encoder_seed, "frozen text encoder seed");
}

ToyUNetConfig backbone_config(const BackboneFlags& flags) {
    ToyUNetConfig cfg;
    cfg.channels = 3;
    cfg.d_text = 16;
    cfg.width = flags.width;
    cfg.layers = flags.layers;
    cfg.T = flags.timesteps;
    cfg.schedule_kind = flags.schedule;
    return cfg;
}

EvalSplit parse_split_flag(const std::string& s) {
    if (s == "train") return EvalSplit::kTrain;
    if (s == "test") return EvalSplit::kTest;
    throw UsageError("--split must be train or test");
}

void note_artifact(CommandResult& result, const fs::path& path) {
    result.artifacts_written.push_back(path.string());
}

std::string fmt_sim(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Command option bundles
// ---------------------------------------------------------------------------

struct TrainFlags {
    std::string manifest;
    std::string subject;
    std::string method = "ti+";
    int steps = 100;
    double lr = 1e-5;
    int batch = 8;
    std::string weights = "1,1,1,0.1";
    double tau = 0.07;
    std::string schedule = "sigmoid";
    double schedule_k = 0.0;
    std::string pool_mix = "0.25,0.25,0.5";
    int checkpoint_interval = 0;
    int neti_hidden = 32;
    uint64_t seed = 0;
    std::string out;
    BackboneFlags backbone;
};

TrainingConfig training_config_from_flags(const TrainFlags& flags) {
    const MethodFlag method = parse_method_flag(flags.method);
    TrainingConfig cfg;
    cfg.method = method.method;
    cfg.learning_rate = flags.lr;
    cfg.batch_size = flags.batch;
    cfg.total_steps = flags.steps;
    const std::vector<double> w = parse_csv_doubles(flags.weights, 4, "--weights");
    cfg.weights.w_s = w[0];
    cfg.weights.w_b = w[1];
    cfg.weights.w_i = w[2];
    cfg.weights.w_c_max = w[3];
    cfg.weights.tau = flags.tau;
    cfg.schedule_kind = schedule_kind_from_name(flags.schedule);
    cfg.schedule_k = flags.schedule_k;
    const std::vector<double> mix = parse_csv_doubles(flags.pool_mix, 3, "--pool-mix");
    cfg.pool_mix = {mix[0], mix[1], mix[2]};
    cfg.seed = flags.seed;
    cfg.checkpoint_interval = flags.checkpoint_interval;
    cfg.neti_hidden = flags.neti_hidden;
    if (!method.plus) {
        // Reduction: plain TI/NeTI train on subject prompts alone.
        cfg.pool_mix = {1.0, 0.0, 0.0};
        cfg.weights.w_b = 0.0;
        cfg.weights.w_c_max = 0.0;
    }
    cfg.check();
    return cfg;
}

void cmd_train(const TrainFlags& flags, CommandResult& result) {
    const DatasetManifest manifest = load_manifest(flags.manifest);
    const TrainingConfig cfg = training_config_from_flags(flags);
    const MethodFlag method = parse_method_flag(flags.method);
    if (!method.plus)
        result.summary.push_back("method " + flags.method +
                                 " reduces to the '+' pipeline with pool_mix=(1,0,0), w_b=0, "
                                 "w_c_max=0");

    const ToyUNet model(backbone_config(flags.backbone), flags.backbone.seed);
    const ToyTextEncoder encoder(16, flags.backbone.encoder_seed);
    const IdentityCodec codec;

    fs::path out = flags.out.empty()
                       ? artifact_cache_dir() / "train" /
                             (flags.subject + "-" + flags.method + "-" + flags.schedule + "-seed" +
                              std::to_string(flags.seed))
                       : fs::path(flags.out);
    Trainer trainer(cfg, manifest, flags.subject, model, encoder, codec);
    trainer.run(out);

    note_artifact(result, out / "trace.jsonl");
    for (const auto& entry : fs::directory_iterator(out)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("checkpoint_", 0) == 0) note_artifact(result, entry.path());
    }
    std::sort(result.artifacts_written.begin(), result.artifacts_written.end());
    result.summary.push_back("trained " + flags.subject + " (" + flags.method + ", " +
                             std::to_string(cfg.total_steps) + " steps) -> " + out.string());
}

struct EvalFlags {
    std::string manifest;
    std::string checkpoint;
    std::string split = "test";
    int images_per_prompt = 1;
    int sample_steps = 5;
    double guidance = 1.0;
    uint64_t seed = 0;
    std::string out;
    BackboneFlags backbone;
};

void add_eval_flags(CLI::App* cmd, EvalFlags& flags, bool single_checkpoint) {
    cmd->add_option("--manifest", flags.manifest, "dataset manifest path")->required();
    if (single_checkpoint)
        cmd->add_option("--checkpoint", flags.checkpoint, "trainer checkpoint archive")
            ->required();
    cmd->add_option("--split", flags.split, "train|test");
    cmd->add_option("--images-per-prompt", flags.images_per_prompt, "samples per caption");
    cmd->add_option("--steps", flags.sample_steps, "sampler steps");
    cmd->add_option("--guidance", flags.guidance, "guidance scale (1.0 = off)");
    cmd->add_option("--seed", flags.seed, "plan seed");
    cmd->add_option("--out", flags.out, "output location");
    add_backbone_flags(cmd, flags.backbone);
}

GenerationSettings generation_settings(const EvalFlags& flags) {
    GenerationSettings s;
    s.steps = flags.sample_steps;
    s.guidance = flags.guidance;
    return s;
}

void cmd_generate(const EvalFlags& flags, CommandResult& result) {
    const DatasetManifest manifest = load_manifest(flags.manifest);
    const Archive checkpoint = load_checkpoint(flags.checkpoint);
    const GenerationContext ctx = make_generation_context(checkpoint);
    const ToyUNet model(backbone_config(flags.backbone), flags.backbone.seed);
    const ToyTextEncoder encoder(16, flags.backbone.encoder_seed);
    const IdentityCodec codec;

    const EvaluationPlan plan =
        restrict_plan(build_plan(manifest, parse_split_flag(flags.split),
                                 flags.images_per_prompt, flags.seed),
                      ctx.subject_id);
    const GeneratedSet generated =
        run_generation(plan, checkpoint, model, encoder, codec, generation_settings(flags));

    const fs::path out = flags.out.empty()
                             ? artifact_cache_dir() / "generate" / ctx.checkpoint_id
                             : fs::path(flags.out);
    fs::create_directories(out);
    ordered_json index = ordered_json::array();
    for (size_t i = 0; i < plan.tasks.size(); ++i) {
        const EvalTask& task = plan.tasks[i];
        char name[32];
        std::snprintf(name, sizeof(name), "gen_%06zu.ppm", i);
        write_ppm(out / name, generated.images.at(task_key(task)));
        index.push_back(ordered_json{{"file", name},
                                     {"key", task_key(task)},
                                     {"subject", task.subject_id},
                                     {"reference", task.image_id},
                                     {"caption_index", task.caption_index},
                                     {"sample_index", task.sample_index},
                                     {"seed", task.seed},
                                     {"prompt", task.prompt}});
        note_artifact(result, out / name);
    }
    std::ofstream index_file(out / "index.json", std::ios::binary | std::ios::trunc);
    index_file << index.dump(2) << "\n";
    note_artifact(result, out / "index.json");
    result.summary.push_back("generated " + std::to_string(plan.tasks.size()) + " images -> " +
                             out.string());
}

void cmd_evaluate(const EvalFlags& flags, CommandResult& result) {
    const DatasetManifest manifest = load_manifest(flags.manifest);
    const Archive checkpoint = load_checkpoint(flags.checkpoint);
    const GenerationContext ctx = make_generation_context(checkpoint);
    const ToyUNet model(backbone_config(flags.backbone), flags.backbone.seed);
    const ToyTextEncoder encoder(16, flags.backbone.encoder_seed);
    const IdentityCodec codec;

    const EvaluationPlan plan =
        restrict_plan(build_plan(manifest, parse_split_flag(flags.split),
                                 flags.images_per_prompt, flags.seed),
                      ctx.subject_id);
    const GeneratedSet generated =
        run_generation(plan, checkpoint, model, encoder, codec, generation_settings(flags));
    const EvaluationReport report =
        score(generated, plan, StubContrastiveEmbedder(), StubSelfSupEmbedder());

    const fs::path out = flags.out.empty()
                             ? artifact_cache_dir() / "evaluate" /
                                   (ctx.checkpoint_id + "-" + flags.split + ".json")
                             : fs::path(flags.out);
    write_report(report, out);
    note_artifact(result, out);
    result.summary.push_back("evaluated " + std::to_string(report.count) + " generations (" +
                             flags.split + " split)");
    result.summary.push_back("  text_image_sim              " +
                             fmt_sim(report.aggregate.text_image_sim));
    result.summary.push_back("  image_image_sim_contrastive " +
                             fmt_sim(report.aggregate.image_image_sim_contrastive));
    result.summary.push_back("  image_image_sim_selfsup     " +
                             fmt_sim(report.aggregate.image_image_sim_selfsup));
}

void cmd_curve(const EvalFlags& flags, const std::string& checkpoints_csv,
               CommandResult& result) {
    const DatasetManifest manifest = load_manifest(flags.manifest);
    std::vector<Archive> checkpoints;
    for (const std::string& path : split_csv(checkpoints_csv))
        checkpoints.push_back(load_checkpoint(path));
    const ToyUNet model(backbone_config(flags.backbone), flags.backbone.seed);
    const ToyTextEncoder encoder(16, flags.backbone.encoder_seed);
    const IdentityCodec codec;

    CurveOptions options;
    options.images_per_prompt = flags.images_per_prompt;
    options.seed = flags.seed;
    options.generation = generation_settings(flags);
    const CurveReport curve = overfit_curve(checkpoints, manifest, model, encoder, codec,
                                            StubContrastiveEmbedder(), StubSelfSupEmbedder(),
                                            options);

    const fs::path out =
        flags.out.empty() ? artifact_cache_dir() / "curve" / curve.subject_id : fs::path(flags.out);
    write_curve(curve, out / "curve.json");
    write_curve_svg(curve, out / "curve.svg");
    note_artifact(result, out / "curve.json");
    note_artifact(result, out / "curve.svg");
    for (const CurveRow& row : curve.rows)
        result.summary.push_back("step " + std::to_string(row.step) + " " +
                                 split_name(row.split) + ": text " + fmt_sim(row.text_image_sim) +
                                 ", img-c " + fmt_sim(row.image_image_sim_contrastive) +
                                 ", img-s " + fmt_sim(row.image_image_sim_selfsup));
}

void cmd_ablate(const TrainFlags& train_flags, const EvalFlags& eval_flags,
                const std::string& kinds_csv, CommandResult& result) {
    const std::vector<std::string> kinds = split_csv(kinds_csv);
    if (kinds.empty()) throw UsageError("--kinds must name at least one schedule");
    for (const std::string& kind : kinds) schedule_kind_from_name(kind);  // validate early

    const fs::path out = train_flags.out.empty()
                             ? artifact_cache_dir() / "ablate" / train_flags.subject
                             : fs::path(train_flags.out);

    ordered_json rows = ordered_json::array();
    result.summary.push_back("schedule      text_image  img_contrastive  img_selfsup");
    for (const std::string& kind : kinds) {
        TrainFlags per_kind = train_flags;
        per_kind.schedule = kind;
        per_kind.out = (out / kind).string();
        CommandResult train_result;
        cmd_train(per_kind, train_result);
        for (const std::string& artifact : train_result.artifacts_written)
            result.artifacts_written.push_back(artifact);

        EvalFlags eval = eval_flags;
        eval.manifest = train_flags.manifest;
        eval.checkpoint = (out / kind / "checkpoint_final.pzar").string();
        eval.out = (out / kind / "report.json").string();
        eval.backbone = train_flags.backbone;
        CommandResult eval_result;
        cmd_evaluate(eval, eval_result);
        for (const std::string& artifact : eval_result.artifacts_written)
            result.artifacts_written.push_back(artifact);

        const auto report = nlohmann::json::parse(std::ifstream(out / kind / "report.json"));
        const auto& agg = report.at("aggregate");
        const double text = agg.at("text_image_sim").get<double>();
        const double iic = agg.at("image_image_sim_contrastive").get<double>();
        const double iis = agg.at("image_image_sim_selfsup").get<double>();
        rows.push_back(ordered_json{{"schedule", kind},
                                    {"text_image_sim", text},
                                    {"image_image_sim_contrastive", iic},
                                    {"image_image_sim_selfsup", iis}});
        char line[128];
        std::snprintf(line, sizeof(line), "%-12s  %10.6f  %15.6f  %11.6f", kind.c_str(), text,
                      iic, iis);
        result.summary.push_back(line);
    }

    std::ofstream table(out / "ablation.json", std::ios::binary | std::ios::trunc);
    table << ordered_json{{"subject", train_flags.subject}, {"rows", rows}}.dump(2) << "\n";
    note_artifact(result, out / "ablation.json");
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e) != nullptr) return 2;
    if (dynamic_cast<const NonFiniteError*>(&e) != nullptr ||
        dynamic_cast<const NumericalError*>(&e) != nullptr)
        return 4;
    return 3;
}

}  // namespace

fs::path artifact_cache_dir() {
    if (const char* env = std::getenv("PERSONALIZE_CACHE_DIR"); env != nullptr && *env != '\0')
        return fs::path(env);
    return fs::path(".personalize_cache");
}

CommandResult run_command(const std::vector<std::string>& argv) {
    CommandResult result;
    CLI::App app{"desk-scale diffusion personalization toolkit"};
    app.require_subcommand(1);

    // validate-data
    std::string vd_manifest, vd_profile = "toy";
    uint64_t vd_seed = 0;
    CLI::App* validate = app.add_subcommand("validate-data", "check a dataset manifest");
    validate->add_option("--manifest", vd_manifest, "dataset manifest path")->required();
    validate->add_option("--profile", vd_profile, "full|toy");
    validate->add_option("--seed", vd_seed, "accepted for uniformity; unused");

    // synth-data
    SynthSpec synth_spec;
    std::string sd_out;
    CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic toy dataset");
    synth->add_option("--out", sd_out, "output directory")->required();
    synth->add_option("--subjects", synth_spec.n_subjects, "number of subjects");
    synth->add_option("--images", synth_spec.images_per_subject, "images per subject");
    synth->add_option("--size", synth_spec.image_size, "square image size");
    synth->add_option("--captions", synth_spec.captions_per_test_image, "captions per test image");
    synth->add_option("--train-fraction", synth_spec.train_fraction, "train split fraction");
    synth->add_option("--seed", synth_spec.seed, "generator seed");

    // train
    TrainFlags train_flags;
    CLI::App* train = app.add_subcommand("train", "optimize personalization tokens");
    train->add_option("--manifest", train_flags.manifest, "dataset manifest path")->required();
    train->add_option("--subject", train_flags.subject, "subject id")->required();
    train->add_option("--method", train_flags.method, "ti|ti+|neti|neti+");
    train->add_option("--steps", train_flags.steps, "training steps");
    train->add_option("--lr", train_flags.lr, "learning rate");
    train->add_option("--batch", train_flags.batch, "batch size");
    train->add_option("--weights", train_flags.weights, "ws,wb,wi,wcmax");
    train->add_option("--tau", train_flags.tau, "InfoNCE temperature");
    train->add_option("--schedule", train_flags.schedule, "contrastive weight schedule kind");
    train->add_option("--schedule-k", train_flags.schedule_k, "schedule shape parameter");
    train->add_option("--pool-mix", train_flags.pool_mix, "subject,background,joint proportions");
    train->add_option("--checkpoint-interval", train_flags.checkpoint_interval,
                      "steps between checkpoints (0 = final only)");
    train->add_option("--neti-hidden", train_flags.neti_hidden, "NeTI hidden width");
    train->add_option("--seed", train_flags.seed, "training seed");
    train->add_option("--out", train_flags.out, "output directory");
    add_backbone_flags(train, train_flags.backbone);

    // generate / evaluate / curve
    EvalFlags gen_flags;
    CLI::App* generate = app.add_subcommand("generate", "sample images from a checkpoint");
    add_eval_flags(generate, gen_flags, true);

    EvalFlags eval_flags;
    CLI::App* evaluate = app.add_subcommand("evaluate", "score generations with stub embedders");
    add_eval_flags(evaluate, eval_flags, true);

    EvalFlags curve_flags;
    std::string curve_checkpoints;
    CLI::App* curve = app.add_subcommand("curve", "train/test overfit curve over checkpoints");
    add_eval_flags(curve, curve_flags, false);
    curve->add_option("--checkpoints", curve_checkpoints, "comma-separated checkpoint archives")
        ->required();

    // ablate-schedule
    TrainFlags ablate_train;
    EvalFlags ablate_eval;
    std::string ablate_kinds = "zero,one,linear,cosine,sigmoid,exponential";
    CLI::App* ablate = app.add_subcommand("ablate-schedule",
                                          "train + evaluate per weighting schedule");
    ablate->add_option("--manifest", ablate_train.manifest, "dataset manifest path")->required();
    ablate->add_option("--subject", ablate_train.subject, "subject id")->required();
    ablate->add_option("--kinds", ablate_kinds, "comma-separated schedule kinds");
    ablate->add_option("--method", ablate_train.method, "ti|ti+|neti|neti+");
    ablate->add_option("--steps", ablate_train.steps, "training steps per kind");
    ablate->add_option("--lr", ablate_train.lr, "learning rate");
    ablate->add_option("--batch", ablate_train.batch, "batch size");
    ablate->add_option("--weights", ablate_train.weights, "ws,wb,wi,wcmax");
    ablate->add_option("--tau", ablate_train.tau, "InfoNCE temperature");
    ablate->add_option("--pool-mix", ablate_train.pool_mix, "pool proportions");
    ablate->add_option("--seed", ablate_train.seed, "training + plan seed");
    ablate->add_option("--out", ablate_train.out, "output directory");
    ablate->add_option("--split", ablate_eval.split, "evaluation split");
    ablate->add_option("--images-per-prompt", ablate_eval.images_per_prompt,
                       "samples per caption");
    ablate->add_option("--sample-steps", ablate_eval.sample_steps, "sampler steps");
    add_backbone_flags(ablate, ablate_train.backbone);

    std::vector<const char*> cargv;
    cargv.reserve(argv.size() + 1);
    cargv.push_back("personalize");
    for (const std::string& s : argv) cargv.push_back(s.c_str());

    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp&) {
        result.summary.push_back(app.help());
        return result;
    } catch (const CLI::ParseError& e) {
        result.exit_code = 2;
        result.summary.push_back(std::string("usage error: ") + e.what());
        return result;
    }

    try {
        if (*validate) {
            const DatasetManifest manifest = load_manifest(vd_manifest);
            const ValidationReport report =
                validate_manifest(manifest, parse_profile(vd_profile));
            for (const std::string& v : report.violations)
                result.summary.push_back("violation: " + v);
            if (!report.valid()) {
                result.exit_code = 3;
                result.summary.push_back(std::to_string(report.violations.size()) +
                                         " violation(s)");
            } else {
                result.summary.push_back("manifest is valid (" + vd_profile + " profile)");
            }
        } else if (*synth) {
            synth_toy_dataset(synth_spec, sd_out);
            note_artifact(result, fs::path(sd_out) / "manifest.json");
            result.summary.push_back("wrote synthetic dataset -> " + sd_out);
        } else if (*train) {
            cmd_train(train_flags, result);
        } else if (*generate) {
            cmd_generate(gen_flags, result);
        } else if (*evaluate) {
            cmd_evaluate(eval_flags, result);
        } else if (*curve) {
            cmd_curve(curve_flags, curve_checkpoints, result);
        } else if (*ablate) {
            ablate_eval.seed = ablate_train.seed;
            cmd_ablate(ablate_train, ablate_eval, ablate_kinds, result);
        }
    } catch (const std::exception& e) {
        result.exit_code = exit_code_for(e);
        result.summary.push_back(std::string("error: ") + e.what());
    }
    return result;
}

int cli_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    const CommandResult result = run_command(args);
    for (const std::string& line : result.summary)
        (result.exit_code == 0 ? std::cout : std::cerr) << line << "\n";
    return result.exit_code;
}

}  // namespace personalize
