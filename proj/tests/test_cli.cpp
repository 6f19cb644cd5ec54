#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "personalize/cli.hpp"
#include "personalize/dataset.hpp"
#include "personalize/errors.hpp"
#include "personalize/trainer.hpp"

using namespace personalize;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool summary_mentions(const CommandResult& r, const std::string& needle) {
    for (const std::string& line : r.summary)
        if (line.find(needle) != std::string::npos) return true;
    return false;
}

struct Fixture {
    fs::path dir;

    explicit Fixture(const std::string& name) {
        dir = fs::path("cli_fixture_" + name);
        fs::remove_all(dir);
        SynthSpec spec;
        spec.n_subjects = 2;
        spec.images_per_subject = 6;
        spec.image_size = 8;
        spec.seed = 77;
        synth_toy_dataset(spec, dir);
    }
    ~Fixture() { fs::remove_all(dir); }

    std::string manifest() const { return (dir / "manifest.json").string(); }
};

// Small-run flags shared by the training-based cases.
std::vector<std::string> tiny_train_args(const Fixture& fx, const std::string& out) {
    return {"train",          "--manifest", fx.manifest(),
            "--subject",      "subject00",  "--steps",
            "4",              "--batch",    "2",
            "--lr",           "0.01",       "--backbone-width",
            "8",              "--backbone-layers", "2",
            "--backbone-timesteps", "20",   "--seed",
            "3",              "--out",      out};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_command({}).exit_code == 2);
    CHECK(run_command({"no-such-command"}).exit_code == 2);
    CHECK(run_command({"train"}).exit_code == 2);  // missing required flags
    CHECK(run_command({"validate-data"}).exit_code == 2);

    Fixture fx("usage");
    auto args = tiny_train_args(fx, "cli_usage_out");
    args.push_back("--method");
    args.push_back("dreambooth");
    const CommandResult bad_method = run_command(args);
    CHECK(bad_method.exit_code == 2);
    CHECK(summary_mentions(bad_method, "--method"));

    auto bad_weights = tiny_train_args(fx, "cli_usage_out");
    bad_weights.push_back("--weights");
    bad_weights.push_back("1,2");
    CHECK(run_command(bad_weights).exit_code == 2);

    const CommandResult help = run_command({"--help"});
    CHECK(help.exit_code == 0);
    CHECK(summary_mentions(help, "train"));
    fs::remove_all("cli_usage_out");
}

TEST_CASE("synth-data then validate-data round-trips cleanly") {
    const fs::path dir = "cli_synth_out";
    fs::remove_all(dir);
    const CommandResult synth = run_command({"synth-data", "--out", dir.string(), "--subjects",
                                             "2", "--images", "6", "--size", "8", "--seed", "9"});
    CHECK(synth.exit_code == 0);
    REQUIRE_FALSE(synth.artifacts_written.empty());
    CHECK(fs::exists(dir / "manifest.json"));

    const CommandResult valid = run_command(
        {"validate-data", "--manifest", (dir / "manifest.json").string(), "--profile", "toy"});
    CHECK(valid.exit_code == 0);
    CHECK(summary_mentions(valid, "valid"));

    // Data errors exit 3: missing manifest, then a manifest violating the profile.
    CHECK(run_command({"validate-data", "--manifest", "nope/manifest.json"}).exit_code == 3);

    DatasetManifest broken = load_manifest(dir / "manifest.json");
    broken.subjects[0].test_images[0].captions.clear();
    save_manifest(broken, dir / "broken.json");
    const CommandResult invalid = run_command(
        {"validate-data", "--manifest", (dir / "broken.json").string(), "--profile", "toy"});
    CHECK(invalid.exit_code == 3);
    CHECK(summary_mentions(invalid, "violation"));
    fs::remove_all(dir);
}

TEST_CASE("train is re-runnable with byte-identical artifacts") {
    Fixture fx("train");
    const fs::path out1 = "cli_train_1", out2 = "cli_train_2";
    fs::remove_all(out1);
    fs::remove_all(out2);

    const CommandResult r1 = run_command(tiny_train_args(fx, out1.string()));
    REQUIRE(r1.exit_code == 0);
    CHECK(fs::exists(out1 / "trace.jsonl"));
    CHECK(fs::exists(out1 / "checkpoint_final.pzar"));
    CHECK(!r1.artifacts_written.empty());

    const CommandResult r2 = run_command(tiny_train_args(fx, out2.string()));
    REQUIRE(r2.exit_code == 0);
    CHECK(read_bytes(out1 / "trace.jsonl") == read_bytes(out2 / "trace.jsonl"));
    CHECK(read_bytes(out1 / "checkpoint_final.pzar") ==
          read_bytes(out2 / "checkpoint_final.pzar"));

    // Unknown subject is a data error.
    auto bad = tiny_train_args(fx, "cli_train_3");
    bad[4] = "subject99";
    CHECK(run_command(bad).exit_code == 3);

    fs::remove_all(out1);
    fs::remove_all(out2);
    fs::remove_all("cli_train_3");
}

TEST_CASE("plain ti reduces to ti+ with the documented flags") {
    Fixture fx("reduce");
    const fs::path out_ti = "cli_reduce_ti", out_plus = "cli_reduce_plus";
    fs::remove_all(out_ti);
    fs::remove_all(out_plus);

    auto ti = tiny_train_args(fx, out_ti.string());
    ti.push_back("--method");
    ti.push_back("ti");
    const CommandResult r_ti = run_command(ti);
    REQUIRE(r_ti.exit_code == 0);
    CHECK(summary_mentions(r_ti, "reduces"));

    auto plus = tiny_train_args(fx, out_plus.string());
    for (const char* flag : {"--method", "ti+", "--pool-mix", "1,0,0", "--weights", "1,0,1,0"})
        plus.push_back(flag);
    REQUIRE(run_command(plus).exit_code == 0);

    CHECK(read_bytes(out_ti / "checkpoint_final.pzar") ==
          read_bytes(out_plus / "checkpoint_final.pzar"));
    CHECK(read_bytes(out_ti / "trace.jsonl") == read_bytes(out_plus / "trace.jsonl"));
    fs::remove_all(out_ti);
    fs::remove_all(out_plus);
}

TEST_CASE("generate, evaluate, and curve produce deterministic artifacts") {
    Fixture fx("pipeline");
    const fs::path train_out = "cli_pipe_train";
    fs::remove_all(train_out);
    auto train = tiny_train_args(fx, train_out.string());
    train.push_back("--checkpoint-interval");
    train.push_back("2");
    REQUIRE(run_command(train).exit_code == 0);
    const std::string ckpt = (train_out / "checkpoint_final.pzar").string();

    const std::vector<std::string> backbone = {"--backbone-width", "8", "--backbone-layers",
                                               "2",  "--backbone-timesteps", "20"};

    // generate
    const fs::path gen1 = "cli_pipe_gen1", gen2 = "cli_pipe_gen2";
    fs::remove_all(gen1);
    fs::remove_all(gen2);
    auto gen_args = [&](const fs::path& out) {
        std::vector<std::string> a = {"generate", "--manifest", fx.manifest(), "--checkpoint",
                                      ckpt,       "--split",    "test",        "--steps",
                                      "2",        "--seed",     "4",           "--out",
                                      out.string()};
        a.insert(a.end(), backbone.begin(), backbone.end());
        return a;
    };
    const CommandResult g1 = run_command(gen_args(gen1));
    REQUIRE(g1.exit_code == 0);
    CHECK(fs::exists(gen1 / "index.json"));
    CHECK(fs::exists(gen1 / "gen_000000.ppm"));
    const auto index = nlohmann::json::parse(read_bytes(gen1 / "index.json"));
    CHECK(index.size() == 12);  // 4 test images x 3 captions x 1 sample
    REQUIRE(run_command(gen_args(gen2)).exit_code == 0);
    CHECK(read_bytes(gen1 / "gen_000003.ppm") == read_bytes(gen2 / "gen_000003.ppm"));
    CHECK(read_bytes(gen1 / "index.json") == read_bytes(gen2 / "index.json"));

    // evaluate
    const fs::path rep1 = "cli_pipe_rep1.json", rep2 = "cli_pipe_rep2.json";
    auto eval_args = [&](const fs::path& out) {
        std::vector<std::string> a = {"evaluate", "--manifest", fx.manifest(), "--checkpoint",
                                      ckpt,       "--split",    "test",        "--steps",
                                      "2",        "--seed",     "4",           "--out",
                                      out.string()};
        a.insert(a.end(), backbone.begin(), backbone.end());
        return a;
    };
    const CommandResult e1 = run_command(eval_args(rep1));
    REQUIRE(e1.exit_code == 0);
    CHECK(summary_mentions(e1, "text_image_sim"));
    REQUIRE(run_command(eval_args(rep2)).exit_code == 0);
    CHECK(read_bytes(rep1) == read_bytes(rep2));
    const auto report = nlohmann::json::parse(read_bytes(rep1));
    CHECK(report.at("count").get<int>() == 12);

    // curve over the two interval checkpoints
    const fs::path curve_out = "cli_pipe_curve";
    fs::remove_all(curve_out);
    std::vector<std::string> curve_args = {
        "curve", "--manifest", fx.manifest(), "--checkpoints",
        (train_out / "checkpoint_step000002.pzar").string() + "," +
            (train_out / "checkpoint_step000004.pzar").string(),
        "--steps", "2", "--seed", "4", "--out", curve_out.string()};
    curve_args.insert(curve_args.end(), backbone.begin(), backbone.end());
    const CommandResult c = run_command(curve_args);
    REQUIRE(c.exit_code == 0);
    CHECK(fs::exists(curve_out / "curve.json"));
    CHECK(fs::exists(curve_out / "curve.svg"));
    const auto curve_json = nlohmann::json::parse(read_bytes(curve_out / "curve.json"));
    CHECK(curve_json.at("rows").size() == 4);

    fs::remove_all(train_out);
    fs::remove_all(gen1);
    fs::remove_all(gen2);
    fs::remove(rep1);
    fs::remove(rep2);
    fs::remove_all(curve_out);
}

TEST_CASE("ablate-schedule emits one table row per kind") {
    Fixture fx("ablate");
    const fs::path out = "cli_ablate_out";
    fs::remove_all(out);
    const CommandResult r = run_command(
        {"ablate-schedule", "--manifest", fx.manifest(), "--subject", "subject00", "--kinds",
         "zero,cosine", "--steps", "2", "--batch", "2", "--lr", "0.01", "--sample-steps", "2",
         "--seed", "5", "--out", out.string(), "--backbone-width", "8", "--backbone-layers", "2",
         "--backbone-timesteps", "20"});
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(out / "ablation.json"));
    CHECK(fs::exists(out / "zero" / "report.json"));
    CHECK(fs::exists(out / "cosine" / "checkpoint_final.pzar"));
    const auto table = nlohmann::json::parse(read_bytes(out / "ablation.json"));
    REQUIRE(table.at("rows").size() == 2);
    for (const auto& row : table.at("rows")) {
        CHECK(row.contains("text_image_sim"));
        CHECK(row.contains("image_image_sim_contrastive"));
        CHECK(row.contains("image_image_sim_selfsup"));
    }
    CHECK(summary_mentions(r, "cosine"));
    fs::remove_all(out);
}

TEST_CASE("PERSONALIZE_CACHE_DIR redirects default outputs") {
    Fixture fx("cache");
    const fs::path cache = "cli_cache_dir";
    fs::remove_all(cache);
    setenv("PERSONALIZE_CACHE_DIR", cache.string().c_str(), 1);
    CHECK(artifact_cache_dir() == cache);

    auto args = tiny_train_args(fx, "");
    args.pop_back();  // drop the empty --out value
    args.pop_back();  // and the flag itself
    const CommandResult r = run_command(args);
    unsetenv("PERSONALIZE_CACHE_DIR");
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(cache / "train"));
    bool under_cache = false;
    for (const std::string& artifact : r.artifacts_written)
        if (artifact.rfind(cache.string(), 0) == 0) under_cache = true;
    CHECK(under_cache);
    fs::remove_all(cache);
}

TEST_CASE("numerical failures exit with code 4") {
    Fixture fx("nan");
    const fs::path train_out = "cli_nan_train";
    fs::remove_all(train_out);
    REQUIRE(run_command(tiny_train_args(fx, train_out.string())).exit_code == 0);

    // Corrupt the learned token, then ask the sampler to use it.
    Archive ckpt = load_checkpoint(train_out / "checkpoint_final.pzar");
    Tensor bad = ckpt.get("v_star");
    bad.data[0] = std::numeric_limits<double>::quiet_NaN();
    ckpt.put("v_star", bad);
    const fs::path bad_path = train_out / "checkpoint_nan.pzar";
    ckpt.save(bad_path);

    const CommandResult r = run_command({"generate", "--manifest", fx.manifest(), "--checkpoint",
                                         bad_path.string(), "--steps", "2", "--out",
                                         "cli_nan_gen", "--backbone-width", "8",
                                         "--backbone-layers", "2", "--backbone-timesteps", "20"});
    CHECK(r.exit_code == 4);
    CHECK(summary_mentions(r, "error"));
    fs::remove_all(train_out);
    fs::remove_all("cli_nan_gen");
}
