#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vlmadapt/experiment.hpp"

using namespace vlmadapt;
namespace fs = std::filesystem;

namespace {

fs::path temp_root() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "vlmadapt_experiment_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

// small enough to run in a couple of seconds
ExperimentConfig tiny_config(const std::string& out_name) {
    ExperimentConfig cfg = ExperimentConfig::defaults();
    cfg.out_dir = (temp_root() / out_name).string();
    cfg.synth.corpus_size = 120;
    cfg.synth.train_per_class = 6;
    cfg.synth.test_per_class = 6;
    cfg.model.d_tok = 10;
    cfg.model.hidden = 12;
    cfg.model.d_emb = 10;
    cfg.model.image_h = 6;
    cfg.model.image_w = 6;
    cfg.model.max_len = 12;
    cfg.pretrain.epochs = 2;
    cfg.adapt.shots = {1};
    cfg.adapt.repetition_seeds = {0};
    cfg.adapt.train.epochs = 2;
    cfg.adapt.tune.enabled = false;
    cfg.coop.enabled = false;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("minimal experiment produces baseline, dapt and tapt rows") {
    const ExperimentConfig cfg = tiny_config("smoke");
    const RunReport report = run_experiment(cfg);
    REQUIRE(report.zeroshot_rows.size() == 3);
    CHECK(report.zeroshot_rows[0].method == "baseline");
    CHECK(report.zeroshot_rows[1].method == "dapt");
    CHECK(report.zeroshot_rows[2].method == "tapt");
    CHECK(report.coop_rows.empty());

    const fs::path out = cfg.out_dir;
    for (const char* f : {"corpus.jsonl", "keywords.json", "prompt_bank.json", "task_train.json",
                          "task_test.json", "base_model.json", "pretrain_loss.csv",
                          "ranked_task.json", "report_zeroshot.csv", "manifest.json"})
        CHECK(fs::exists(out / f));
    CHECK(fs::exists(out / "adapt" / "tapt_s1_r0.json"));
}

TEST_CASE("rerunning an identical config skips stages and reproduces the report") {
    const ExperimentConfig cfg = tiny_config("idempotent");
    run_experiment(cfg);
    const fs::path csv = fs::path(cfg.out_dir) / "report_zeroshot.csv";
    const std::string first = slurp(csv);
    const auto stamp = fs::last_write_time(fs::path(cfg.out_dir) / "base_model.json");

    const RunReport again = run_experiment(cfg);
    CHECK(slurp(csv) == first);
    CHECK(fs::last_write_time(fs::path(cfg.out_dir) / "base_model.json") == stamp);
    CHECK(again.zeroshot_rows.size() == 3);

    // the same experiment in a fresh directory yields byte-identical reports
    ExperimentConfig other = cfg;
    other.out_dir = (temp_root() / "idempotent_copy").string();
    run_experiment(other);
    CHECK(slurp(fs::path(other.out_dir) / "report_zeroshot.csv") == first);
}

TEST_CASE("truncation surfaces when shots exceed the retrieval") {
    ExperimentConfig cfg = tiny_config("truncated");
    cfg.adapt.shots = {4000};
    const RunReport report = run_experiment(cfg);
    REQUIRE(report.truncated.count("tapt_s4000_r0") == 1);
    CHECK(report.truncated.at("tapt_s4000_r0"));
    // the run still trained on everything that was available
    CHECK(fs::exists(fs::path(cfg.out_dir) / "adapt" / "tapt_s4000_r0.json"));
}

TEST_CASE("lora update mode runs through the pipeline") {
    ExperimentConfig cfg = tiny_config("lora_mode");
    cfg.adapt.train.update_mode = UpdateMode::lora;
    cfg.adapt.lora.rank = 2;
    const RunReport report = run_experiment(cfg);
    REQUIRE(report.zeroshot_rows.size() == 3);

    // the stored checkpoint carries the overlay and the frozen base weights
    const DualEncoderModel base =
        load_checkpoint((fs::path(cfg.out_dir) / "base_model.json").string());
    const DualEncoderModel adapted =
        load_checkpoint((fs::path(cfg.out_dir) / "adapt" / "tapt_s1_r0.json").string());
    REQUIRE(adapted.lora_target.has_value());
    CHECK(adapted.text_proj.weight.values == base.text_proj.weight.values);
    CHECK(adapted.text_proj.lora->b.values != std::vector<double>(
                                                  adapted.text_proj.lora->b.size(), 0.0));
}

TEST_CASE("config hash ignores out_dir but tracks experiment fields") {
    ExperimentConfig a = tiny_config("hash_a");
    ExperimentConfig b = a;
    b.out_dir = "elsewhere";
    CHECK(a.config_hash() == b.config_hash());
    b.adapt.shots = {2};
    CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("config json file round trip preserves the hash") {
    const ExperimentConfig cfg = tiny_config("roundtrip");
    const fs::path p = temp_root() / "config.json";
    {
        std::ofstream out(p);
        out << cfg.to_canonical_json();
    }
    ExperimentConfig back = ExperimentConfig::from_json_file(p.string());
    back.out_dir = cfg.out_dir;
    CHECK(back.config_hash() == cfg.config_hash());
}

TEST_CASE("config validation rejects broken setups") {
    ExperimentConfig cfg = tiny_config("invalid");
    cfg.adapt.shots = {4, 4};
    CHECK_THROWS_AS(run_experiment(cfg), std::invalid_argument);

    cfg = tiny_config("invalid2");
    cfg.synth.enabled = false;  // nothing generates the corpus
    cfg.paths.corpus = (temp_root() / "does_not_exist.jsonl").string();
    CHECK_THROWS_AS(run_experiment(cfg), std::invalid_argument);
}

TEST_CASE("stage errors carry the stage name") {
    ExperimentConfig cfg = tiny_config("failing");
    cfg.synth.enabled = false;
    // the referenced inputs exist but the corpus is empty, so the first
    // stage that consumes it aborts
    for (std::string* path : {&cfg.paths.corpus, &cfg.paths.keywords, &cfg.paths.prompt_bank,
                              &cfg.paths.task_train, &cfg.paths.task_test}) {
        *path = (temp_root() / ("failing_input_" + std::to_string(
                                                       reinterpret_cast<std::uintptr_t>(path)) +
                                ".json"))
                    .string();
        std::ofstream touch(*path);
    }
    try {
        run_experiment(cfg);
        FAIL("expected a stage error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("[stage pretrain]") != std::string::npos);
    }
}

TEST_CASE("config rejects unknown metrics and stages") {
    const fs::path p = temp_root() / "bad_metric.json";
    {
        std::ofstream out(p);
        out << "{\"metric\": \"f1\"}";
    }
    CHECK_THROWS_AS(ExperimentConfig::from_json_file(p.string()), std::invalid_argument);
    {
        std::ofstream out(p);
        out << "{\"stages\": [\"pretrain\", \"deploy\"]}";
    }
    CHECK_THROWS_AS(ExperimentConfig::from_json_file(p.string()), std::invalid_argument);
}
