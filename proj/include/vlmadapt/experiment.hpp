#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vlmadapt/coop.hpp"
#include "vlmadapt/corpus.hpp"
#include "vlmadapt/encoder.hpp"
#include "vlmadapt/pretrain.hpp"
#include "vlmadapt/synth.hpp"
#include "vlmadapt/zeroshot.hpp"

namespace vlmadapt {

struct SynthSection {
    bool enabled = true;
    std::string task_organ = "coral";
    std::size_t corpus_size = 2000;
    RelevanceMix mix;
    double noise = 0.35;
    std::size_t train_per_class = 25;
    std::size_t test_per_class = 25;
    std::uint64_t seed = 0;
    std::vector<SynthOrgan> organs;  // empty -> default spec organs
};

struct PathsSection {
    std::string corpus, keywords, prompt_bank, task_train, task_test, wordlist;
};

struct LoraSection {
    LoraTarget target = LoraTarget::projections_only;
    std::size_t rank = 2;
    double alpha = 2.0;
    std::uint64_t seed = 0;
};

struct TuneSection {
    bool enabled = true;
    std::vector<double> lr_grid = {1e-4, 3e-4, 1e-3};
    std::vector<double> wd_grid = {1e-4, 1e-2};
    std::size_t probe_epochs = 5;
};

struct BalanceSection {
    bool enabled = false;
    std::size_t target_per_class = 0;  // 0 -> shots
    BalancePolicy policy = BalancePolicy::truncate;
};

struct AdaptSection {
    std::vector<std::size_t> shots = {1, 4, 16, 64};
    std::vector<std::uint64_t> repetition_seeds = {0, 1, 2, 3, 4};
    TrainConfig train;  // seed field replaced per repetition
    LoraSection lora;
    TuneSection tune;
    BalanceSection balance;
};

struct ContextChoice {
    ContextMode mode = ContextMode::unified;
    std::size_t length = 4;
};

struct CoopSection {
    bool enabled = true;
    std::vector<std::size_t> shots = {1, 2, 4, 8};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<ContextChoice> contexts = {{ContextMode::unified, 4}};
    TrainConfig train;
    double logit_scale = 100.0;
    std::size_t adapted_repetition = 0;  // which TAPT repetition CoOp builds on
};

struct ExperimentConfig {
    std::string out_dir = "run_out";
    std::uint64_t seed = 0;
    std::string metric = "balanced_accuracy";  // or quadratic_kappa
    std::vector<std::string> stages;            // empty -> all stages
    SynthSection synth;
    PathsSection paths;
    EncoderConfig model;
    TrainConfig pretrain;
    AdaptSection adapt;
    CoopSection coop;

    static ExperimentConfig defaults();
    static ExperimentConfig from_json_file(const std::string& path);
    std::string to_canonical_json() const;
    std::uint64_t config_hash() const;
    SynthTaskSpec synth_spec() const;
    bool stage_enabled(const std::string& name) const;
    // shots strictly increasing; external inputs exist when synth is off
    void validate() const;
};

struct ReportRow {
    std::string method;
    std::size_t shots = 0;
    std::uint64_t repetition = 0;
    double metric = 0.0;
};

struct RunReport {
    std::uint64_t config_hash = 0;
    std::vector<ReportRow> zeroshot_rows;
    std::vector<ReportRow> coop_rows;
    std::map<std::string, bool> truncated;       // per adapt run tag
    std::map<std::string, std::string> checkpoints;  // run tag -> param hash
};

// Executes the stage pipeline in order, skipping stages whose inputs and
// config are unchanged (force reruns everything). stage_filter, when
// non-empty, restricts execution to that single stage.
RunReport run_experiment(const ExperimentConfig& config, bool force = false,
                         const std::string& stage_filter = "");

const std::vector<std::string>& all_stage_names();

// metric dispatch used by the evaluation stages
double evaluate_metric(const std::string& metric, const std::vector<std::size_t>& truth,
                       const std::vector<std::size_t>& preds, std::size_t num_classes);

}  // namespace vlmadapt
