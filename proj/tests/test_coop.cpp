#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "vlmadapt/coop.hpp"
#include "vlmadapt/pretrain.hpp"
#include "vlmadapt/rng.hpp"
#include "vlmadapt/synth.hpp"

using namespace vlmadapt;

namespace {

SynthTaskSpec two_class_spec() {
    SynthTaskSpec spec = SynthTaskSpec::default_spec();
    spec.organs = {{"coral", {"solid", "striped"}}, {"basalt", {"smooth"}}};
    spec.noise = 0.15;
    spec.seed = 4;
    return spec;
}

// a base model pretrained on matched pairs, the realistic CoOp input;
// built once, the suite reuses it
const DualEncoderModel& pretrained_model(const SynthTaskSpec& spec) {
    static const DualEncoderModel cached = [&spec] {
        EncoderConfig cfg;
        cfg.d_tok = 12;
        cfg.hidden = 16;
        cfg.d_emb = 12;
        cfg.max_len = 12;
        cfg.init_seed = 3;
        DualEncoderModel model = DualEncoderModel::init(cfg, Vocabulary::build(spec.word_list()));
        GeneratedCorpus gen = generate_corpus(spec, "coral", 240, {0.5, 0.2, 0.2, 0.1}, 6);
        std::vector<std::string> ids;
        for (const CaptionRecord& rec : gen.corpus.records()) ids.push_back(rec.id);
        TrainConfig tc;
        tc.batch_size = 16;
        tc.epochs = 10;
        tc.lr = 2e-3;
        tc.seed = 0;
        return train_adapt(model, make_training_pairs(ids, gen.corpus, model), tc).model;
    }();
    return cached;
}

}  // namespace

TEST_CASE("init_context shapes and determinism") {
    const PromptContext unified = init_context(ContextMode::unified, 4, 3, 11, 16);
    REQUIRE(unified.vectors.size() == 1);
    CHECK(unified.vectors[0].shape == std::vector<std::size_t>{4, 16});
    CHECK(unified.parameter_count() == 64);

    const PromptContext csc = init_context(ContextMode::csc, 16, 4, 11, 16);
    REQUIRE(csc.vectors.size() == 4);
    CHECK(csc.vectors[2].shape == std::vector<std::size_t>{16, 16});

    // unified holds exactly 1/num_classes of the csc parameters at equal M
    const PromptContext u16 = init_context(ContextMode::unified, 16, 4, 11, 16);
    CHECK(u16.parameter_count() * 4 == csc.parameter_count());

    const PromptContext again = init_context(ContextMode::unified, 4, 3, 11, 16);
    CHECK(again.vectors[0].values == unified.vectors[0].values);
    const PromptContext other = init_context(ContextMode::unified, 4, 3, 12, 16);
    CHECK(other.vectors[0].values != unified.vectors[0].values);

    CHECK_THROWS_AS(init_context(ContextMode::unified, 0, 3, 1, 16), std::invalid_argument);
}

TEST_CASE("coop logits: identical classnames give identical columns") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    PromptContext ctx = init_context(ContextMode::unified, 4, 2, 0, model.config.d_tok);
    for (double& v : ctx.vectors[0].values) v = 0.0;

    const TaskDataset data = generate_task_dataset(spec, "coral", 3, "test", 9);
    std::vector<Image> images;
    for (const LabeledImage& item : data.items) images.push_back(item.image);

    const Tensor logits = coop_logits(model, ctx, images, {"solid", "solid"}, 100.0);
    REQUIRE(logits.rows() == images.size());
    REQUIRE(logits.cols() == 2);
    for (std::size_t i = 0; i < logits.rows(); ++i)
        CHECK(logits.at(i, 0) == logits.at(i, 1));
}

TEST_CASE("coop logits are bounded by the scale") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const PromptContext ctx = init_context(ContextMode::csc, 4, 2, 1, model.config.d_tok);
    const TaskDataset data = generate_task_dataset(spec, "coral", 4, "test", 10);
    std::vector<Image> images;
    for (const LabeledImage& item : data.items) images.push_back(item.image);

    const Tensor logits = coop_logits(model, ctx, images, {"solid", "striped"}, 100.0);
    for (double v : logits.values) {
        CHECK(v <= 100.0);
        CHECK(v >= -100.0);
    }
    // argmax unchanged by the positive scale
    const Tensor rescaled = coop_logits(model, ctx, images, {"solid", "striped"}, 7.0);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const std::size_t a = logits.at(i, 0) > logits.at(i, 1) ? 0 : 1;
        const std::size_t b = rescaled.at(i, 0) > rescaled.at(i, 1) ? 0 : 1;
        CHECK(a == b);
    }
}

TEST_CASE("cross-entropy gradient w.r.t. context matches finite differences") {
    // a fresh random model keeps the cross-entropy away from saturation,
    // where central differences on a near-zero loss lose all precision
    const SynthTaskSpec spec = two_class_spec();
    EncoderConfig cfg;
    cfg.d_tok = 12;
    cfg.hidden = 16;
    cfg.d_emb = 12;
    cfg.max_len = 12;
    cfg.init_seed = 77;
    const DualEncoderModel model = DualEncoderModel::init(cfg, Vocabulary::build(spec.word_list()));
    const TaskDataset data = generate_task_dataset(spec, "coral", 2, "train", 12);

    Tensor embeddings = Tensor::zeros({data.items.size(), model.config.d_emb});
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < data.items.size(); ++i) {
        const Tensor e = encode_image(model, data.items[i].image);
        std::copy(e.values.begin(), e.values.end(),
                  embeddings.values.begin() +
                      static_cast<std::ptrdiff_t>(i * model.config.d_emb));
        labels.push_back(data.items[i].label);
    }

    for (ContextMode mode : {ContextMode::unified, ContextMode::csc}) {
        const PromptContext ctx = init_context(mode, 4, 2, 3, model.config.d_tok);
        CoopGraph g = build_coop_graph(model, ctx, embeddings, data.classes, labels, 5.0, true);
        CHECK(g.tape.finite_diff_max_rel_error(g.loss, g.context_leaves, 1e-5) < 1e-4);
    }
}

TEST_CASE("train_coop leaves every encoder parameter bit-identical") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const std::uint64_t hash_before = model.param_hash();
    const TaskDataset train = generate_task_dataset(spec, "coral", 8, "train", 21);
    const FewShotSet few = sample_few_shot(train, 4, 0);

    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 5;
    tc.lr = 1e-2;
    tc.seed = 0;
    const PromptContext ctx = init_context(ContextMode::unified, 4, 2, 0, model.config.d_tok);
    const CoopTrainResult result = train_coop(model, ctx, few, tc);

    CHECK(model.param_hash() == hash_before);
    CHECK(result.context.vectors[0].values != ctx.vectors[0].values);
    REQUIRE(result.epoch_loss.size() == 5);
}

TEST_CASE("zero epochs returns the context unchanged") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const TaskDataset train = generate_task_dataset(spec, "coral", 4, "train", 22);
    const FewShotSet few = sample_few_shot(train, 2, 1);
    TrainConfig tc;
    tc.epochs = 0;
    const PromptContext ctx = init_context(ContextMode::csc, 4, 2, 5, model.config.d_tok);
    const CoopTrainResult result = train_coop(model, ctx, few, tc);
    REQUIRE(result.context.vectors.size() == ctx.vectors.size());
    for (std::size_t i = 0; i < ctx.vectors.size(); ++i)
        CHECK(result.context.vectors[i].values == ctx.vectors[i].values);
}

TEST_CASE("coop reaches full training accuracy on a separable two-class set") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const TaskDataset train = generate_task_dataset(spec, "coral", 8, "train", 23);
    const FewShotSet few = sample_few_shot(train, 4, 0);

    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 50;
    tc.lr = 5e-3;
    tc.seed = 0;
    const PromptContext ctx = init_context(ContextMode::unified, 4, 2, 0, model.config.d_tok);
    const CoopTrainResult trained = train_coop(model, ctx, few, tc);

    std::vector<Image> images;
    std::vector<std::size_t> labels;
    for (const LabeledImage& item : few.items) {
        images.push_back(item.image);
        labels.push_back(item.label);
    }
    const std::vector<std::size_t> preds =
        coop_predict(model, trained.context, images, few.classes);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += preds[i] == labels[i];
    CHECK(hits == labels.size());
}

TEST_CASE("train_coop is deterministic per seed") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const TaskDataset train = generate_task_dataset(spec, "coral", 6, "train", 24);
    const FewShotSet few = sample_few_shot(train, 3, 2);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.epochs = 3;
    tc.seed = 9;
    const PromptContext ctx = init_context(ContextMode::unified, 4, 2, 1, model.config.d_tok);
    const CoopTrainResult a = train_coop(model, ctx, few, tc);
    const CoopTrainResult b = train_coop(model, ctx, few, tc);
    CHECK(a.context.vectors[0].values == b.context.vectors[0].values);
    CHECK(a.epoch_loss == b.epoch_loss);
}

TEST_CASE("sample_few_shot contracts") {
    const SynthTaskSpec spec = two_class_spec();
    const TaskDataset data = generate_task_dataset(spec, "coral", 10, "train", 30);

    const FewShotSet one = sample_few_shot(data, 1, 0);
    CHECK(one.items.size() == 2);  // shots x classes

    const FewShotSet a = sample_few_shot(data, 3, 5);
    const FewShotSet b = sample_few_shot(data, 3, 5);
    REQUIRE(a.items.size() == b.items.size());
    for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i].id == b.items[i].id);
    for (std::size_t cls = 0; cls < 2; ++cls) {
        std::size_t count = 0;
        for (const LabeledImage& item : a.items) count += item.label == cls;
        CHECK(count == 3);
    }
    // drawn without replacement
    std::set<std::string> unique_ids;
    for (const LabeledImage& item : a.items) unique_ids.insert(item.id);
    CHECK(unique_ids.size() == a.items.size());

    // different seeds give different sets with overwhelming probability
    std::set<std::string> signatures;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::string sig;
        for (const LabeledImage& item : sample_few_shot(data, 3, seed).items)
            sig += item.id + "|";
        signatures.insert(sig);
    }
    CHECK(signatures.size() >= 8);

    CHECK_THROWS_AS(sample_few_shot(data, 11, 0), std::invalid_argument);
}

TEST_CASE("unknown classname words are reported for warnings") {
    const SynthTaskSpec spec = two_class_spec();
    const DualEncoderModel& model = pretrained_model(spec);
    const std::vector<std::string> unknown =
        unknown_classname_words(model, {"solid", "zebrafish texture"});
    CHECK(unknown == std::vector<std::string>{"zebrafish"});
}

TEST_CASE("context save/load round trip") {
    namespace fs = std::filesystem;
    const fs::path p = fs::temp_directory_path() / "vlmadapt_ctx.json";
    const PromptContext ctx = init_context(ContextMode::csc, 4, 3, 17, 8);
    save_context(p.string(), ctx);
    const PromptContext back = load_context(p.string());
    CHECK(back.mode == ContextMode::csc);
    CHECK(back.length == 4);
    CHECK(back.seed == 17);
    REQUIRE(back.vectors.size() == 3);
    CHECK(back.vectors[1].values == ctx.vectors[1].values);
}
