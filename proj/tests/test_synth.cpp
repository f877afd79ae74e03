#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "vlmadapt/pretrain.hpp"
#include "vlmadapt/rng.hpp"
#include "vlmadapt/synth.hpp"
#include "vlmadapt/tensor.hpp"

using namespace vlmadapt;

namespace {

std::set<std::string> member_ids(const RetrievalSet& s) {
    std::set<std::string> out;
    for (const auto& m : s.members) out.insert(m.id);
    return out;
}

}  // namespace

TEST_CASE("default spec validates and lists a closed word list") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    spec.validate();
    const std::vector<std::string> words = spec.word_list();
    CHECK(words.size() == spec.filler_words.size() + 2 + 4 + 2);

    SynthTaskSpec clash = spec;
    clash.filler_words.push_back("coral");  // keyword leaking into fillers
    CHECK_THROWS_AS(clash.validate(), std::invalid_argument);

    SynthTaskSpec overfull = spec;
    overfull.organs.push_back({"slate", {"aa", "bb", "cc"}});  // 9 signatures, 3 channels
    CHECK_THROWS_AS(overfull.validate(), std::invalid_argument);
}

TEST_CASE("forced stratum counts: 100 records at (0.25, 0.25, 0.5, 0)") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    const GeneratedCorpus gen = generate_corpus(spec, "coral", 100, {0.25, 0.25, 0.5, 0.0}, 1);
    CHECK(gen.bookkeeping.domain_expected() == 50);
    CHECK(gen.bookkeeping.task_expected() == 25);

    const KeywordSpec kspec = make_keyword_spec(spec, "coral");
    CHECK(match_keywords(gen.corpus, kspec, RetrievalMode::domain).size() == 50);
    CHECK(match_keywords(gen.corpus, kspec, RetrievalMode::task).size() == 25);
}

TEST_CASE("retrieval counts equal the generator bookkeeping on random mixes") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const SynthTaskSpec spec = SynthTaskSpec::default_spec();
        double f[4];
        double total = 0.0;
        for (double& v : f) {
            v = rng.uniform();
            total += v;
        }
        const RelevanceMix mix{f[0] / total, f[1] / total, f[2] / total,
                               1.0 - f[0] / total - f[1] / total - f[2] / total};
        const std::size_t size = 10 + rng.index(60);
        const GeneratedCorpus gen = generate_corpus(spec, "coral", size, mix, seed);

        const KeywordSpec kspec = make_keyword_spec(spec, "coral");
        const RetrievalSet domain = match_keywords(gen.corpus, kspec, RetrievalMode::domain);
        const RetrievalSet task = match_keywords(gen.corpus, kspec, RetrievalMode::task);
        CHECK(domain.size() == gen.bookkeeping.domain_expected());
        CHECK(task.size() == gen.bookkeeping.task_expected());

        const std::set<std::string> domain_ids = member_ids(domain);
        for (const std::string& id : member_ids(task)) CHECK(domain_ids.count(id) == 1);
    }
}

TEST_CASE("mismatched stratum pairs captions with images from other signatures") {
    SynthTaskSpec spec = SynthTaskSpec::default_spec();
    spec.noise = 0.0;
    const GeneratedCorpus gen = generate_corpus(spec, "coral", 60, {0.0, 0.0, 0.0, 1.0}, 3);
    REQUIRE(gen.bookkeeping.mismatched_stratum == 60);

    // recover the caption's class and compare channel means against the
    // class signature; a mismatched image must sit closer to some other one
    const SynthOrgan& coral = spec.organ("coral");
    std::size_t matched_signature = 0;
    for (const CaptionRecord& rec : gen.corpus.records()) {
        const std::vector<std::string> words = split_words(normalize_text(rec.caption));
        std::size_t caption_class = coral.classes.size();
        for (std::size_t c = 0; c < coral.classes.size(); ++c)
            if (caption_contains_keyword(words, coral.classes[c])) caption_class = c;
        REQUIRE(caption_class < coral.classes.size());

        const Image expected =
            render_signature_image(spec, 0, caption_class, /*record_seed=*/1);
        double image_mean[3] = {0, 0, 0}, expected_mean[3] = {0, 0, 0};
        for (std::size_t i = 0; i < rec.image.values.size(); ++i)
            image_mean[i % 3] += rec.image.values[i];
        for (std::size_t i = 0; i < expected.values.size(); ++i)
            expected_mean[i % 3] += expected.values[i];
        double dist = 0.0;
        for (int c = 0; c < 3; ++c)
            dist += std::fabs(image_mean[c] - expected_mean[c]) / expected.values.size() * 3;
        if (dist < 0.1) ++matched_signature;
    }
    CHECK(matched_signature == 0);
}

TEST_CASE("generation is deterministic per seed") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    const RelevanceMix mix{};
    const GeneratedCorpus a = generate_corpus(spec, "coral", 50, mix, 9);
    const GeneratedCorpus b = generate_corpus(spec, "coral", 50, mix, 9);
    REQUIRE(a.corpus.size() == b.corpus.size());
    for (std::size_t i = 0; i < a.corpus.size(); ++i) {
        CHECK(a.corpus.records()[i].caption == b.corpus.records()[i].caption);
        CHECK(a.corpus.records()[i].image.values == b.corpus.records()[i].image.values);
    }
    const GeneratedCorpus c = generate_corpus(spec, "coral", 50, mix, 10);
    bool any_differs = false;
    for (std::size_t i = 0; i < a.corpus.size(); ++i)
        any_differs |= a.corpus.records()[i].caption != c.corpus.records()[i].caption;
    CHECK(any_differs);
}

TEST_CASE("captions use only word-list words and place keywords whole-word") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    const GeneratedCorpus gen = generate_corpus(spec, "coral", 80, {0.3, 0.2, 0.4, 0.1}, 2);
    std::set<std::string> allowed;
    for (const std::string& w : spec.word_list()) allowed.insert(w);
    for (const CaptionRecord& rec : gen.corpus.records())
        for (const std::string& w : split_words(normalize_text(rec.caption)))
            CHECK(allowed.count(w) == 1);
}

TEST_CASE("task dataset shapes, balance and split disjointness") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    const TaskDataset train = generate_task_dataset(spec, "coral", 25, "train", 7);
    CHECK(train.items.size() == 100);  // four classes of 25
    const TaskDataset tiny = generate_task_dataset(spec, "coral", 1, "test", 7);
    CHECK(tiny.items.size() == 4);

    for (std::size_t cls = 0; cls < 4; ++cls) {
        std::size_t count = 0;
        for (const LabeledImage& item : train.items) count += item.label == cls;
        CHECK(count == 25);
    }

    const TaskDataset test = generate_task_dataset(spec, "coral", 25, "test", 7);
    std::set<std::string> train_ids;
    for (const LabeledImage& item : train.items) train_ids.insert(item.id);
    for (const LabeledImage& item : test.items) CHECK(train_ids.count(item.id) == 0);

    const TaskDataset again = generate_task_dataset(spec, "coral", 25, "train", 7);
    for (std::size_t i = 0; i < train.items.size(); ++i) {
        CHECK(again.items[i].id == train.items[i].id);
        CHECK(again.items[i].image.values == train.items[i].image.values);
    }

    CHECK_THROWS_AS(generate_task_dataset(spec, "granite", 5, "train", 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(generate_task_dataset(spec, "coral", 5, "validation", 0),
                    std::invalid_argument);
}

TEST_CASE("a linear probe on raw pixels separates classes at zero noise") {
    SynthTaskSpec spec = SynthTaskSpec::default_spec();
    spec.noise = 0.0;
    const TaskDataset train = generate_task_dataset(spec, "coral", 25, "train", 11);
    const TaskDataset test = generate_task_dataset(spec, "coral", 25, "test", 11);
    const std::size_t dim = spec.image_h * spec.image_w * spec.image_c;
    const std::size_t classes = 4;

    // softmax regression trained with the project's own autodiff
    Tensor weights = Tensor::zeros({dim, classes});
    Tensor bias = Tensor::zeros({classes});
    AdamWState w_state, b_state;
    Tensor inputs = Tensor::zeros({train.items.size(), dim});
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < train.items.size(); ++i) {
        std::copy(train.items[i].image.values.begin(), train.items[i].image.values.end(),
                  inputs.values.begin() + static_cast<std::ptrdiff_t>(i * dim));
        labels.push_back(train.items[i].label);
    }
    for (int step = 0; step < 120; ++step) {
        Tape tape;
        auto x = tape.constant(inputs);
        auto w = tape.parameter(weights);
        auto b = tape.parameter(bias);
        auto loss = tape.softmax_cross_entropy(tape.add(tape.matmul(x, w), b), labels);
        tape.backward(loss);
        adamw_step(weights, tape.grad(w), w_state, 0.05);
        adamw_step(bias, tape.grad(b), b_state, 0.05);
    }

    std::size_t hits = 0;
    for (const LabeledImage& item : test.items) {
        Tape tape;
        auto x = tape.constant(Tensor::matrix(1, dim, item.image.values));
        auto logits = tape.add(tape.matmul(x, tape.constant(weights)), tape.constant(bias));
        const Tensor& v = tape.value(logits);
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (v.values[c] > v.values[best]) best = c;
        hits += best == item.label;
    }
    CHECK(static_cast<double>(hits) / static_cast<double>(test.items.size()) > 0.95);
}

TEST_CASE("generated keyword spec and prompt bank are valid and aligned") {
    const SynthTaskSpec spec = SynthTaskSpec::default_spec();
    const KeywordSpec kspec = make_keyword_spec(spec, "coral");
    kspec.validate();
    CHECK(kspec.site_keywords == std::vector<std::string>{"coral"});
    CHECK(kspec.num_classes() == 4);

    const PromptBank bank = make_prompt_bank(spec, "coral");
    bank.validate();
    REQUIRE(bank.classes.size() == 4);
    CHECK(bank.templates.size() == 3);
    for (std::size_t i = 0; i < bank.classes.size(); ++i)
        CHECK(bank.classes[i].first == spec.organ("coral").classes[i]);
}

TEST_CASE("relevance mix validation") {
    RelevanceMix bad{0.5, 0.5, 0.5, 0.0};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    RelevanceMix negative{-0.1, 0.5, 0.5, 0.1};
    CHECK_THROWS_AS(negative.validate(), std::invalid_argument);

    // off-domain content requires a second organ
    SynthTaskSpec solo = SynthTaskSpec::default_spec();
    solo.organs = {{"coral", {"solid", "striped"}}};
    CHECK_THROWS_AS(generate_corpus(solo, "coral", 10, {0.25, 0.25, 0.5, 0.0}, 0),
                    std::invalid_argument);
    const GeneratedCorpus ok = generate_corpus(solo, "coral", 10, {0.5, 0.4, 0.0, 0.1}, 0);
    CHECK(ok.corpus.size() == 10);
}
