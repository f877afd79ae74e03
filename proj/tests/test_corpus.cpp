#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/rng.hpp"

using namespace vlmadapt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "vlmadapt_corpus_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

fs::path write_file(const std::string& name, const std::string& content) {
    const fs::path p = temp_dir() / name;
    std::ofstream out(p);
    out << content;
    return p;
}

const char* kInlineImage = R"([[[0.5]],[[0.25]]])";

std::string record_line(const std::string& id, const std::string& caption) {
    return "{\"id\":\"" + id + "\",\"caption\":\"" + caption +
           "\",\"source\":\"test\",\"image_inline\":" + kInlineImage + "}";
}

KeywordSpec bach_spec() {
    KeywordSpec spec;
    spec.task_name = "bach";
    spec.site_keywords = {"breast"};
    spec.class_keywords = {{"normal", {"normal"}},
                           {"benign", {"benign"}},
                           {"in situ", {"in situ"}},
                           {"invasive", {"invasive"}}};
    return spec;
}

Corpus corpus_for(std::initializer_list<std::pair<std::string, std::string>> entries) {
    Corpus c;
    for (const auto& [id, caption] : entries) {
        CaptionRecord rec;
        rec.id = id;
        rec.caption = caption;
        rec.source = "test";
        rec.image = Image{1, 1, 1, {0.5}};
        c.add(std::move(rec));
    }
    return c;
}

}  // namespace

TEST_CASE("load_corpus reads a valid three-line file") {
    const fs::path p = write_file("valid.jsonl", record_line("a", "first caption") + "\n" +
                                                     record_line("b", "second") + "\n" +
                                                     record_line("c", "third") + "\n");
    const Corpus c = load_corpus(p.string());
    REQUIRE(c.size() == 3);
    CHECK(c.records()[1].caption == "second");
    CHECK(c.records()[0].image.height == 2);
    CHECK(c.records()[0].image.values == std::vector<double>{0.5, 0.25});
}

TEST_CASE("load_corpus of an empty file is an empty corpus") {
    const fs::path p = write_file("empty.jsonl", "");
    CHECK(load_corpus(p.string()).empty());
}

TEST_CASE("load_corpus errors carry the line number") {
    const fs::path bad_caption = write_file(
        "bad_caption.jsonl", record_line("a", "fine") + "\n" + record_line("b", "") + "\n");
    CHECK_THROWS_WITH_AS(load_corpus(bad_caption.string()),
                         doctest::Contains(":2: empty caption"), std::runtime_error);

    const fs::path bad_json =
        write_file("bad_json.jsonl", record_line("a", "fine") + "\n{not json\n");
    CHECK_THROWS_WITH_AS(load_corpus(bad_json.string()), doctest::Contains(":2: parse failure"),
                         std::runtime_error);

    const fs::path dup = write_file("dup.jsonl",
                                    record_line("a", "one") + "\n" + record_line("a", "two") + "\n");
    CHECK_THROWS_WITH_AS(load_corpus(dup.string()), doctest::Contains("duplicate id"),
                         std::runtime_error);

    const fs::path missing_img = write_file(
        "missing_img.jsonl",
        "{\"id\":\"a\",\"caption\":\"x\",\"source\":\"t\",\"image_path\":\"nope.ppm\"}\n");
    CHECK_THROWS_WITH_AS(load_corpus(missing_img.string()), doctest::Contains("missing image"),
                         std::runtime_error);

    const fs::path both = write_file(
        "both.jsonl", "{\"id\":\"a\",\"caption\":\"x\",\"source\":\"t\",\"image_path\":\"p\","
                      "\"image_inline\":[[[0.1]]]}\n");
    CHECK_THROWS_AS(load_corpus(both.string()), std::runtime_error);

    const fs::path range = write_file(
        "range.jsonl",
        "{\"id\":\"a\",\"caption\":\"x\",\"source\":\"t\",\"image_inline\":[[[1.5]]]}\n");
    CHECK_THROWS_WITH_AS(load_corpus(range.string()), doctest::Contains("outside [0, 1]"),
                         std::runtime_error);
}

TEST_CASE("ppm round trip through image_path records") {
    Image img;
    img.height = 3;
    img.width = 2;
    img.channels = 3;
    Rng rng(4);
    for (std::size_t i = 0; i < 18; ++i) img.values.push_back(rng.index(256) / 255.0);
    write_ppm((temp_dir() / "img.ppm").string(), img);

    const Image back = read_ppm((temp_dir() / "img.ppm").string());
    REQUIRE(back.height == 3);
    REQUIRE(back.width == 2);
    REQUIRE(back.channels == 3);
    for (std::size_t i = 0; i < 18; ++i)
        CHECK(back.values[i] == doctest::Approx(img.values[i]).epsilon(1e-9));

    const fs::path p = write_file(
        "with_path.jsonl",
        "{\"id\":\"a\",\"caption\":\"x\",\"source\":\"t\",\"image_path\":\"img.ppm\"}\n");
    const Corpus c = load_corpus(p.string());
    CHECK(c.records()[0].image.values == back.values);
}

TEST_CASE("save_corpus round trips") {
    Corpus c = corpus_for({{"a", "first"}, {"b", "second"}});
    const fs::path p = temp_dir() / "roundtrip.jsonl";
    save_corpus(p.string(), c);
    const Corpus back = load_corpus(p.string());
    REQUIRE(back.size() == 2);
    CHECK(back.records()[0].caption == "first");
    CHECK(back.records()[0].image.values == c.records()[0].image.values);
}

TEST_CASE("normalize_text rules") {
    CHECK(normalize_text("Invasive Carcinoma, Breast.") == "invasive carcinoma breast");
    CHECK(normalize_text("In-Situ  lesion") == "in situ lesion");
    CHECK(normalize_text("") == "");
    CHECK(normalize_text("...") == "");
    CHECK(normalize_text("  a  b  ") == "a b");
}

TEST_CASE("normalize_text is idempotent on random strings") {
    Rng rng(6);
    const std::string alphabet = "aB c,.-;'!3\t";
    for (int trial = 0; trial < 200; ++trial) {
        std::string s;
        const std::size_t len = rng.index(30);
        for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.index(alphabet.size())]);
        const std::string once = normalize_text(s);
        CHECK(normalize_text(once) == once);
    }
}

TEST_CASE("match_keywords: task and domain modes") {
    const Corpus c = corpus_for({
        {"r1", "ductal carcinoma in situ of the breast"},
        {"r2", "sessile serrated lesion of colon"},
        {"r3", "breast tissue, normal appearance"},
        {"r4", "colonoscopy followup"},
    });
    const KeywordSpec spec = bach_spec();

    const RetrievalSet task = match_keywords(c, spec, RetrievalMode::task);
    REQUIRE(task.size() == 2);
    CHECK(task.members[0].id == "r1");
    CHECK(task.members[0].matched_keywords == std::vector<std::string>{"breast", "in situ"});
    CHECK(task.members[1].id == "r3");

    const RetrievalSet domain = match_keywords(c, spec, RetrievalMode::domain);
    REQUIRE(domain.size() == 2);  // r2 and r4 have no site keyword
}

TEST_CASE("whole-word rule: colonoscopy does not match colon") {
    KeywordSpec spec;
    spec.task_name = "mhist-like";
    spec.site_keywords = {"colon"};
    spec.class_keywords = {{"x", {"sessile"}}};
    const Corpus c = corpus_for({{"r1", "colonoscopy followup"}, {"r2", "colon cancer screening"}});
    const RetrievalSet domain = match_keywords(c, spec, RetrievalMode::domain);
    REQUIRE(domain.size() == 1);
    CHECK(domain.members[0].id == "r2");
}

TEST_CASE("task retrieval is a subset of domain retrieval on random corpora") {
    const std::vector<std::string> pool = {"breast", "colon",  "normal", "benign",
                                           "tissue", "sample", "in",     "situ",
                                           "invasive", "slide"};
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        Corpus c;
        const std::size_t n = 1 + rng.index(30);
        for (std::size_t i = 0; i < n; ++i) {
            CaptionRecord rec;
            rec.id = "r" + std::to_string(i);
            const std::size_t words = 1 + rng.index(8);
            for (std::size_t w = 0; w < words; ++w) {
                if (w) rec.caption += " ";
                rec.caption += pool[rng.index(pool.size())];
            }
            rec.source = "t";
            rec.image = Image{1, 1, 1, {0.1}};
            c.add(std::move(rec));
        }
        const KeywordSpec spec = bach_spec();
        const RetrievalSet domain = match_keywords(c, spec, RetrievalMode::domain);
        const RetrievalSet task = match_keywords(c, spec, RetrievalMode::task);
        std::set<std::string> domain_ids;
        for (const auto& m : domain.members) domain_ids.insert(m.id);
        for (const auto& m : task.members) CHECK(domain_ids.count(m.id) == 1);
    }
}

TEST_CASE("match_keywords member set is invariant under corpus permutation") {
    const Corpus c = corpus_for({{"a", "breast benign"},
                                 {"b", "no match here"},
                                 {"c", "invasive breast carcinoma"}});
    const Corpus permuted = corpus_for({{"c", "invasive breast carcinoma"},
                                        {"a", "breast benign"},
                                        {"b", "no match here"}});
    auto ids = [](const RetrievalSet& s) {
        std::set<std::string> out;
        for (const auto& m : s.members) out.insert(m.id);
        return out;
    };
    const KeywordSpec spec = bach_spec();
    CHECK(ids(match_keywords(c, spec, RetrievalMode::task)) ==
          ids(match_keywords(permuted, spec, RetrievalMode::task)));
}

TEST_CASE("pseudo-labels: earliest match, class order on ties") {
    const KeywordSpec spec = bach_spec();
    const Corpus c = corpus_for({
        {"r1", "clearly invasive growth"},
        {"r2", "benign, not invasive"},
        {"r3", "breast with in situ and benign parts"},
    });
    RetrievalSet task;
    task.mode = RetrievalMode::task;
    for (const auto& rec : c.records()) task.members.push_back({rec.id, {}, {}, {}});

    const RetrievalSet labeled = assign_pseudo_labels(task, spec, c);
    CHECK(*labeled.members[0].label == "invasive");
    CHECK(*labeled.members[1].label == "benign");  // earliest position wins
    CHECK(*labeled.members[2].label == "in situ"); // position 2 beats benign at 4
}

TEST_CASE("assign_pseudo_labels requires task mode") {
    RetrievalSet domain;
    domain.mode = RetrievalMode::domain;
    const Corpus c = corpus_for({{"a", "breast"}});
    CHECK_THROWS_AS(assign_pseudo_labels(domain, bach_spec(), c), std::invalid_argument);
}

TEST_CASE("balance_by_label truncate and oversample") {
    KeywordSpec spec;
    spec.task_name = "toy";
    spec.site_keywords = {"site"};
    spec.class_keywords = {{"a", {"aword"}}, {"b", {"bword"}}};

    RetrievalSet labeled;
    labeled.mode = RetrievalMode::task;
    for (int i = 0; i < 5; ++i)
        labeled.members.push_back({"a" + std::to_string(i), {}, {}, std::string("a")});
    labeled.members.push_back({"b0", {}, {}, std::string("b")});
    labeled.members.push_back({"b1", {}, {}, std::string("b")});

    const RetrievalSet truncated = balance_by_label(labeled, spec, 2, BalancePolicy::truncate);
    REQUIRE(truncated.size() == 4);
    CHECK(truncated.members[0].id == "a0");  // highest-ranked kept
    CHECK(truncated.members[1].id == "a1");

    RetrievalSet skewed;
    skewed.mode = RetrievalMode::task;
    skewed.members.push_back({"a0", {}, {}, std::string("a")});
    skewed.members.push_back({"a1", {}, {}, std::string("a")});
    skewed.members.push_back({"a2", {}, {}, std::string("a")});
    skewed.members.push_back({"b0", {}, {}, std::string("b")});
    const RetrievalSet over = balance_by_label(skewed, spec, 3, BalancePolicy::oversample);
    REQUIRE(over.size() == 6);
    CHECK(over.members[3].id == "b0");
    CHECK(over.members[4].id == "b0");
    CHECK(over.members[5].id == "b0");

    RetrievalSet missing_class;
    missing_class.mode = RetrievalMode::task;
    missing_class.members.push_back({"a0", {}, {}, std::string("a")});
    CHECK_THROWS_WITH_AS(balance_by_label(missing_class, spec, 2, BalancePolicy::oversample),
                         doctest::Contains("empty class b"), std::invalid_argument);
    CHECK(balance_by_label(missing_class, spec, 2, BalancePolicy::truncate).size() == 1);
}

TEST_CASE("keyword spec validation") {
    KeywordSpec spec = bach_spec();
    spec.site_keywords = {};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = bach_spec();
    spec.class_keywords[0].second = {"Not Normalized"};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = bach_spec();
    spec.site_keywords = {" breast"};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("keyword spec and retrieval set files round trip") {
    const fs::path kw = temp_dir() / "spec.json";
    save_keyword_spec(kw.string(), bach_spec());
    const KeywordSpec back = load_keyword_spec(kw.string());
    CHECK(back.task_name == "bach");
    CHECK(back.class_keywords.size() == 4);
    CHECK(back.class_keywords[2].first == "in situ");

    RetrievalSet set;
    set.mode = RetrievalMode::task;
    set.members.push_back({"id1", {"breast"}, 0.75, std::string("benign")});
    const fs::path rp = temp_dir() / "set.json";
    save_retrieval_set(rp.string(), set);
    const RetrievalSet rback = load_retrieval_set(rp.string());
    CHECK(rback.mode == RetrievalMode::task);
    REQUIRE(rback.size() == 1);
    CHECK(rback.members[0].score == 0.75);
    CHECK(*rback.members[0].label == "benign");
}

TEST_CASE("task dataset round trip and validation") {
    TaskDataset d;
    d.name = "toy";
    d.classes = {"x", "y"};
    d.items.push_back({"i0", 0, Image{1, 2, 1, {0.1, 0.9}}});
    d.items.push_back({"i1", 1, Image{1, 2, 1, {0.4, 0.2}}});
    const fs::path p = temp_dir() / "dataset.json";
    save_task_dataset(p.string(), d);
    const TaskDataset back = load_task_dataset(p.string());
    CHECK(back.classes == d.classes);
    REQUIRE(back.items.size() == 2);
    CHECK(back.items[1].image.values == d.items[1].image.values);

    TaskDataset bad = d;
    bad.items[0].label = 5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
