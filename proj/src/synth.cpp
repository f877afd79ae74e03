#include <cstdio>
#include "vlmadapt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "vlmadapt/rng.hpp"

namespace vlmadapt {

SynthTaskSpec SynthTaskSpec::default_spec() {
    SynthTaskSpec spec;
    spec.organs = {
        {"coral", {"solid", "striped", "dotted", "ringed"}},
        {"basalt", {"smooth", "granular"}},
    };
    spec.filler_words = {
        "a",      "an",      "the",     "of",      "image",   "sample", "view",
        "field",  "section", "region",  "study",   "showing", "with",   "texture",
        "detail", "area",    "note",    "typical", "scan",    "record", "slide",
        "case",   "layer",   "band",    "zone",    "form",    "grain",  "tone",
        "piece",  "patch",   "surface", "margin",  "focus",   "frame",  "plate",
    };
    return spec;
}

void SynthTaskSpec::validate() const {
    if (organs.empty()) throw std::invalid_argument("synth spec: no organs");
    if (image_h == 0 || image_w == 0 || image_c == 0)
        throw std::invalid_argument("synth spec: zero image dimension");
    if (noise < 0.0 || noise > 1.0)
        throw std::invalid_argument("synth spec: noise must lie in [0, 1]");
    if (filler_words.size() < 4) throw std::invalid_argument("synth spec: need filler words");

    std::set<std::string> seen;
    auto check_word = [&seen](const std::string& w, const char* kind) {
        if (w.empty() || w != normalize_text(w) || w.find(' ') != std::string::npos)
            throw std::invalid_argument(std::string("synth spec: ") + kind + " '" + w +
                                        "' must be a single normalized word");
        if (!seen.insert(w).second)
            throw std::invalid_argument("synth spec: word '" + w +
                                        "' appears in more than one role");
    };
    for (const SynthOrgan& o : organs) {
        check_word(o.name, "organ");
        if (o.classes.empty())
            throw std::invalid_argument("synth spec: organ '" + o.name + "' has no classes");
        for (const std::string& c : o.classes) check_word(c, "class");
    }
    for (const std::string& f : filler_words) check_word(f, "filler");

    // color signatures are bit patterns over channels; beyond this count
    // two classes would share a mean color
    const std::size_t capacity = std::size_t{1} << std::min<std::size_t>(image_c, 6);
    if (signature_count() > capacity)
        throw std::invalid_argument("synth spec: too many (organ, class) signatures for " +
                                    std::to_string(image_c) + " channels");
}

std::vector<std::string> SynthTaskSpec::word_list() const {
    std::vector<std::string> words = filler_words;
    for (const SynthOrgan& o : organs) {
        words.push_back(o.name);
        for (const std::string& c : o.classes) words.push_back(c);
    }
    return words;
}

const SynthOrgan& SynthTaskSpec::organ(const std::string& name) const {
    return organs[organ_index(name)];
}

std::size_t SynthTaskSpec::organ_index(const std::string& name) const {
    for (std::size_t i = 0; i < organs.size(); ++i)
        if (organs[i].name == name) return i;
    throw std::invalid_argument("synth spec: unknown organ '" + name + "'");
}

std::size_t SynthTaskSpec::signature_count() const {
    std::size_t n = 0;
    for (const SynthOrgan& o : organs) n += o.classes.size();
    return n;
}

void RelevanceMix::validate() const {
    for (double f : {task, domain_only, off_domain, mismatched})
        if (f < 0.0) throw std::invalid_argument("relevance mix: negative fraction");
    const double total = task + domain_only + off_domain + mismatched;
    if (std::fabs(total - 1.0) > 1e-9)
        throw std::invalid_argument("relevance mix: fractions must sum to 1");
}

namespace {

std::size_t signature_index(const SynthTaskSpec& spec, std::size_t organ_idx,
                            std::size_t class_idx) {
    std::size_t g = 0;
    for (std::size_t o = 0; o < organ_idx; ++o) g += spec.organs[o].classes.size();
    return g + class_idx;
}

// stripes with a per-record phase keep within-class variety without moving
// the class mean color much
double stripe_value(std::size_t y, std::size_t x, std::size_t class_idx, std::size_t phase) {
    const std::size_t period = 2 + class_idx / 4;
    const std::size_t orient = class_idx % 4;
    std::size_t coord = 0;
    switch (orient) {
        case 0: coord = y + phase; break;
        case 1: coord = x + phase; break;
        case 2: coord = x + y + phase; break;
        case 3: coord = x / period + y / period + phase; break;
    }
    return (coord / (orient == 3 ? 1 : period)) % 2 == 0 ? 1.0 : -1.0;
}

enum class Stratum : std::uint8_t { task = 0, domain_only, off_domain, mismatched };

const char* stratum_name(Stratum s) {
    switch (s) {
        case Stratum::task: return "task";
        case Stratum::domain_only: return "domain-only";
        case Stratum::off_domain: return "off-domain";
        case Stratum::mismatched: return "mismatched";
    }
    return "?";
}

// largest-remainder apportionment of size over the four strata
std::vector<std::size_t> stratum_counts(std::size_t size, const RelevanceMix& mix) {
    const double fractions[4] = {mix.task, mix.domain_only, mix.off_domain, mix.mismatched};
    std::vector<std::size_t> counts(4);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double exact = fractions[i] * static_cast<double>(size);
        counts[i] = static_cast<std::size_t>(exact);
        assigned += counts[i];
        remainders.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < size; ++i, ++assigned) counts[remainders[i % 4].second]++;
    return counts;
}

std::string pick_filler(const SynthTaskSpec& spec, Rng& rng) {
    return spec.filler_words[rng.index(spec.filler_words.size())];
}

// word sequences with the keyword slots at seeded positions
std::string build_caption(const SynthTaskSpec& spec, Rng& rng, const std::string& organ_word,
                          const std::string& class_word) {
    std::vector<std::string> words;
    const std::size_t lead = 1 + rng.index(3);
    for (std::size_t i = 0; i < lead; ++i) words.push_back(pick_filler(spec, rng));
    words.push_back(organ_word);
    const std::size_t mid = 1 + rng.index(2);
    for (std::size_t i = 0; i < mid; ++i) words.push_back(pick_filler(spec, rng));
    if (!class_word.empty()) {
        words.push_back(class_word);
        const std::size_t tail = rng.index(3);
        for (std::size_t i = 0; i < tail; ++i) words.push_back(pick_filler(spec, rng));
    }
    if (rng.uniform() < 0.5) std::swap(words[0], words[words.size() - 1]);
    std::string caption;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) caption += " ";
        caption += words[i];
    }
    return caption;
}

}  // namespace

Image render_signature_image(const SynthTaskSpec& spec, std::size_t organ_idx,
                             std::size_t class_idx, std::uint64_t record_seed) {
    const std::size_t g = signature_index(spec, organ_idx, class_idx);
    Rng rng{record_seed};
    Image img;
    img.height = spec.image_h;
    img.width = spec.image_w;
    img.channels = spec.image_c;
    img.values.resize(spec.image_h * spec.image_w * spec.image_c);
    const std::size_t phase = rng.index(8);
    for (std::size_t y = 0; y < spec.image_h; ++y) {
        for (std::size_t x = 0; x < spec.image_w; ++x) {
            const double s = stripe_value(y, x, class_idx, phase);
            for (std::size_t ch = 0; ch < spec.image_c; ++ch) {
                const double base = ((g >> (ch % 6)) & 1) ? 0.68 : 0.32;
                double v = base + 0.1 * s + spec.noise * (rng.uniform() - 0.5);
                img.at(y, x, ch) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return img;
}

GeneratedCorpus generate_corpus(const SynthTaskSpec& spec, const std::string& task_organ,
                                std::size_t size, const RelevanceMix& mix, std::uint64_t seed) {
    spec.validate();
    mix.validate();
    if (size == 0) throw std::invalid_argument("generate_corpus: size must be >= 1");
    const std::size_t task_idx = spec.organ_index(task_organ);
    if (mix.off_domain > 0.0 && spec.organs.size() < 2)
        throw std::invalid_argument(
            "generate_corpus: off-domain content needs at least two organs");

    const std::vector<std::size_t> counts = stratum_counts(size, mix);
    std::vector<Stratum> strata;
    strata.reserve(size);
    for (std::size_t s = 0; s < 4; ++s)
        strata.insert(strata.end(), counts[s], static_cast<Stratum>(s));
    Rng master(seed);
    master.fork(fnv1a("strata")).shuffle(strata);

    GeneratedCorpus out;
    out.bookkeeping.task_stratum = counts[0];
    out.bookkeeping.domain_only_stratum = counts[1];
    out.bookkeeping.off_domain_stratum = counts[2];
    out.bookkeeping.mismatched_stratum = counts[3];

    const SynthOrgan& target = spec.organs[task_idx];
    for (std::size_t i = 0; i < size; ++i) {
        Rng rng = master.fork(i);
        const Stratum stratum = strata[i];
        CaptionRecord rec;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "syn%06zu", i);
        rec.id = idbuf;
        rec.source = std::string("synthetic/") + stratum_name(stratum);

        std::size_t img_organ = task_idx, img_class = 0;
        switch (stratum) {
            case Stratum::task: {
                img_class = rng.index(target.classes.size());
                rec.caption = build_caption(spec, rng, target.name, target.classes[img_class]);
                break;
            }
            case Stratum::domain_only: {
                img_class = rng.index(target.classes.size());
                rec.caption = build_caption(spec, rng, target.name, "");
                break;
            }
            case Stratum::off_domain: {
                std::size_t other = rng.index(spec.organs.size() - 1);
                if (other >= task_idx) ++other;
                img_organ = other;
                const SynthOrgan& o = spec.organs[other];
                img_class = rng.index(o.classes.size());
                const bool mention_class = rng.uniform() < 0.5;
                rec.caption = build_caption(spec, rng, o.name,
                                            mention_class ? o.classes[img_class] : "");
                break;
            }
            case Stratum::mismatched: {
                const std::size_t caption_class = rng.index(target.classes.size());
                rec.caption =
                    build_caption(spec, rng, target.name, target.classes[caption_class]);
                // image from any other signature
                const std::size_t total = spec.signature_count();
                const std::size_t avoid = signature_index(spec, task_idx, caption_class);
                std::size_t g = rng.index(total - 1);
                if (g >= avoid) ++g;
                img_organ = 0;
                std::size_t remaining = g;
                while (remaining >= spec.organs[img_organ].classes.size()) {
                    remaining -= spec.organs[img_organ].classes.size();
                    ++img_organ;
                }
                img_class = remaining;
                break;
            }
        }
        rec.image = render_signature_image(spec, img_organ, img_class, rng.next_u64());
        out.corpus.add(std::move(rec));
    }
    return out;
}

TaskDataset generate_task_dataset(const SynthTaskSpec& spec, const std::string& organ,
                                  std::size_t n_per_class, const std::string& split,
                                  std::uint64_t seed) {
    spec.validate();
    if (n_per_class == 0) throw std::invalid_argument("generate_task_dataset: n_per_class >= 1");
    if (split != "train" && split != "test")
        throw std::invalid_argument("generate_task_dataset: split must be 'train' or 'test'");
    const std::size_t organ_idx = spec.organ_index(organ);
    const SynthOrgan& o = spec.organs[organ_idx];

    TaskDataset d;
    d.name = organ;
    d.classes = o.classes;
    Rng master(seed);
    for (std::size_t cls = 0; cls < o.classes.size(); ++cls) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const std::string tag =
                organ + "/" + split + "/" + o.classes[cls] + "/" + std::to_string(i);
            Rng rng = master.fork(fnv1a(tag));
            LabeledImage item;
            item.id = "task_" + organ + "_" + split + "_" + o.classes[cls] + "_" +
                      std::to_string(i);
            item.label = cls;
            item.image = render_signature_image(spec, organ_idx, cls, rng.next_u64());
            d.items.push_back(std::move(item));
        }
    }
    return d;
}

KeywordSpec make_keyword_spec(const SynthTaskSpec& spec, const std::string& organ) {
    const SynthOrgan& o = spec.organ(organ);
    KeywordSpec k;
    k.task_name = organ;
    k.site_keywords = {o.name};
    for (const std::string& c : o.classes) k.class_keywords.emplace_back(c, std::vector<std::string>{c});
    k.validate();
    return k;
}

PromptBank make_prompt_bank(const SynthTaskSpec& spec, const std::string& organ) {
    const SynthOrgan& o = spec.organ(organ);
    PromptBank bank;
    bank.templates = {"an image of {}", "a sample showing {}", "{} texture"};
    for (const std::string& c : o.classes)
        bank.classes.emplace_back(c, std::vector<std::string>{c, c + " " + o.name});
    bank.validate();
    return bank;
}

}  // namespace vlmadapt
