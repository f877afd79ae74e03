#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/zeroshot.hpp"

namespace vlmadapt {

struct SynthOrgan {
    std::string name;
    std::vector<std::string> classes;
};

// Miniature stand-in for a web-scale image-caption world: each (organ,
// class) pair owns a procedural texture family (distinct mean color plus a
// class-specific stripe pattern), and captions are built from a closed word
// list so retrieval counts are exact by construction.
struct SynthTaskSpec {
    std::vector<SynthOrgan> organs;
    std::size_t image_h = 12, image_w = 12, image_c = 3;
    double noise = 0.35;
    std::vector<std::string> filler_words;
    std::uint64_t seed = 0;

    static SynthTaskSpec default_spec();
    void validate() const;
    std::vector<std::string> word_list() const;
    const SynthOrgan& organ(const std::string& name) const;
    std::size_t organ_index(const std::string& name) const;
    std::size_t signature_count() const;
};

// caption strata relative to one task organ; fractions sum to 1
struct RelevanceMix {
    double task = 0.15;         // organ word + class word, matching image
    double domain_only = 0.25;  // organ word only
    double off_domain = 0.5;   // a different organ's content
    double mismatched = 0.1;   // task-style caption, image from elsewhere

    void validate() const;
};

struct CorpusBookkeeping {
    std::size_t task_stratum = 0;
    std::size_t domain_only_stratum = 0;
    std::size_t off_domain_stratum = 0;
    std::size_t mismatched_stratum = 0;

    // string matching sees mismatched captions as task captions
    std::size_t domain_expected() const {
        return task_stratum + domain_only_stratum + mismatched_stratum;
    }
    std::size_t task_expected() const { return task_stratum + mismatched_stratum; }
};

struct GeneratedCorpus {
    Corpus corpus;
    CorpusBookkeeping bookkeeping;
};

GeneratedCorpus generate_corpus(const SynthTaskSpec& spec, const std::string& task_organ,
                                std::size_t size, const RelevanceMix& mix, std::uint64_t seed);

// balanced labeled images, no captions; train/test splits are disjoint by
// construction (ids and pixel streams both keyed on the split tag)
TaskDataset generate_task_dataset(const SynthTaskSpec& spec, const std::string& organ,
                                  std::size_t n_per_class, const std::string& split,
                                  std::uint64_t seed);

KeywordSpec make_keyword_spec(const SynthTaskSpec& spec, const std::string& organ);
PromptBank make_prompt_bank(const SynthTaskSpec& spec, const std::string& organ);

Image render_signature_image(const SynthTaskSpec& spec, std::size_t organ_idx,
                             std::size_t class_idx, std::uint64_t record_seed);

}  // namespace vlmadapt
