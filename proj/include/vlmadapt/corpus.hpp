#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vlmadapt {

// H x W x C grid of values in [0, 1], row-major
struct Image {
    std::size_t height = 0, width = 0, channels = 0;
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }
    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return values[(y * width + x) * channels + c];
    }
    double& at(std::size_t y, std::size_t x, std::size_t c) {
        return values[(y * width + x) * channels + c];
    }
};

Image read_ppm(const std::string& path);   // P6 and P5, maxval <= 65535
void write_ppm(const std::string& path, const Image& img);  // P6, 8-bit

struct CaptionRecord {
    std::string id;
    std::string caption;
    std::string source;
    std::string image_path;  // empty when the image was inline
    Image image;
};

class Corpus {
public:
    void add(CaptionRecord record);  // rejects duplicate ids
    const std::vector<CaptionRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const CaptionRecord* find(const std::string& id) const;
    const CaptionRecord& by_id(const std::string& id) const;  // throws when missing

private:
    std::vector<CaptionRecord> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

// JSON Lines, one record per line: id, caption, source, and exactly one of
// image_path (portable pixmap, resolved relative to the corpus file) or
// image_inline (H x W x C nested array of floats in [0, 1]).
Corpus load_corpus(const std::string& path);
void save_corpus(const std::string& path, const Corpus& corpus);

// lowercase, punctuation to single spaces, whitespace runs collapsed
std::string normalize_text(std::string_view caption);
std::vector<std::string> split_words(std::string_view normalized);

struct KeywordSpec {
    std::string task_name;
    std::vector<std::string> site_keywords;
    // class order is meaningful: it breaks pseudo-label ties
    std::vector<std::pair<std::string, std::vector<std::string>>> class_keywords;

    void validate() const;
    std::size_t num_classes() const { return class_keywords.size(); }
};

KeywordSpec load_keyword_spec(const std::string& path);
void save_keyword_spec(const std::string& path, const KeywordSpec& spec);

enum class RetrievalMode { domain, task };

struct RetrievalMember {
    std::string id;
    std::vector<std::string> matched_keywords;
    std::optional<double> score;
    std::optional<std::string> label;
};

struct RetrievalSet {
    RetrievalMode mode = RetrievalMode::domain;
    std::vector<RetrievalMember> members;

    std::size_t size() const { return members.size(); }
};

RetrievalSet load_retrieval_set(const std::string& path);
void save_retrieval_set(const std::string& path, const RetrievalSet& set);

// labeled image dataset (no captions): downstream task train/test splits
struct LabeledImage {
    std::string id;
    std::size_t label = 0;  // index into TaskDataset::classes
    Image image;
};

struct TaskDataset {
    std::string name;
    std::vector<std::string> classes;
    std::vector<LabeledImage> items;

    void validate() const;
};

TaskDataset load_task_dataset(const std::string& path);
void save_task_dataset(const std::string& path, const TaskDataset& dataset);

// whole-word phrase containment: the keyword's word sequence must appear
// contiguously among the caption's normalized words
bool caption_contains_keyword(const std::vector<std::string>& caption_words,
                              const std::string& keyword);
std::optional<std::size_t> keyword_position(const std::vector<std::string>& caption_words,
                                            const std::string& keyword);

// domain: any site keyword present. task: the domain subset whose captions
// also contain a class keyword.
RetrievalSet match_keywords(const Corpus& corpus, const KeywordSpec& spec, RetrievalMode mode);

// label each task-mode member with the class whose keyword matches earliest
// in the caption; ties fall back to class order in the spec
RetrievalSet assign_pseudo_labels(const RetrievalSet& task_retrieval, const KeywordSpec& spec,
                                  const Corpus& corpus);

enum class BalancePolicy { truncate, oversample };

// truncate: cap each class at target keeping the highest-ranked members;
// oversample: cycle a short class's members in rank order up to target
// (a spec class with no members is an error under oversample)
RetrievalSet balance_by_label(const RetrievalSet& labeled, const KeywordSpec& spec,
                              std::size_t target_per_class, BalancePolicy policy);

}  // namespace vlmadapt
