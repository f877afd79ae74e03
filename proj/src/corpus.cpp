#include "vlmadapt/corpus.hpp"

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlmadapt {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6" && magic != "P5")
        throw std::runtime_error("read_ppm: unsupported format '" + magic + "' in " + path);

    auto next_token = [&in, &path]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw std::runtime_error("read_ppm: truncated header in " + path);
    };

    const std::size_t width = std::stoul(next_token());
    const std::size_t height = std::stoul(next_token());
    const unsigned long maxval = std::stoul(next_token());
    if (width == 0 || height == 0 || maxval == 0 || maxval > 65535)
        throw std::runtime_error("read_ppm: bad header in " + path);
    in.get();  // single whitespace after maxval

    Image img;
    img.height = height;
    img.width = width;
    img.channels = magic == "P6" ? 3 : 1;
    const std::size_t count = height * width * img.channels;
    img.values.resize(count);
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(count * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    for (std::size_t i = 0; i < count; ++i) {
        unsigned long v = bytes_per == 1
                              ? raw[i]
                              : (static_cast<unsigned long>(raw[2 * i]) << 8) | raw[2 * i + 1];
        img.values[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3 && img.channels != 1)
        throw std::invalid_argument("write_ppm: 1 or 3 channels required");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    for (double v : img.values) {
        double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
}

void Corpus::add(CaptionRecord record) {
    auto [it, inserted] = index_.emplace(record.id, records_.size());
    if (!inserted) throw std::invalid_argument("corpus: duplicate id '" + record.id + "'");
    records_.push_back(std::move(record));
}

const CaptionRecord* Corpus::find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records_[it->second];
}

const CaptionRecord& Corpus::by_id(const std::string& id) const {
    const CaptionRecord* r = find(id);
    if (!r) throw std::invalid_argument("corpus: unknown id '" + id + "'");
    return *r;
}

namespace {

[[noreturn]] void line_error(const std::string& path, std::size_t line_no, const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
}

Image parse_inline_image(const ordered_json& grid, const std::string& path, std::size_t line_no) {
    if (!grid.is_array() || grid.empty()) line_error(path, line_no, "image_inline: empty grid");
    Image img;
    img.height = grid.size();
    for (std::size_t y = 0; y < img.height; ++y) {
        const auto& row = grid[y];
        if (!row.is_array() || row.empty())
            line_error(path, line_no, "image_inline: empty row");
        if (y == 0) img.width = row.size();
        if (row.size() != img.width)
            line_error(path, line_no, "image_inline: ragged rows");
        for (std::size_t x = 0; x < img.width; ++x) {
            const auto& px = row[x];
            if (!px.is_array() || px.empty())
                line_error(path, line_no, "image_inline: empty pixel");
            if (y == 0 && x == 0) img.channels = px.size();
            if (px.size() != img.channels)
                line_error(path, line_no, "image_inline: ragged channels");
            for (std::size_t c = 0; c < img.channels; ++c) {
                if (!px[c].is_number())
                    line_error(path, line_no, "image_inline: non-numeric value");
                const double v = px[c].get<double>();
                if (!(v >= 0.0 && v <= 1.0))
                    line_error(path, line_no, "image_inline: value outside [0, 1]");
                img.values.push_back(v);
            }
        }
    }
    return img;
}

ordered_json image_to_json(const Image& img) {
    ordered_json grid = ordered_json::array();
    for (std::size_t y = 0; y < img.height; ++y) {
        ordered_json row = ordered_json::array();
        for (std::size_t x = 0; x < img.width; ++x) {
            ordered_json px = ordered_json::array();
            for (std::size_t c = 0; c < img.channels; ++c) px.push_back(img.at(y, x, c));
            row.push_back(std::move(px));
        }
        grid.push_back(std::move(row));
    }
    return grid;
}

}  // namespace

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
    const fs::path base = fs::path(path).parent_path();

    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            line_error(path, line_no, std::string("parse failure: ") + e.what());
        }
        if (!j.is_object()) line_error(path, line_no, "record is not an object");
        for (const char* field : {"id", "caption", "source"}) {
            if (!j.contains(field) || !j[field].is_string())
                line_error(path, line_no, std::string("missing string field '") + field + "'");
        }
        CaptionRecord rec;
        rec.id = j["id"].get<std::string>();
        rec.caption = j["caption"].get<std::string>();
        rec.source = j["source"].get<std::string>();
        if (rec.caption.empty()) line_error(path, line_no, "empty caption");

        const bool has_path = j.contains("image_path");
        const bool has_inline = j.contains("image_inline");
        if (has_path == has_inline)
            line_error(path, line_no, "exactly one of image_path/image_inline required");
        if (has_path) {
            rec.image_path = j["image_path"].get<std::string>();
            const fs::path resolved = fs::path(rec.image_path).is_absolute()
                                          ? fs::path(rec.image_path)
                                          : base / rec.image_path;
            if (!fs::exists(resolved))
                line_error(path, line_no, "missing image " + resolved.string());
            rec.image = read_ppm(resolved.string());
        } else {
            rec.image = parse_inline_image(j["image_inline"], path, line_no);
        }
        try {
            corpus.add(std::move(rec));
        } catch (const std::invalid_argument& e) {
            line_error(path, line_no, e.what());
        }
    }
    return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
    for (const CaptionRecord& rec : corpus.records()) {
        ordered_json j;
        j["id"] = rec.id;
        j["caption"] = rec.caption;
        j["source"] = rec.source;
        if (!rec.image_path.empty()) j["image_path"] = rec.image_path;
        else j["image_inline"] = image_to_json(rec.image);
        out << j.dump() << "\n";
    }
}

std::string normalize_text(std::string_view caption) {
    std::string out;
    out.reserve(caption.size());
    bool pending_space = false;
    for (unsigned char ch : caption) {
        if (std::isalnum(ch)) {
            if (pending_space && !out.empty()) out.push_back(' ');
            pending_space = false;
            out.push_back(static_cast<char>(std::tolower(ch)));
        } else {
            pending_space = true;
        }
    }
    return out;
}

std::vector<std::string> split_words(std::string_view normalized) {
    std::vector<std::string> words;
    std::size_t start = 0;
    while (start < normalized.size()) {
        std::size_t end = normalized.find(' ', start);
        if (end == std::string_view::npos) end = normalized.size();
        if (end > start) words.emplace_back(normalized.substr(start, end - start));
        start = end + 1;
    }
    return words;
}

void KeywordSpec::validate() const {
    if (site_keywords.empty()) throw std::invalid_argument("keyword spec: no site keywords");
    if (class_keywords.empty()) throw std::invalid_argument("keyword spec: no classes");
    auto check_phrase = [](const std::string& phrase) {
        if (phrase.empty()) throw std::invalid_argument("keyword spec: empty keyword");
        if (phrase != normalize_text(phrase))
            throw std::invalid_argument("keyword spec: keyword '" + phrase +
                                        "' is not normalized");
    };
    for (const auto& kw : site_keywords) check_phrase(kw);
    for (const auto& [cls, kws] : class_keywords) {
        if (cls.empty()) throw std::invalid_argument("keyword spec: empty class name");
        if (kws.empty())
            throw std::invalid_argument("keyword spec: class '" + cls + "' has no keywords");
        for (const auto& kw : kws) check_phrase(kw);
    }
}

KeywordSpec load_keyword_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_keyword_spec: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    KeywordSpec spec;
    spec.task_name = j.at("task_name").get<std::string>();
    for (const auto& kw : j.at("site_keywords"))
        spec.site_keywords.push_back(normalize_text(kw.get<std::string>()));
    for (const auto& [cls, kws] : j.at("class_keywords").items()) {
        std::vector<std::string> list;
        for (const auto& kw : kws) list.push_back(normalize_text(kw.get<std::string>()));
        spec.class_keywords.emplace_back(cls, std::move(list));
    }
    spec.validate();
    return spec;
}

void save_keyword_spec(const std::string& path, const KeywordSpec& spec) {
    ordered_json j;
    j["task_name"] = spec.task_name;
    j["site_keywords"] = spec.site_keywords;
    ordered_json classes = ordered_json::object();
    for (const auto& [cls, kws] : spec.class_keywords) classes[cls] = kws;
    j["class_keywords"] = std::move(classes);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_keyword_spec: cannot open " + path);
    out << j.dump(2) << "\n";
}

RetrievalSet load_retrieval_set(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_retrieval_set: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    RetrievalSet set;
    set.mode = j.at("mode").get<std::string>() == "task" ? RetrievalMode::task
                                                         : RetrievalMode::domain;
    for (const auto& m : j.at("members")) {
        RetrievalMember member;
        member.id = m.at("id").get<std::string>();
        for (const auto& kw : m.at("matched_keywords"))
            member.matched_keywords.push_back(kw.get<std::string>());
        if (m.contains("score")) member.score = m["score"].get<double>();
        if (m.contains("label")) member.label = m["label"].get<std::string>();
        set.members.push_back(std::move(member));
    }
    return set;
}

void save_retrieval_set(const std::string& path, const RetrievalSet& set) {
    ordered_json j;
    j["mode"] = set.mode == RetrievalMode::task ? "task" : "domain";
    ordered_json members = ordered_json::array();
    for (const RetrievalMember& m : set.members) {
        ordered_json mj;
        mj["id"] = m.id;
        mj["matched_keywords"] = m.matched_keywords;
        if (m.score) mj["score"] = *m.score;
        if (m.label) mj["label"] = *m.label;
        members.push_back(std::move(mj));
    }
    j["members"] = std::move(members);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_retrieval_set: cannot open " + path);
    out << j.dump(2) << "\n";
}

void TaskDataset::validate() const {
    if (classes.empty()) throw std::invalid_argument("task dataset: no classes");
    for (const LabeledImage& item : items) {
        if (item.label >= classes.size())
            throw std::invalid_argument("task dataset: label out of range for '" + item.id + "'");
        if (item.image.empty())
            throw std::invalid_argument("task dataset: empty image for '" + item.id + "'");
    }
}

TaskDataset load_task_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_task_dataset: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    TaskDataset d;
    d.name = j.at("name").get<std::string>();
    d.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& ij : j.at("items")) {
        LabeledImage item;
        item.id = ij.at("id").get<std::string>();
        item.label = ij.at("label").get<std::size_t>();
        item.image = parse_inline_image(ij.at("image_inline"), path, 0);
        d.items.push_back(std::move(item));
    }
    d.validate();
    return d;
}

void save_task_dataset(const std::string& path, const TaskDataset& dataset) {
    dataset.validate();
    ordered_json j;
    j["name"] = dataset.name;
    j["classes"] = dataset.classes;
    ordered_json items = ordered_json::array();
    for (const LabeledImage& item : dataset.items) {
        ordered_json ij;
        ij["id"] = item.id;
        ij["label"] = item.label;
        ij["image_inline"] = image_to_json(item.image);
        items.push_back(std::move(ij));
    }
    j["items"] = std::move(items);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_task_dataset: cannot open " + path);
    out << j.dump() << "\n";
}

std::optional<std::size_t> keyword_position(const std::vector<std::string>& caption_words,
                                            const std::string& keyword) {
    const std::vector<std::string> phrase = split_words(keyword);
    if (phrase.empty() || phrase.size() > caption_words.size()) return std::nullopt;
    for (std::size_t i = 0; i + phrase.size() <= caption_words.size(); ++i) {
        bool hit = true;
        for (std::size_t k = 0; k < phrase.size(); ++k) {
            if (caption_words[i + k] != phrase[k]) {
                hit = false;
                break;
            }
        }
        if (hit) return i;
    }
    return std::nullopt;
}

bool caption_contains_keyword(const std::vector<std::string>& caption_words,
                              const std::string& keyword) {
    return keyword_position(caption_words, keyword).has_value();
}

RetrievalSet match_keywords(const Corpus& corpus, const KeywordSpec& spec, RetrievalMode mode) {
    spec.validate();
    const auto& records = corpus.records();
    std::vector<RetrievalMember> slots(records.size());
    std::vector<char> keep(records.size(), 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(records.size()); ++idx) {
        const CaptionRecord& rec = records[static_cast<std::size_t>(idx)];
        const std::vector<std::string> words = split_words(normalize_text(rec.caption));
        std::vector<std::string> matched;
        bool in_domain = false;
        for (const std::string& kw : spec.site_keywords) {
            if (caption_contains_keyword(words, kw)) {
                in_domain = true;
                matched.push_back(kw);
            }
        }
        if (!in_domain) continue;
        bool in_task = false;
        if (mode == RetrievalMode::task) {
            for (const auto& [cls, kws] : spec.class_keywords) {
                for (const std::string& kw : kws) {
                    if (caption_contains_keyword(words, kw)) {
                        in_task = true;
                        matched.push_back(kw);
                    }
                }
            }
            if (!in_task) continue;
        }
        RetrievalMember m;
        m.id = rec.id;
        m.matched_keywords = std::move(matched);
        slots[static_cast<std::size_t>(idx)] = std::move(m);
        keep[static_cast<std::size_t>(idx)] = 1;
    }

    RetrievalSet set;
    set.mode = mode;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (keep[i]) set.members.push_back(std::move(slots[i]));
    return set;
}

RetrievalSet assign_pseudo_labels(const RetrievalSet& task_retrieval, const KeywordSpec& spec,
                                  const Corpus& corpus) {
    if (task_retrieval.mode != RetrievalMode::task)
        throw std::invalid_argument("assign_pseudo_labels: task-mode retrieval required");
    spec.validate();
    RetrievalSet out = task_retrieval;
    for (RetrievalMember& m : out.members) {
        const CaptionRecord& rec = corpus.by_id(m.id);
        const std::vector<std::string> words = split_words(normalize_text(rec.caption));
        std::optional<std::size_t> best_pos;
        std::optional<std::size_t> best_class;
        for (std::size_t ci = 0; ci < spec.class_keywords.size(); ++ci) {
            for (const std::string& kw : spec.class_keywords[ci].second) {
                auto pos = keyword_position(words, kw);
                if (!pos) continue;
                // earliest position wins; class order breaks ties
                if (!best_pos || *pos < *best_pos) {
                    best_pos = pos;
                    best_class = ci;
                }
            }
        }
        if (!best_class)
            throw std::invalid_argument("assign_pseudo_labels: member '" + m.id +
                                        "' matches no class keyword");
        m.label = spec.class_keywords[*best_class].first;
    }
    return out;
}

RetrievalSet balance_by_label(const RetrievalSet& labeled, const KeywordSpec& spec,
                              std::size_t target_per_class, BalancePolicy policy) {
    if (target_per_class == 0)
        throw std::invalid_argument("balance_by_label: target must be positive");
    // group members by spec class, preserving rank order within each class
    std::unordered_map<std::string, std::vector<const RetrievalMember*>> groups;
    for (const auto& [cls, kws] : spec.class_keywords) groups.emplace(cls, std::vector<const RetrievalMember*>{});
    for (const RetrievalMember& m : labeled.members) {
        if (!m.label)
            throw std::invalid_argument("balance_by_label: unlabeled member '" + m.id + "'");
        auto it = groups.find(*m.label);
        if (it == groups.end())
            throw std::invalid_argument("balance_by_label: label '" + *m.label +
                                        "' not in spec");
        it->second.push_back(&m);
    }

    RetrievalSet out;
    out.mode = labeled.mode;
    for (const auto& [cls, kws] : spec.class_keywords) {
        const auto& group = groups[cls];
        if (policy == BalancePolicy::truncate) {
            const std::size_t keep = std::min(target_per_class, group.size());
            for (std::size_t i = 0; i < keep; ++i) out.members.push_back(*group[i]);
        } else {
            if (group.empty())
                throw std::invalid_argument("balance_by_label: empty class " + cls);
            for (std::size_t i = 0; i < target_per_class; ++i)
                out.members.push_back(*group[i % group.size()]);
        }
    }
    return out;
}

}  // namespace vlmadapt
