#include "vlmadapt/zeroshot.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace vlmadapt {

using ordered_json = nlohmann::ordered_json;

void PromptBank::validate() const {
    if (templates.empty()) throw std::invalid_argument("prompt bank: no templates");
    for (const std::string& t : templates) {
        const std::size_t first = t.find("{}");
        if (first == std::string::npos || t.find("{}", first + 1) != std::string::npos)
            throw std::invalid_argument("prompt bank: template '" + t +
                                        "' must contain exactly one {} slot");
    }
    if (classes.empty()) throw std::invalid_argument("prompt bank: no classes");
    for (const auto& [cls, descriptions] : classes) {
        if (cls.empty()) throw std::invalid_argument("prompt bank: empty class name");
        if (descriptions.empty())
            throw std::invalid_argument("prompt bank: class '" + cls + "' has no descriptions");
    }
}

PromptBank load_prompt_bank(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_prompt_bank: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    PromptBank bank;
    for (const auto& t : j.at("templates")) bank.templates.push_back(t.get<std::string>());
    for (const auto& [cls, descs] : j.at("classnames").items()) {
        std::vector<std::string> list;
        for (const auto& d : descs) list.push_back(d.get<std::string>());
        bank.classes.emplace_back(cls, std::move(list));
    }
    bank.validate();
    return bank;
}

void save_prompt_bank(const std::string& path, const PromptBank& bank) {
    ordered_json j;
    j["templates"] = bank.templates;
    ordered_json classnames = ordered_json::object();
    for (const auto& [cls, descs] : bank.classes) classnames[cls] = descs;
    j["classnames"] = std::move(classnames);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_prompt_bank: cannot open " + path);
    out << j.dump(2) << "\n";
}

std::string render_template(const std::string& templ, const std::string& description) {
    const std::size_t slot = templ.find("{}");
    if (slot == std::string::npos)
        throw std::invalid_argument("render_template: no {} slot in '" + templ + "'");
    std::string out = templ;
    out.replace(slot, 2, description);
    return out;
}

std::vector<Tensor> build_class_embeddings(const DualEncoderModel& model,
                                           const PromptBank& bank) {
    bank.validate();
    std::vector<Tensor> out;
    out.reserve(bank.classes.size());
    const std::size_t d = model.config.d_emb;
    for (const auto& [cls, descriptions] : bank.classes) {
        std::vector<double> mean(d, 0.0);
        std::size_t count = 0;
        for (const std::string& templ : bank.templates) {
            for (const std::string& desc : descriptions) {
                const std::string prompt = render_template(templ, desc);
                const Tensor e =
                    encode_text(model, tokenize(prompt, model.vocab, model.config.max_len));
                for (std::size_t i = 0; i < d; ++i) mean[i] += e.values[i];
                ++count;
            }
        }
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mean[i] /= static_cast<double>(count);
            norm_sq += mean[i] * mean[i];
        }
        const double norm = std::sqrt(norm_sq);
        if (norm == 0.0)
            throw std::invalid_argument("build_class_embeddings: ensemble for class '" + cls +
                                        "' has zero norm");
        for (std::size_t i = 0; i < d; ++i) mean[i] /= norm;
        out.push_back(Tensor::row_vector(std::move(mean)));
    }
    return out;
}

ZeroShotResult classify_embedding(const Tensor& image_embedding,
                                  const std::vector<Tensor>& class_embeddings) {
    if (class_embeddings.size() < 2)
        throw std::invalid_argument("classify_zero_shot: at least 2 classes required");
    ZeroShotResult r;
    r.scores.reserve(class_embeddings.size());
    for (const Tensor& c : class_embeddings)
        r.scores.push_back(alignment_score(image_embedding, c));
    r.predicted = 0;
    for (std::size_t k = 1; k < r.scores.size(); ++k)
        if (r.scores[k] > r.scores[r.predicted]) r.predicted = k;
    return r;
}

ZeroShotResult classify_zero_shot(const DualEncoderModel& model, const Image& image,
                                  const std::vector<Tensor>& class_embeddings) {
    return classify_embedding(encode_image(model, image), class_embeddings);
}

}  // namespace vlmadapt
