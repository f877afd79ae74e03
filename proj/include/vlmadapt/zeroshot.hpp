#pragma once

#include <string>
#include <vector>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/encoder.hpp"
#include "vlmadapt/tensor.hpp"

namespace vlmadapt {

// Prompt ensembling bank: every template has exactly one "{}" slot; each
// class lists one or more alternative descriptions. Class order is the
// classification tie-break order.
struct PromptBank {
    std::vector<std::string> templates;
    std::vector<std::pair<std::string, std::vector<std::string>>> classes;

    void validate() const;
    std::size_t num_classes() const { return classes.size(); }
};

PromptBank load_prompt_bank(const std::string& path);
void save_prompt_bank(const std::string& path, const PromptBank& bank);

std::string render_template(const std::string& templ, const std::string& description);

// per class: encode every template x description string, average the unit
// embeddings, re-normalize; one unit vector per class
std::vector<Tensor> build_class_embeddings(const DualEncoderModel& model,
                                           const PromptBank& bank);

struct ZeroShotResult {
    std::size_t predicted = 0;
    std::vector<double> scores;  // cosine per class
};

// argmax of cosine similarity against the class embeddings; ties resolve
// to the earlier class
ZeroShotResult classify_zero_shot(const DualEncoderModel& model, const Image& image,
                                  const std::vector<Tensor>& class_embeddings);
ZeroShotResult classify_embedding(const Tensor& image_embedding,
                                  const std::vector<Tensor>& class_embeddings);

}  // namespace vlmadapt
