#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/encoder.hpp"
#include "vlmadapt/pretrain.hpp"
#include "vlmadapt/tensor.hpp"

namespace vlmadapt {

enum class ContextMode { unified, csc };

// Learnable prompt context: M token-space vectors prepended to the class
// tokens. unified shares one context across classes, csc keeps one per
// class.
struct PromptContext {
    ContextMode mode = ContextMode::unified;
    std::size_t length = 4;
    std::uint64_t seed = 0;
    std::vector<Tensor> vectors;  // unified: one M x d_tok block; csc: one per class

    std::size_t parameter_count() const;
};

// vectors drawn i.i.d. Gaussian(0, 0.02^2), deterministic per seed
PromptContext init_context(ContextMode mode, std::size_t length, std::size_t num_classes,
                           std::uint64_t seed, std::size_t d_tok);

void save_context(const std::string& path, const PromptContext& context);
PromptContext load_context(const std::string& path);

struct FewShotSet {
    std::size_t shots = 1;
    std::uint64_t seed = 0;
    std::vector<std::string> classes;
    std::vector<LabeledImage> items;  // exactly shots per class, class-major
};

// uniform sample without replacement per class
FewShotSet sample_few_shot(const TaskDataset& dataset, std::size_t shots, std::uint64_t seed);

// class names whose words fall outside the model vocabulary (callers warn)
std::vector<std::string> unknown_classname_words(const DualEncoderModel& model,
                                                 const std::vector<std::string>& classnames);

// Full CoOp graph on one tape: per class the text tower consumes
// [context rows ++ class-token embedding rows]; logits are
// logit_scale * cosine(image embedding, class embedding). Image embeddings
// come in precomputed since the image branch stays frozen.
struct CoopGraph {
    Tape tape;
    std::vector<Tape::NodeId> context_leaves;  // parallel to context.vectors
    Tape::NodeId logits = -1;                  // batch x classes
    Tape::NodeId loss = -1;                    // set when labels were given
};

CoopGraph build_coop_graph(const DualEncoderModel& model, const PromptContext& context,
                           const Tensor& image_embeddings,
                           const std::vector<std::string>& classnames,
                           const std::vector<std::size_t>& labels, double logit_scale,
                           bool train_context);

// batch x classes logit matrix for a batch of images
Tensor coop_logits(const DualEncoderModel& model, const PromptContext& context,
                   const std::vector<Image>& images,
                   const std::vector<std::string>& classnames, double logit_scale = 100.0);

std::vector<std::size_t> coop_predict(const DualEncoderModel& model,
                                      const PromptContext& context,
                                      const std::vector<Image>& images,
                                      const std::vector<std::string>& classnames,
                                      double logit_scale = 100.0);

struct CoopTrainResult {
    PromptContext context;
    std::vector<double> epoch_loss;
    std::vector<double> epoch_lr;
};

// cross-entropy over coop logits, AdamW with cosine annealing; only the
// context vectors move, the encoders stay bit-identical
CoopTrainResult train_coop(const DualEncoderModel& model, const PromptContext& context,
                           const FewShotSet& few_shot, const TrainConfig& config,
                           double logit_scale = 100.0);

}  // namespace vlmadapt
