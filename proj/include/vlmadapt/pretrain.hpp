#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/encoder.hpp"
#include "vlmadapt/tensor.hpp"

namespace vlmadapt {

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 50;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double temperature = 1.0;  // 1.0 keeps the loss in its plain form
    std::uint64_t seed = 0;
    UpdateMode update_mode = UpdateMode::full;

    void validate() const;
};

struct ShotSpec {
    std::size_t shots = 1;
    std::size_t num_classes = 1;

    std::size_t total() const { return shots * num_classes; }
    void validate() const;
};

// Symmetric dual-encoder contrastive loss over in-batch similarities:
// mean over rows of -log softmax in both the image->text and text->image
// directions, similarities divided by tau before exponentiation. Rows of
// x and y are expected unit-norm (matched pairs share a row index).
double contrastive_loss(const Tensor& image_embeddings, const Tensor& text_embeddings,
                        double tau = 1.0);
Tape::NodeId contrastive_loss_node(Tape& tape, Tape::NodeId image_embeddings,
                                   Tape::NodeId text_embeddings, double tau = 1.0);

// lr0 * 0.5 * (1 + cos(pi * t / total)); t in [0, total]
double cosine_lr(double lr0, std::size_t t, std::size_t total);

struct AdamWState {
    std::size_t step = 0;
    std::vector<double> m, v;
};

// decoupled decay (param -= lr * wd * param) applied before the
// bias-corrected adaptive update
void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, double lr,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0);

struct TrainingPair {
    std::string id;
    std::vector<std::size_t> tokens;
    std::vector<double> image_flat;
};

std::vector<TrainingPair> make_training_pairs(const std::vector<std::string>& ids,
                                              const Corpus& corpus,
                                              const DualEncoderModel& model);

struct SubsetResult {
    std::vector<RetrievalMember> members;
    bool truncated = false;  // fewer pairs available than requested
};

// first shots x num_classes members of a scored, sorted retrieval
SubsetResult select_training_subset(const RetrievalSet& ranked, const ShotSpec& spec);

struct TrainResult {
    DualEncoderModel model;
    std::vector<double> epoch_loss;  // mean batch loss per epoch
    std::vector<double> epoch_lr;
};

// shuffled mini-batches, AdamW with per-epoch cosine annealing; a final
// batch shorter than 2 is dropped; deterministic for a fixed seed
TrainResult train_adapt(const DualEncoderModel& model, const std::vector<TrainingPair>& pairs,
                        const TrainConfig& config);

struct ProbeOutcome {
    double lr = 0.0;
    double wd = 0.0;
    double final_loss = 0.0;
    bool diverged = false;
};

struct TuneResult {
    double lr = 0.0;
    double wd = 0.0;
    std::vector<ProbeOutcome> probes;
};

// short probe per grid point on a clone of the model; the point with the
// smallest final-epoch training loss wins, ties to smaller lr then wd
TuneResult tune_hyperparams(const DualEncoderModel& model,
                            const std::vector<TrainingPair>& pairs,
                            const std::vector<double>& lr_grid,
                            const std::vector<double>& wd_grid, const TrainConfig& base,
                            std::size_t probe_epochs = 5);

void write_loss_trace(const std::string& path, const std::vector<double>& epoch_loss,
                      const std::vector<double>& epoch_lr);

}  // namespace vlmadapt
