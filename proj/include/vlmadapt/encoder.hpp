#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlmadapt/corpus.hpp"
#include "vlmadapt/tensor.hpp"

namespace vlmadapt {

struct Vocabulary {
    static constexpr std::size_t pad_id = 0;
    static constexpr std::size_t unk_id = 1;
    static constexpr std::size_t class_slot_id = 2;

    std::vector<std::string> tokens;  // index = id, first three reserved
    std::unordered_map<std::string, std::size_t> ids;

    // sorted unique words after the reserved entries
    static Vocabulary build(std::vector<std::string> words);
    std::size_t lookup(const std::string& word) const;  // unk_id when absent
    std::size_t size() const { return tokens.size(); }
    bool contains(const std::string& word) const { return ids.count(word) != 0; }
};

struct EncoderConfig {
    std::size_t d_tok = 32;
    std::size_t hidden = 64;
    std::size_t d_emb = 64;
    std::size_t image_h = 12, image_w = 12, image_c = 3;
    std::size_t max_len = 16;
    double norm_floor = 1e-12;
    std::uint64_t init_seed = 0;

    std::size_t image_dim() const { return image_h * image_w * image_c; }
};

// y = x W + b, weight stored in x out
struct DenseLayer {
    Tensor weight;
    Tensor bias;

    // low-rank overlay: effective map adds (alpha/rank) * x A^T B^T
    struct Lora {
        Tensor a;  // rank x in, random init
        Tensor b;  // out x rank, zero init
        std::size_t rank = 0;
        double alpha = 1.0;
    };
    std::optional<Lora> lora;

    std::size_t in_dim() const { return weight.shape[0]; }
    std::size_t out_dim() const { return weight.shape[1]; }
};

enum class LoraTarget { projections_only, all_dense };
enum class UpdateMode { full, lora };

// Toy dual encoder. Text branch: token embedding, masked mean pool over
// non-pad tokens, two tanh feedforward blocks, linear projection, L2
// normalization. Image branch: flattened pixels through the same block
// structure. Both land in the shared d_emb-dimensional unit sphere.
struct DualEncoderModel {
    EncoderConfig config;
    Vocabulary vocab;
    Tensor token_embedding;  // vocab x d_tok
    DenseLayer text_block1, text_block2, text_proj;
    DenseLayer image_block1, image_block2, image_proj;
    std::optional<LoraTarget> lora_target;

    static DualEncoderModel init(const EncoderConfig& config, Vocabulary vocab);

    std::vector<DenseLayer*> dense_layers();
    std::vector<const DenseLayer*> dense_layers() const;
    std::vector<Tensor*> trainable_parameters(UpdateMode mode);
    std::vector<const Tensor*> base_parameters() const;  // excludes overlays

    std::uint64_t config_fingerprint() const;  // architecture + vocabulary
    std::uint64_t param_hash() const;          // every stored value
};

// normalize, split, map through the vocabulary (unknown -> unk), pad or
// truncate to max_len with pad
std::vector<std::size_t> tokenize(const std::string& caption, const Vocabulary& vocab,
                                  std::size_t max_len);
// content ids only, no padding (CoOp class tokens)
std::vector<std::size_t> tokenize_content(const std::string& text, const Vocabulary& vocab);

Tensor encode_text(const DualEncoderModel& model, const std::vector<std::size_t>& tokens);
Tensor encode_image(const DualEncoderModel& model, const Image& image);

// Eq.-style cosine alignment of two unit vectors; exact dot product
double alignment_score(const Tensor& x, const Tensor& y);

// score every member with the model, sort by score descending, record id
// ascending on ties
RetrievalSet rank_pairs(const RetrievalSet& retrieval, const Corpus& corpus,
                        const DualEncoderModel& scorer);

void lora_inject(DualEncoderModel& model, LoraTarget target, std::size_t rank, double alpha,
                 std::uint64_t seed);
void lora_merge(DualEncoderModel& model);

void save_checkpoint(const std::string& path, const DualEncoderModel& model);
DualEncoderModel load_checkpoint(const std::string& path);

enum class BindMode { frozen, train_full, train_lora };

// Registers a model's tensors as tape leaves and builds encoder graphs on
// them. One binding per tape; the trainable() mapping feeds the optimizer.
class ModelBinding {
public:
    ModelBinding(Tape& tape, const DualEncoderModel& model, BindMode mode);

    // pooled token rows -> blocks -> projection -> unit rows
    Tape::NodeId encode_text_batch(const std::vector<std::vector<std::size_t>>& token_rows);
    Tape::NodeId encode_image_batch(Tensor images_flat);  // N x image_dim constant

    // CoOp path: rows are token-space vectors (context ++ class tokens)
    Tape::NodeId embedding_rows(const std::vector<std::size_t>& content_ids);
    Tape::NodeId mean_pool_rows(Tape::NodeId rows);
    Tape::NodeId text_tower(Tape::NodeId pooled);   // pooled: N x d_tok
    Tape::NodeId image_tower(Tape::NodeId pixels);  // N x image_dim

    struct ParamRef {
        Tensor* tensor;       // model tensor the leaf mirrors
        Tape::NodeId node;
    };
    const std::vector<ParamRef>& trainable() const { return trainable_; }

private:
    struct BoundLayer {
        Tape::NodeId weight, bias;
        Tape::NodeId lora_a = -1, lora_b = -1;
        double lora_scale = 0.0;
    };

    Tape& tape_;
    const DualEncoderModel& model_;
    Tape::NodeId embedding_;
    BoundLayer text1_, text2_, text_proj_, img1_, img2_, img_proj_;
    std::vector<ParamRef> trainable_;

    BoundLayer bind_layer(const DenseLayer& layer, bool train_base, bool train_lora,
                          Tensor* weight_slot, Tensor* bias_slot, DenseLayer::Lora* lora_slot);
    Tape::NodeId dense(Tape::NodeId x, const BoundLayer& layer);
};

}  // namespace vlmadapt
