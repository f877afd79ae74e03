#include "vlmadapt/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "vlmadapt/kernels.hpp"
#include "vlmadapt/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlmadapt {

using ordered_json = nlohmann::ordered_json;

Vocabulary Vocabulary::build(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    Vocabulary v;
    v.tokens = {"<pad>", "<unk>", "<class>"};
    for (std::string& w : words) {
        if (w.empty() || w == "<pad>" || w == "<unk>" || w == "<class>") continue;
        v.tokens.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < v.tokens.size(); ++i) v.ids.emplace(v.tokens[i], i);
    return v;
}

std::size_t Vocabulary::lookup(const std::string& word) const {
    auto it = ids.find(word);
    return it == ids.end() ? unk_id : it->second;
}

namespace {

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::matrix(rows, cols, std::move(v));
}

Tensor random_vector(Rng& rng, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::row_vector(std::move(v));
}

DenseLayer init_layer(Rng& rng, std::size_t in, std::size_t out) {
    DenseLayer l;
    l.weight = random_matrix(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    // nonzero biases keep all-zero inputs away from the normalization floor
    l.bias = random_vector(rng, out, 0.05);
    return l;
}

void hash_tensor(std::uint64_t& h, const Tensor& t) {
    for (std::size_t d : t.shape) {
        const auto v = static_cast<std::uint64_t>(d);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
    }
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.values.data()),
                               t.values.size() * sizeof(double)),
              h);
}

constexpr const char* kLayerNames[6] = {"text_block1", "text_block2", "text_proj",
                                        "image_block1", "image_block2", "image_proj"};

}  // namespace

DualEncoderModel DualEncoderModel::init(const EncoderConfig& config, Vocabulary vocab) {
    if (vocab.size() < 4) throw std::invalid_argument("model init: vocabulary too small");
    DualEncoderModel m;
    m.config = config;
    m.vocab = std::move(vocab);
    Rng rng(config.init_seed);
    m.token_embedding = random_matrix(rng, m.vocab.size(), config.d_tok, 0.1);
    m.text_block1 = init_layer(rng, config.d_tok, config.hidden);
    m.text_block2 = init_layer(rng, config.hidden, config.hidden);
    m.text_proj = init_layer(rng, config.hidden, config.d_emb);
    m.image_block1 = init_layer(rng, config.image_dim(), config.hidden);
    m.image_block2 = init_layer(rng, config.hidden, config.hidden);
    m.image_proj = init_layer(rng, config.hidden, config.d_emb);
    return m;
}

std::vector<DenseLayer*> DualEncoderModel::dense_layers() {
    return {&text_block1, &text_block2, &text_proj, &image_block1, &image_block2, &image_proj};
}

std::vector<const DenseLayer*> DualEncoderModel::dense_layers() const {
    return {&text_block1, &text_block2, &text_proj, &image_block1, &image_block2, &image_proj};
}

std::vector<Tensor*> DualEncoderModel::trainable_parameters(UpdateMode mode) {
    std::vector<Tensor*> params;
    if (mode == UpdateMode::full) {
        if (lora_target)
            throw std::invalid_argument("full update with an active LoRA overlay; merge first");
        params.push_back(&token_embedding);
        for (DenseLayer* l : dense_layers()) {
            params.push_back(&l->weight);
            params.push_back(&l->bias);
        }
    } else {
        if (!lora_target) throw std::invalid_argument("lora update without injected overlay");
        for (DenseLayer* l : dense_layers()) {
            if (!l->lora) continue;
            params.push_back(&l->lora->a);
            params.push_back(&l->lora->b);
        }
    }
    return params;
}

std::vector<const Tensor*> DualEncoderModel::base_parameters() const {
    std::vector<const Tensor*> params{&token_embedding};
    for (const DenseLayer* l : dense_layers()) {
        params.push_back(&l->weight);
        params.push_back(&l->bias);
    }
    return params;
}

std::uint64_t DualEncoderModel::config_fingerprint() const {
    std::string s = "d_tok=" + std::to_string(config.d_tok) +
                    ";hidden=" + std::to_string(config.hidden) +
                    ";d_emb=" + std::to_string(config.d_emb) +
                    ";image=" + std::to_string(config.image_h) + "x" +
                    std::to_string(config.image_w) + "x" + std::to_string(config.image_c) +
                    ";max_len=" + std::to_string(config.max_len) +
                    ";seed=" + std::to_string(config.init_seed) + ";vocab=";
    std::uint64_t h = fnv1a(s);
    for (const std::string& t : vocab.tokens) h = fnv1a(t + "\x1f", h);
    return h;
}

std::uint64_t DualEncoderModel::param_hash() const {
    std::uint64_t h = config_fingerprint();
    hash_tensor(h, token_embedding);
    for (const DenseLayer* l : dense_layers()) {
        hash_tensor(h, l->weight);
        hash_tensor(h, l->bias);
        if (l->lora) {
            hash_tensor(h, l->lora->a);
            hash_tensor(h, l->lora->b);
        }
    }
    return h;
}

std::vector<std::size_t> tokenize(const std::string& caption, const Vocabulary& vocab,
                                  std::size_t max_len) {
    if (max_len == 0) throw std::invalid_argument("tokenize: max_len must be positive");
    std::vector<std::size_t> ids = tokenize_content(caption, vocab);
    ids.resize(std::min(ids.size(), max_len));
    while (ids.size() < max_len) ids.push_back(Vocabulary::pad_id);
    return ids;
}

std::vector<std::size_t> tokenize_content(const std::string& text, const Vocabulary& vocab) {
    std::vector<std::size_t> ids;
    for (const std::string& w : split_words(normalize_text(text))) ids.push_back(vocab.lookup(w));
    return ids;
}

ModelBinding::ModelBinding(Tape& tape, const DualEncoderModel& model, BindMode mode)
    : tape_(tape), model_(model) {
    tape_.set_norm_floor(model.config.norm_floor);
    const bool train_base = mode == BindMode::train_full;
    const bool train_lora = mode == BindMode::train_lora;
    if (train_base && model.lora_target)
        throw std::invalid_argument("full update with an active LoRA overlay; merge first");

    // train modes require the caller's model to be mutable; the binding only
    // hands the pointers to the optimizer
    auto* mutable_model = const_cast<DualEncoderModel*>(&model_);

    Tensor emb = model.token_embedding;
    emb.requires_grad = train_base;
    embedding_ = tape_.input(std::move(emb));
    if (train_base) trainable_.push_back({&mutable_model->token_embedding, embedding_});

    auto mutable_layers = mutable_model->dense_layers();
    auto layers = model.dense_layers();
    BoundLayer* bound[6] = {&text1_, &text2_, &text_proj_, &img1_, &img2_, &img_proj_};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        DenseLayer* slot = mutable_layers[i];
        *bound[i] = bind_layer(*layers[i], train_base, train_lora, &slot->weight, &slot->bias,
                               slot->lora ? &*slot->lora : nullptr);
    }
}

ModelBinding::BoundLayer ModelBinding::bind_layer(const DenseLayer& layer, bool train_base,
                                                  bool train_lora, Tensor* weight_slot,
                                                  Tensor* bias_slot,
                                                  DenseLayer::Lora* lora_slot) {
    BoundLayer b;
    Tensor w = layer.weight;
    w.requires_grad = train_base;
    b.weight = tape_.input(std::move(w));
    Tensor bias = layer.bias;
    bias.requires_grad = train_base;
    b.bias = tape_.input(std::move(bias));
    if (train_base) {
        trainable_.push_back({weight_slot, b.weight});
        trainable_.push_back({bias_slot, b.bias});
    }
    if (layer.lora) {
        const bool t = train_lora;
        Tensor a = layer.lora->a;
        a.requires_grad = t;
        b.lora_a = tape_.input(std::move(a));
        Tensor bb = layer.lora->b;
        bb.requires_grad = t;
        b.lora_b = tape_.input(std::move(bb));
        b.lora_scale = layer.lora->alpha / static_cast<double>(layer.lora->rank);
        if (t && lora_slot) {
            trainable_.push_back({&lora_slot->a, b.lora_a});
            trainable_.push_back({&lora_slot->b, b.lora_b});
        }
    }
    return b;
}

Tape::NodeId ModelBinding::dense(Tape::NodeId x, const BoundLayer& layer) {
    Tape::NodeId y = tape_.add(tape_.matmul(x, layer.weight), layer.bias);
    if (layer.lora_a >= 0) {
        Tape::NodeId down = tape_.matmul(x, layer.lora_a, false, true);
        Tape::NodeId up = tape_.matmul(down, layer.lora_b, false, true);
        y = tape_.add(y, tape_.scale(up, layer.lora_scale));
    }
    return y;
}

Tape::NodeId ModelBinding::embedding_rows(const std::vector<std::size_t>& content_ids) {
    return tape_.index_select(embedding_, content_ids);
}

Tape::NodeId ModelBinding::mean_pool_rows(Tape::NodeId rows) {
    const std::size_t n = tape_.value(rows).rows();
    Tensor weights = Tensor::matrix(1, n, std::vector<double>(n, 1.0 / static_cast<double>(n)));
    return tape_.matmul(tape_.constant(std::move(weights)), rows);
}

Tape::NodeId ModelBinding::text_tower(Tape::NodeId pooled) {
    Tape::NodeId h1 = tape_.tanh_fn(dense(pooled, text1_));
    Tape::NodeId h2 = tape_.tanh_fn(dense(h1, text2_));
    return tape_.l2_normalize(dense(h2, text_proj_));
}

Tape::NodeId ModelBinding::image_tower(Tape::NodeId pixels) {
    Tape::NodeId h1 = tape_.tanh_fn(dense(pixels, img1_));
    Tape::NodeId h2 = tape_.tanh_fn(dense(h1, img2_));
    return tape_.l2_normalize(dense(h2, img_proj_));
}

Tape::NodeId ModelBinding::encode_text_batch(
    const std::vector<std::vector<std::size_t>>& token_rows) {
    if (token_rows.empty()) throw std::invalid_argument("encode_text_batch: empty batch");
    std::vector<Tape::NodeId> pooled;
    pooled.reserve(token_rows.size());
    for (const auto& tokens : token_rows) {
        std::vector<std::size_t> content;
        for (std::size_t id : tokens)
            if (id != Vocabulary::pad_id) content.push_back(id);
        if (content.empty())
            throw std::invalid_argument("encode_text: no non-padding tokens");
        pooled.push_back(mean_pool_rows(embedding_rows(content)));
    }
    Tape::NodeId stacked = pooled.size() == 1 ? pooled[0] : tape_.concat_rows(pooled);
    return text_tower(stacked);
}

Tape::NodeId ModelBinding::encode_image_batch(Tensor images_flat) {
    if (images_flat.rank() != 2 || images_flat.shape[1] != model_.config.image_dim())
        throw ShapeError("encode_image_batch: rows of image_dim values required");
    return image_tower(tape_.constant(std::move(images_flat)));
}

Tensor encode_text(const DualEncoderModel& model, const std::vector<std::size_t>& tokens) {
    if (tokens.size() != model.config.max_len)
        throw std::invalid_argument("encode_text: token sequence must have length max_len");
    for (std::size_t id : tokens)
        if (id >= model.vocab.size())
            throw std::invalid_argument("encode_text: token id out of range");
    Tape tape;
    ModelBinding binding(tape, model, BindMode::frozen);
    Tape::NodeId out = binding.encode_text_batch({tokens});
    return Tensor::row_vector(tape.value(out).values);
}

Tensor encode_image(const DualEncoderModel& model, const Image& image) {
    const EncoderConfig& c = model.config;
    if (image.height != c.image_h || image.width != c.image_w || image.channels != c.image_c)
        throw ShapeError("encode_image: image dimensions do not match model config");
    Tape tape;
    ModelBinding binding(tape, model, BindMode::frozen);
    Tensor flat = Tensor::matrix(1, c.image_dim(), image.values);
    Tape::NodeId out = binding.encode_image_batch(std::move(flat));
    return Tensor::row_vector(tape.value(out).values);
}

double alignment_score(const Tensor& x, const Tensor& y) {
    if (x.size() != y.size()) throw ShapeError("alignment_score: dimension mismatch");
    auto check_unit = [](const Tensor& t, const char* name) {
        double sq = 0.0;
        for (double v : t.values) sq += v * v;
        if (std::fabs(std::sqrt(sq) - 1.0) > 1e-6)
            throw std::invalid_argument(std::string("alignment_score: ") + name +
                                        " is not unit-norm");
    };
    check_unit(x, "x");
    check_unit(y, "y");
    return kernels::dot(x.values.data(), y.values.data(), x.size());
}

RetrievalSet rank_pairs(const RetrievalSet& retrieval, const Corpus& corpus,
                        const DualEncoderModel& scorer) {
    // fail fast on missing records, before spending any encoding work
    for (const RetrievalMember& m : retrieval.members) corpus.by_id(m.id);

    RetrievalSet out = retrieval;
    const std::int64_t n = static_cast<std::int64_t>(out.members.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t i = 0; i < n; ++i) {
        RetrievalMember& m = out.members[static_cast<std::size_t>(i)];
        const CaptionRecord& rec = corpus.by_id(m.id);
        const Tensor ei = encode_image(scorer, rec.image);
        const Tensor et =
            encode_text(scorer, tokenize(rec.caption, scorer.vocab, scorer.config.max_len));
        m.score = alignment_score(ei, et);
    }
    std::stable_sort(out.members.begin(), out.members.end(),
                     [](const RetrievalMember& a, const RetrievalMember& b) {
                         if (*a.score != *b.score) return *a.score > *b.score;
                         return a.id < b.id;
                     });
    return out;
}

void lora_inject(DualEncoderModel& model, LoraTarget target, std::size_t rank, double alpha,
                 std::uint64_t seed) {
    if (model.lora_target) throw std::invalid_argument("lora_inject: overlay already active");
    if (rank == 0) throw std::invalid_argument("lora_inject: rank must be >= 1");
    std::vector<DenseLayer*> layers;
    if (target == LoraTarget::projections_only)
        layers = {&model.text_proj, &model.image_proj};
    else
        layers = model.dense_layers();
    for (DenseLayer* l : layers) {
        if (rank > std::min(l->in_dim(), l->out_dim()))
            throw std::invalid_argument("lora_inject: rank exceeds layer dimensions");
    }
    Rng rng(seed);
    for (DenseLayer* l : layers) {
        DenseLayer::Lora lora;
        lora.rank = rank;
        lora.alpha = alpha;
        lora.a = random_matrix(rng, rank, l->in_dim(), 0.02);
        lora.b = Tensor::zeros({l->out_dim(), rank});
        l->lora = std::move(lora);
    }
    model.lora_target = target;
}

void lora_merge(DualEncoderModel& model) {
    if (!model.lora_target) throw std::invalid_argument("lora_merge: no overlay active");
    for (DenseLayer* l : model.dense_layers()) {
        if (!l->lora) continue;
        const DenseLayer::Lora& lo = *l->lora;
        const double s = lo.alpha / static_cast<double>(lo.rank);
        const std::size_t in = l->in_dim(), out = l->out_dim(), r = lo.rank;
        // W += s * A^T B^T
        for (std::size_t i = 0; i < in; ++i) {
            for (std::size_t j = 0; j < out; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < r; ++t) acc += lo.a.at(t, i) * lo.b.at(j, t);
                l->weight.at(i, j) += s * acc;
            }
        }
        l->lora.reset();
    }
    model.lora_target.reset();
}

namespace {

ordered_json tensor_to_json(const Tensor& t) {
    ordered_json j;
    j["shape"] = t.shape;
    j["values"] = t.values;
    return j;
}

Tensor tensor_from_json(const ordered_json& j) {
    std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
    std::vector<double> values = j.at("values").get<std::vector<double>>();
    return Tensor(std::move(shape), std::move(values));
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const DualEncoderModel& model) {
    ordered_json j;
    j["format"] = "vlmadapt-checkpoint-v1";
    const EncoderConfig& c = model.config;
    j["config"] = {{"d_tok", c.d_tok},       {"hidden", c.hidden},
                   {"d_emb", c.d_emb},       {"image_h", c.image_h},
                   {"image_w", c.image_w},   {"image_c", c.image_c},
                   {"max_len", c.max_len},   {"norm_floor", c.norm_floor},
                   {"init_seed", c.init_seed}};
    j["config_fingerprint"] = hex64(model.config_fingerprint());
    j["vocab"] = model.vocab.tokens;
    ordered_json params;
    params["token_embedding"] = tensor_to_json(model.token_embedding);
    auto layers = model.dense_layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        params[std::string(kLayerNames[i]) + ".weight"] = tensor_to_json(layers[i]->weight);
        params[std::string(kLayerNames[i]) + ".bias"] = tensor_to_json(layers[i]->bias);
    }
    j["params"] = std::move(params);
    if (model.lora_target) {
        ordered_json lj;
        lj["target"] = *model.lora_target == LoraTarget::projections_only ? "projections_only"
                                                                          : "all_dense";
        ordered_json lora_layers;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (!layers[i]->lora) continue;
            const DenseLayer::Lora& lo = *layers[i]->lora;
            ordered_json e;
            e["rank"] = lo.rank;
            e["alpha"] = lo.alpha;
            e["a"] = tensor_to_json(lo.a);
            e["b"] = tensor_to_json(lo.b);
            lora_layers[kLayerNames[i]] = std::move(e);
        }
        lj["layers"] = std::move(lora_layers);
        j["lora"] = std::move(lj);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << j.dump() << "\n";
}

DualEncoderModel load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    if (j.at("format").get<std::string>() != "vlmadapt-checkpoint-v1")
        throw std::runtime_error("load_checkpoint: unknown format in " + path);

    DualEncoderModel m;
    const ordered_json& cj = j.at("config");
    m.config.d_tok = cj.at("d_tok").get<std::size_t>();
    m.config.hidden = cj.at("hidden").get<std::size_t>();
    m.config.d_emb = cj.at("d_emb").get<std::size_t>();
    m.config.image_h = cj.at("image_h").get<std::size_t>();
    m.config.image_w = cj.at("image_w").get<std::size_t>();
    m.config.image_c = cj.at("image_c").get<std::size_t>();
    m.config.max_len = cj.at("max_len").get<std::size_t>();
    m.config.norm_floor = cj.at("norm_floor").get<double>();
    m.config.init_seed = cj.at("init_seed").get<std::uint64_t>();

    m.vocab.tokens = j.at("vocab").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < m.vocab.tokens.size(); ++i)
        m.vocab.ids.emplace(m.vocab.tokens[i], i);

    const ordered_json& params = j.at("params");
    m.token_embedding = tensor_from_json(params.at("token_embedding"));
    auto layers = m.dense_layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i]->weight = tensor_from_json(params.at(std::string(kLayerNames[i]) + ".weight"));
        layers[i]->bias = tensor_from_json(params.at(std::string(kLayerNames[i]) + ".bias"));
    }
    if (j.contains("lora") && !j["lora"].is_null()) {
        const ordered_json& lj = j["lora"];
        m.lora_target = lj.at("target").get<std::string>() == "all_dense"
                            ? LoraTarget::all_dense
                            : LoraTarget::projections_only;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (!lj.at("layers").contains(kLayerNames[i])) continue;
            const ordered_json& e = lj.at("layers").at(kLayerNames[i]);
            DenseLayer::Lora lo;
            lo.rank = e.at("rank").get<std::size_t>();
            lo.alpha = e.at("alpha").get<double>();
            lo.a = tensor_from_json(e.at("a"));
            lo.b = tensor_from_json(e.at("b"));
            layers[i]->lora = std::move(lo);
        }
    }
    if (j.at("config_fingerprint").get<std::string>() != hex64(m.config_fingerprint()))
        throw std::runtime_error("load_checkpoint: fingerprint mismatch in " + path);
    return m;
}

}  // namespace vlmadapt
