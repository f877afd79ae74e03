#include "vlmadapt/coop.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "vlmadapt/rng.hpp"

namespace vlmadapt {

using ordered_json = nlohmann::ordered_json;

std::size_t PromptContext::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : vectors) n += t.size();
    return n;
}

PromptContext init_context(ContextMode mode, std::size_t length, std::size_t num_classes,
                           std::uint64_t seed, std::size_t d_tok) {
    if (length < 1) throw std::invalid_argument("init_context: context length must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("init_context: num_classes must be >= 1");
    PromptContext ctx;
    ctx.mode = mode;
    ctx.length = length;
    ctx.seed = seed;
    Rng rng(seed);
    const std::size_t blocks = mode == ContextMode::csc ? num_classes : 1;
    for (std::size_t b = 0; b < blocks; ++b) {
        std::vector<double> v(length * d_tok);
        for (double& x : v) x = rng.normal(0.0, 0.02);
        ctx.vectors.push_back(Tensor::matrix(length, d_tok, std::move(v)));
    }
    return ctx;
}

void save_context(const std::string& path, const PromptContext& context) {
    ordered_json j;
    j["mode"] = context.mode == ContextMode::csc ? "csc" : "unified";
    j["length"] = context.length;
    j["seed"] = context.seed;
    ordered_json blocks = ordered_json::array();
    for (const Tensor& t : context.vectors) {
        ordered_json b;
        b["shape"] = t.shape;
        b["values"] = t.values;
        blocks.push_back(std::move(b));
    }
    j["vectors"] = std::move(blocks);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_context: cannot open " + path);
    out << j.dump() << "\n";
}

PromptContext load_context(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_context: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    PromptContext ctx;
    ctx.mode = j.at("mode").get<std::string>() == "csc" ? ContextMode::csc
                                                        : ContextMode::unified;
    ctx.length = j.at("length").get<std::size_t>();
    ctx.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& b : j.at("vectors")) {
        ctx.vectors.emplace_back(b.at("shape").get<std::vector<std::size_t>>(),
                                 b.at("values").get<std::vector<double>>());
    }
    return ctx;
}

FewShotSet sample_few_shot(const TaskDataset& dataset, std::size_t shots, std::uint64_t seed) {
    dataset.validate();
    if (shots < 1) throw std::invalid_argument("sample_few_shot: shots must be >= 1");
    FewShotSet set;
    set.shots = shots;
    set.seed = seed;
    set.classes = dataset.classes;
    Rng master(seed);
    for (std::size_t cls = 0; cls < dataset.classes.size(); ++cls) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < dataset.items.size(); ++i)
            if (dataset.items[i].label == cls) pool.push_back(i);
        if (pool.size() < shots)
            throw std::invalid_argument("sample_few_shot: class '" + dataset.classes[cls] +
                                        "' has only " + std::to_string(pool.size()) +
                                        " items, need " + std::to_string(shots));
        Rng rng = master.fork(cls);
        rng.shuffle(pool);
        for (std::size_t i = 0; i < shots; ++i) set.items.push_back(dataset.items[pool[i]]);
    }
    return set;
}

std::vector<std::string> unknown_classname_words(const DualEncoderModel& model,
                                                 const std::vector<std::string>& classnames) {
    std::vector<std::string> unknown;
    for (const std::string& cls : classnames)
        for (const std::string& w : split_words(normalize_text(cls)))
            if (!model.vocab.contains(w)) unknown.push_back(w);
    return unknown;
}

CoopGraph build_coop_graph(const DualEncoderModel& model, const PromptContext& context,
                           const Tensor& image_embeddings,
                           const std::vector<std::string>& classnames,
                           const std::vector<std::size_t>& labels, double logit_scale,
                           bool train_context) {
    if (classnames.empty()) throw std::invalid_argument("coop: no class names");
    if (!(logit_scale > 0.0)) throw std::invalid_argument("coop: logit scale must be > 0");
    if (context.mode == ContextMode::csc && context.vectors.size() != classnames.size())
        throw std::invalid_argument("coop: csc context block count must equal class count");
    for (const Tensor& v : context.vectors)
        if (v.rank() != 2 || v.shape[1] != model.config.d_tok)
            throw ShapeError("coop: context vectors must be M x d_tok");

    CoopGraph g;
    ModelBinding binding(g.tape, model, BindMode::frozen);

    for (const Tensor& v : context.vectors) {
        Tensor leaf = v;
        leaf.requires_grad = train_context;
        g.context_leaves.push_back(g.tape.input(std::move(leaf)));
    }

    std::vector<Tape::NodeId> class_rows;
    class_rows.reserve(classnames.size());
    for (std::size_t cls = 0; cls < classnames.size(); ++cls) {
        const Tape::NodeId ctx =
            g.context_leaves[context.mode == ContextMode::csc ? cls : 0];
        const std::vector<std::size_t> tokens = tokenize_content(classnames[cls], model.vocab);
        Tape::NodeId rows = tokens.empty()
                                ? ctx
                                : g.tape.concat_rows({ctx, binding.embedding_rows(tokens)});
        class_rows.push_back(binding.text_tower(binding.mean_pool_rows(rows)));
    }
    Tape::NodeId class_matrix =
        class_rows.size() == 1 ? class_rows[0] : g.tape.concat_rows(class_rows);

    Tensor images = image_embeddings;
    if (images.rank() == 1) images = Tensor::matrix(1, images.size(), images.values);
    Tape::NodeId image_const = g.tape.constant(std::move(images));
    g.logits = g.tape.scale(g.tape.matmul(image_const, class_matrix, false, true), logit_scale);

    if (!labels.empty()) {
        if (labels.size() != g.tape.value(g.logits).rows())
            throw std::invalid_argument("coop: one label per image required");
        g.loss = g.tape.softmax_cross_entropy(g.logits, labels);
    }
    return g;
}

namespace {

Tensor embed_images(const DualEncoderModel& model, const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("coop: empty image batch");
    const std::size_t d = model.config.d_emb;
    Tensor out = Tensor::zeros({images.size(), d});
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Tensor e = encode_image(model, images[i]);
        std::copy(e.values.begin(), e.values.end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return out;
}

}  // namespace

Tensor coop_logits(const DualEncoderModel& model, const PromptContext& context,
                   const std::vector<Image>& images,
                   const std::vector<std::string>& classnames, double logit_scale) {
    CoopGraph g = build_coop_graph(model, context, embed_images(model, images), classnames, {},
                                   logit_scale, false);
    return g.tape.value(g.logits);
}

std::vector<std::size_t> coop_predict(const DualEncoderModel& model,
                                      const PromptContext& context,
                                      const std::vector<Image>& images,
                                      const std::vector<std::string>& classnames,
                                      double logit_scale) {
    const Tensor logits = coop_logits(model, context, images, classnames, logit_scale);
    std::vector<std::size_t> preds(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.cols(); ++k)
            if (logits.at(i, k) > logits.at(i, best)) best = k;
        preds[i] = best;
    }
    return preds;
}

CoopTrainResult train_coop(const DualEncoderModel& model, const PromptContext& context,
                           const FewShotSet& few_shot, const TrainConfig& config,
                           double logit_scale) {
    if (few_shot.items.empty()) throw std::invalid_argument("train_coop: empty few-shot set");
    if (config.epochs > 0 && !(config.lr > 0.0))
        throw std::invalid_argument("train_coop: learning rate must be > 0");
    if (!(config.batch_size >= 1))
        throw std::invalid_argument("train_coop: batch size must be >= 1");

    CoopTrainResult result;
    result.context = context;

    // frozen encoders: image embeddings never change during training
    std::vector<Image> images;
    std::vector<std::size_t> labels;
    for (const LabeledImage& item : few_shot.items) {
        images.push_back(item.image);
        labels.push_back(item.label);
    }
    const Tensor all_embeddings = embed_images(model, images);
    const std::size_t d = model.config.d_emb;

    std::vector<AdamWState> states(result.context.vectors.size());
    Rng rng(config.seed);
    std::vector<std::size_t> order(few_shot.items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr_t = cosine_lr(config.lr, epoch, config.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, order.size() - start);
            Tensor batch_emb = Tensor::zeros({count, d});
            std::vector<std::size_t> batch_labels(count);
            for (std::size_t b = 0; b < count; ++b) {
                const std::size_t idx = order[start + b];
                std::copy(all_embeddings.values.begin() + static_cast<std::ptrdiff_t>(idx * d),
                          all_embeddings.values.begin() +
                              static_cast<std::ptrdiff_t>((idx + 1) * d),
                          batch_emb.values.begin() + static_cast<std::ptrdiff_t>(b * d));
                batch_labels[b] = labels[idx];
            }
            CoopGraph g = build_coop_graph(model, result.context, batch_emb, few_shot.classes,
                                           batch_labels, logit_scale, true);
            g.tape.backward(g.loss);
            for (std::size_t i = 0; i < result.context.vectors.size(); ++i)
                adamw_step(result.context.vectors[i], g.tape.grad(g.context_leaves[i]),
                           states[i], lr_t, 0.9, 0.999, 1e-8, config.weight_decay);
            loss_sum += g.tape.value(g.loss).values[0];
            ++batches;
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        result.epoch_lr.push_back(lr_t);
    }
    return result;
}

}  // namespace vlmadapt
