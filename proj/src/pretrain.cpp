#include "vlmadapt/pretrain.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "vlmadapt/format.hpp"
#include "vlmadapt/kernels.hpp"
#include "vlmadapt/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlmadapt {

void TrainConfig::validate() const {
    if (batch_size < 2)
        throw std::invalid_argument(
            "train config: contrastive training requires batch size >= 2 "
            "(a single pair has no negatives and zero loss)");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("train config: temperature must be > 0");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("train config: negative weight decay");
}

void ShotSpec::validate() const {
    if (shots < 1 || num_classes < 1)
        throw std::invalid_argument("shot spec: shots and num_classes must be >= 1");
}

namespace {

// mean over rows of -log softmax(row / tau)[row index]
double directional_ce(const Tensor& sim, double tau) {
    const std::size_t n = sim.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = sim.values.data() + i * n;
        double mx = row[0] / tau;
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j] / tau);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) denom += std::exp(row[j] / tau - mx);
        total += mx + std::log(denom) - row[i] / tau;
    }
    return total / static_cast<double>(n);
}

}  // namespace

double contrastive_loss(const Tensor& image_embeddings, const Tensor& text_embeddings,
                        double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
    if (image_embeddings.rows() != text_embeddings.rows())
        throw std::invalid_argument("contrastive_loss: row-count mismatch");
    if (image_embeddings.cols() != text_embeddings.cols())
        throw ShapeError("contrastive_loss: embedding dimensions differ");
    const std::size_t n = image_embeddings.rows();
    const std::size_t d = image_embeddings.cols();

    Tensor sim = Tensor::zeros({n, n});
    kernels::matmul(image_embeddings.values.data(), text_embeddings.values.data(),
                    sim.values.data(), n, d, n, false, true);
    Tensor sim_t = Tensor::zeros({n, n});
    kernels::matmul(text_embeddings.values.data(), image_embeddings.values.data(),
                    sim_t.values.data(), n, d, n, false, true);

    const double loss = directional_ce(sim, tau) + directional_ce(sim_t, tau);
    if (!std::isfinite(loss)) throw NonFiniteError("contrastive_loss: non-finite loss");
    return loss;
}

Tape::NodeId contrastive_loss_node(Tape& tape, Tape::NodeId image_embeddings,
                                   Tape::NodeId text_embeddings, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
    const std::size_t n = tape.value(image_embeddings).rows();
    if (tape.value(text_embeddings).rows() != n)
        throw std::invalid_argument("contrastive_loss: row-count mismatch");
    std::vector<std::size_t> diagonal(n);
    std::iota(diagonal.begin(), diagonal.end(), std::size_t{0});

    Tape::NodeId sim = tape.matmul(image_embeddings, text_embeddings, false, true);
    Tape::NodeId sim_t = tape.matmul(text_embeddings, image_embeddings, false, true);
    if (tau != 1.0) {
        sim = tape.scale(sim, 1.0 / tau);
        sim_t = tape.scale(sim_t, 1.0 / tau);
    }
    Tape::NodeId ce_i2t = tape.softmax_cross_entropy(sim, diagonal);
    Tape::NodeId ce_t2i = tape.softmax_cross_entropy(sim_t, diagonal);
    return tape.add(ce_i2t, ce_t2i);
}

double cosine_lr(double lr0, std::size_t t, std::size_t total) {
    if (total < 1) throw std::invalid_argument("cosine_lr: total must be >= 1");
    if (t > total) throw std::invalid_argument("cosine_lr: t must lie in [0, total]");
    return lr0 * (0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) /
                                        static_cast<double>(total))));
}

void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, double lr, double beta1,
                double beta2, double eps, double weight_decay) {
    if (param.size() != grad.size()) throw ShapeError("adamw_step: param/grad size mismatch");
    if (state.m.size() != param.size()) {
        if (!state.m.empty()) throw ShapeError("adamw_step: state size mismatch");
        state.m.assign(param.size(), 0.0);
        state.v.assign(param.size(), 0.0);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        double p = param.values[i];
        p -= lr * weight_decay * p;  // decoupled decay
        const double g = grad.values[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        p -= lr * m_hat / (std::sqrt(v_hat) + eps);
        if (!std::isfinite(p)) throw NonFiniteError("adamw_step: non-finite update");
        param.values[i] = p;
    }
}

std::vector<TrainingPair> make_training_pairs(const std::vector<std::string>& ids,
                                              const Corpus& corpus,
                                              const DualEncoderModel& model) {
    std::vector<TrainingPair> pairs;
    pairs.reserve(ids.size());
    const EncoderConfig& c = model.config;
    for (const std::string& id : ids) {
        const CaptionRecord& rec = corpus.by_id(id);
        if (rec.image.height != c.image_h || rec.image.width != c.image_w ||
            rec.image.channels != c.image_c)
            throw ShapeError("make_training_pairs: image dimensions do not match model config");
        TrainingPair p;
        p.id = id;
        p.tokens = tokenize(rec.caption, model.vocab, c.max_len);
        p.image_flat = rec.image.values;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

SubsetResult select_training_subset(const RetrievalSet& ranked, const ShotSpec& spec) {
    spec.validate();
    for (std::size_t i = 0; i < ranked.members.size(); ++i) {
        if (!ranked.members[i].score)
            throw std::invalid_argument("select_training_subset: retrieval is not scored");
        if (i > 0 && *ranked.members[i - 1].score < *ranked.members[i].score)
            throw std::invalid_argument("select_training_subset: retrieval is not sorted");
    }
    SubsetResult out;
    const std::size_t want = spec.total();
    const std::size_t take = std::min(want, ranked.members.size());
    out.members.assign(ranked.members.begin(),
                       ranked.members.begin() + static_cast<std::ptrdiff_t>(take));
    out.truncated = take < want;
    return out;
}

TrainResult train_adapt(const DualEncoderModel& model, const std::vector<TrainingPair>& pairs,
                        const TrainConfig& config) {
    config.validate();
    if (pairs.empty()) throw std::invalid_argument("train_adapt: no training pairs");
    if (pairs.size() < 2)
        throw std::invalid_argument(
            "train_adapt: at least 2 pairs required for in-batch negatives");

    TrainResult result;
    result.model = model;
    const BindMode bind_mode =
        config.update_mode == UpdateMode::full ? BindMode::train_full : BindMode::train_lora;
    // probe the trainable set up front so config errors surface before training
    result.model.trainable_parameters(config.update_mode);

    const std::size_t dim = model.config.image_dim();
    std::vector<AdamWState> states;
    Rng rng(config.seed);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr_t = cosine_lr(config.lr, epoch, config.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, order.size() - start);
            if (count < 2) break;  // final short batch with no negatives
            try {
                Tape tape;
                ModelBinding binding(tape, result.model, bind_mode);
                std::vector<std::vector<std::size_t>> token_rows;
                token_rows.reserve(count);
                Tensor images = Tensor::zeros({count, dim});
                for (std::size_t b = 0; b < count; ++b) {
                    const TrainingPair& p = pairs[order[start + b]];
                    token_rows.push_back(p.tokens);
                    std::copy(p.image_flat.begin(), p.image_flat.end(),
                              images.values.begin() + static_cast<std::ptrdiff_t>(b * dim));
                }
                Tape::NodeId text = binding.encode_text_batch(token_rows);
                Tape::NodeId image = binding.encode_image_batch(std::move(images));
                Tape::NodeId loss = contrastive_loss_node(tape, image, text, config.temperature);
                tape.backward(loss);

                const auto& trainable = binding.trainable();
                if (states.empty()) states.resize(trainable.size());
                for (std::size_t i = 0; i < trainable.size(); ++i)
                    adamw_step(*trainable[i].tensor, tape.grad(trainable[i].node), states[i],
                               lr_t, 0.9, 0.999, 1e-8, config.weight_decay);
                loss_sum += tape.value(loss).values[0];
                ++batches;
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("train_adapt: epoch " + std::to_string(epoch) + " batch " +
                                     std::to_string(batches) + ": " + e.what());
            }
        }
        if (batches == 0) throw std::invalid_argument("train_adapt: no usable batches");
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        result.epoch_lr.push_back(lr_t);
    }
    return result;
}

TuneResult tune_hyperparams(const DualEncoderModel& model,
                            const std::vector<TrainingPair>& pairs,
                            const std::vector<double>& lr_grid,
                            const std::vector<double>& wd_grid, const TrainConfig& base,
                            std::size_t probe_epochs) {
    if (lr_grid.empty() || wd_grid.empty())
        throw std::invalid_argument("tune_hyperparams: empty grid");
    if (probe_epochs < 1) throw std::invalid_argument("tune_hyperparams: probe_epochs >= 1");

    std::vector<ProbeOutcome> probes(lr_grid.size() * wd_grid.size());
    const std::int64_t total = static_cast<std::int64_t>(probes.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t idx = 0; idx < total; ++idx) {
        const std::size_t li = static_cast<std::size_t>(idx) / wd_grid.size();
        const std::size_t wi = static_cast<std::size_t>(idx) % wd_grid.size();
        ProbeOutcome& probe = probes[static_cast<std::size_t>(idx)];
        probe.lr = lr_grid[li];
        probe.wd = wd_grid[wi];
        TrainConfig cfg = base;
        cfg.lr = probe.lr;
        cfg.weight_decay = probe.wd;
        cfg.epochs = probe_epochs;
        try {
            TrainResult r = train_adapt(model, pairs, cfg);
            probe.final_loss = r.epoch_loss.back();
            probe.diverged = !std::isfinite(probe.final_loss);
        } catch (const NonFiniteError&) {
            probe.diverged = true;
            probe.final_loss = std::numeric_limits<double>::infinity();
        }
    }

    TuneResult result;
    result.probes = probes;
    bool found = false;
    double best_loss = std::numeric_limits<double>::infinity();
    for (const ProbeOutcome& p : probes) {
        if (p.diverged) continue;
        const bool better =
            !found || p.final_loss < best_loss ||
            (p.final_loss == best_loss &&
             (p.lr < result.lr || (p.lr == result.lr && p.wd < result.wd)));
        if (better) {
            found = true;
            best_loss = p.final_loss;
            result.lr = p.lr;
            result.wd = p.wd;
        }
    }
    if (!found) {
        std::string grid = "lr {";
        for (double lr : lr_grid) grid += format_double(lr) + " ";
        grid += "} wd {";
        for (double wd : wd_grid) grid += format_double(wd) + " ";
        grid += "}";
        throw std::runtime_error("tune_hyperparams: every probe diverged over grid " + grid);
    }
    return result;
}

void write_loss_trace(const std::string& path, const std::vector<double>& epoch_loss,
                      const std::vector<double>& epoch_lr) {
    if (epoch_loss.size() != epoch_lr.size())
        throw std::invalid_argument("write_loss_trace: trace length mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_loss_trace: cannot open " + path);
    out << "epoch,mean_loss,lr\n";
    for (std::size_t i = 0; i < epoch_loss.size(); ++i)
        out << i << "," << format_double(epoch_loss[i]) << "," << format_double(epoch_lr[i])
            << "\n";
}

}  // namespace vlmadapt
