#include "vlmadapt/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "vlmadapt/format.hpp"
#include "vlmadapt/metrics.hpp"
#include "vlmadapt/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlmadapt {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

template <typename T>
T get_or(const ordered_json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

UpdateMode parse_update_mode(const std::string& s) {
    if (s == "full") return UpdateMode::full;
    if (s == "lora") return UpdateMode::lora;
    throw std::invalid_argument("config: update_mode must be 'full' or 'lora'");
}

TrainConfig parse_train(const ordered_json& j, TrainConfig base) {
    base.batch_size = get_or<std::size_t>(j, "batch_size", base.batch_size);
    base.epochs = get_or<std::size_t>(j, "epochs", base.epochs);
    base.lr = get_or<double>(j, "lr", base.lr);
    base.weight_decay = get_or<double>(j, "weight_decay", base.weight_decay);
    base.temperature = get_or<double>(j, "temperature", base.temperature);
    base.seed = get_or<std::uint64_t>(j, "seed", base.seed);
    if (j.is_object() && j.contains("update_mode"))
        base.update_mode = parse_update_mode(j.at("update_mode").get<std::string>());
    return base;
}

ordered_json train_to_json(const TrainConfig& t) {
    return {{"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"lr", t.lr},
            {"weight_decay", t.weight_decay},
            {"temperature", t.temperature},
            {"seed", t.seed},
            {"update_mode", t.update_mode == UpdateMode::full ? "full" : "lora"}};
}

}  // namespace

const std::vector<std::string>& all_stage_names() {
    static const std::vector<std::string> names = {"synth",    "pretrain", "retrieve", "rank",
                                                   "adapt",    "zeroshot", "coop",     "report"};
    return names;
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    c.pretrain.epochs = 5;
    c.pretrain.lr = 1e-3;
    c.adapt.train.epochs = 50;
    c.adapt.train.lr = 1e-3;
    c.coop.train.epochs = 50;
    c.coop.train.lr = 1e-3;
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    ordered_json j = ordered_json::parse(in);

    ExperimentConfig c = defaults();
    c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    c.metric = get_or<std::string>(j, "metric", c.metric);
    if (c.metric != "balanced_accuracy" && c.metric != "quadratic_kappa")
        throw std::invalid_argument("config: unknown metric '" + c.metric + "'");
    c.stages = get_or<std::vector<std::string>>(j, "stages", {});
    for (const std::string& s : c.stages)
        if (std::find(all_stage_names().begin(), all_stage_names().end(), s) ==
            all_stage_names().end())
            throw std::invalid_argument("config: unknown stage '" + s + "'");

    // master seed cascades into per-section seeds unless set explicitly
    c.synth.seed = c.seed;
    c.model.init_seed = c.seed;
    c.pretrain.seed = c.seed;

    if (j.contains("synth")) {
        const ordered_json& s = j["synth"];
        c.synth.enabled = get_or<bool>(s, "enabled", c.synth.enabled);
        c.synth.task_organ = get_or<std::string>(s, "task_organ", c.synth.task_organ);
        c.synth.corpus_size = get_or<std::size_t>(s, "corpus_size", c.synth.corpus_size);
        c.synth.noise = get_or<double>(s, "noise", c.synth.noise);
        c.synth.train_per_class = get_or<std::size_t>(s, "train_per_class", c.synth.train_per_class);
        c.synth.test_per_class = get_or<std::size_t>(s, "test_per_class", c.synth.test_per_class);
        c.synth.seed = get_or<std::uint64_t>(s, "seed", c.synth.seed);
        if (s.contains("mix")) {
            const ordered_json& m = s["mix"];
            c.synth.mix.task = get_or<double>(m, "task", c.synth.mix.task);
            c.synth.mix.domain_only = get_or<double>(m, "domain_only", c.synth.mix.domain_only);
            c.synth.mix.off_domain = get_or<double>(m, "off_domain", c.synth.mix.off_domain);
            c.synth.mix.mismatched = get_or<double>(m, "mismatched", c.synth.mix.mismatched);
        }
        if (s.contains("organs")) {
            for (const auto& [name, classes] : s["organs"].items())
                c.synth.organs.push_back({name, classes.get<std::vector<std::string>>()});
        }
    }
    if (j.contains("paths")) {
        const ordered_json& p = j["paths"];
        c.paths.corpus = get_or<std::string>(p, "corpus", "");
        c.paths.keywords = get_or<std::string>(p, "keywords", "");
        c.paths.prompt_bank = get_or<std::string>(p, "prompt_bank", "");
        c.paths.task_train = get_or<std::string>(p, "task_train", "");
        c.paths.task_test = get_or<std::string>(p, "task_test", "");
        c.paths.wordlist = get_or<std::string>(p, "wordlist", "");
    }
    if (j.contains("model")) {
        const ordered_json& m = j["model"];
        c.model.d_tok = get_or<std::size_t>(m, "d_tok", c.model.d_tok);
        c.model.hidden = get_or<std::size_t>(m, "hidden", c.model.hidden);
        c.model.d_emb = get_or<std::size_t>(m, "d_emb", c.model.d_emb);
        c.model.image_h = get_or<std::size_t>(m, "image_h", c.model.image_h);
        c.model.image_w = get_or<std::size_t>(m, "image_w", c.model.image_w);
        c.model.image_c = get_or<std::size_t>(m, "image_c", c.model.image_c);
        c.model.max_len = get_or<std::size_t>(m, "max_len", c.model.max_len);
        c.model.init_seed = get_or<std::uint64_t>(m, "init_seed", c.model.init_seed);
    }
    if (j.contains("pretrain")) c.pretrain = parse_train(j["pretrain"], c.pretrain);
    if (j.contains("adapt")) {
        const ordered_json& a = j["adapt"];
        c.adapt.shots = get_or<std::vector<std::size_t>>(a, "shots", c.adapt.shots);
        c.adapt.repetition_seeds =
            get_or<std::vector<std::uint64_t>>(a, "repetition_seeds", c.adapt.repetition_seeds);
        c.adapt.train = parse_train(a, c.adapt.train);
        if (a.contains("lora")) {
            const ordered_json& l = a["lora"];
            c.adapt.lora.target = get_or<std::string>(l, "target", "projections_only") ==
                                          "all_dense"
                                      ? LoraTarget::all_dense
                                      : LoraTarget::projections_only;
            c.adapt.lora.rank = get_or<std::size_t>(l, "rank", c.adapt.lora.rank);
            c.adapt.lora.alpha = get_or<double>(l, "alpha", c.adapt.lora.alpha);
            c.adapt.lora.seed = get_or<std::uint64_t>(l, "seed", c.adapt.lora.seed);
        }
        if (a.contains("tune")) {
            const ordered_json& t = a["tune"];
            c.adapt.tune.enabled = get_or<bool>(t, "enabled", false);
            c.adapt.tune.lr_grid = get_or<std::vector<double>>(t, "lr_grid", c.adapt.tune.lr_grid);
            c.adapt.tune.wd_grid = get_or<std::vector<double>>(t, "wd_grid", c.adapt.tune.wd_grid);
            c.adapt.tune.probe_epochs =
                get_or<std::size_t>(t, "probe_epochs", c.adapt.tune.probe_epochs);
        }
        if (a.contains("balance")) {
            const ordered_json& b = a["balance"];
            c.adapt.balance.enabled = get_or<bool>(b, "enabled", false);
            c.adapt.balance.target_per_class =
                get_or<std::size_t>(b, "target_per_class", 0);
            c.adapt.balance.policy = get_or<std::string>(b, "policy", "truncate") == "oversample"
                                         ? BalancePolicy::oversample
                                         : BalancePolicy::truncate;
        }
    }
    if (j.contains("coop")) {
        const ordered_json& k = j["coop"];
        c.coop.enabled = get_or<bool>(k, "enabled", c.coop.enabled);
        c.coop.shots = get_or<std::vector<std::size_t>>(k, "shots", c.coop.shots);
        c.coop.seeds = get_or<std::vector<std::uint64_t>>(k, "seeds", c.coop.seeds);
        if (k.contains("contexts")) {
            c.coop.contexts.clear();
            for (const auto& ctx : k["contexts"]) {
                ContextChoice choice;
                choice.mode = get_or<std::string>(ctx, "mode", "unified") == "csc"
                                  ? ContextMode::csc
                                  : ContextMode::unified;
                choice.length = get_or<std::size_t>(ctx, "length", 4);
                c.coop.contexts.push_back(choice);
            }
        }
        c.coop.train = parse_train(k, c.coop.train);
        c.coop.logit_scale = get_or<double>(k, "logit_scale", c.coop.logit_scale);
        c.coop.adapted_repetition =
            get_or<std::size_t>(k, "adapted_repetition", c.coop.adapted_repetition);
    }
    return c;
}

SynthTaskSpec ExperimentConfig::synth_spec() const {
    SynthTaskSpec spec = SynthTaskSpec::default_spec();
    if (!synth.organs.empty()) spec.organs = synth.organs;
    spec.image_h = model.image_h;
    spec.image_w = model.image_w;
    spec.image_c = model.image_c;
    spec.noise = synth.noise;
    spec.seed = synth.seed;
    spec.validate();
    return spec;
}

std::string ExperimentConfig::to_canonical_json() const {
    // out_dir stays out of the canonical form: the same experiment written
    // to two directories is still the same experiment
    ordered_json j;
    j["seed"] = seed;
    j["metric"] = metric;
    j["stages"] = stages;
    ordered_json organs = ordered_json::object();
    for (const SynthOrgan& o : synth.organs) organs[o.name] = o.classes;
    j["synth"] = {{"enabled", synth.enabled},
                  {"task_organ", synth.task_organ},
                  {"corpus_size", synth.corpus_size},
                  {"mix",
                   {{"task", synth.mix.task},
                    {"domain_only", synth.mix.domain_only},
                    {"off_domain", synth.mix.off_domain},
                    {"mismatched", synth.mix.mismatched}}},
                  {"noise", synth.noise},
                  {"train_per_class", synth.train_per_class},
                  {"test_per_class", synth.test_per_class},
                  {"seed", synth.seed},
                  {"organs", organs}};
    j["paths"] = {{"corpus", paths.corpus},         {"keywords", paths.keywords},
                  {"prompt_bank", paths.prompt_bank}, {"task_train", paths.task_train},
                  {"task_test", paths.task_test},   {"wordlist", paths.wordlist}};
    j["model"] = {{"d_tok", model.d_tok},     {"hidden", model.hidden},
                  {"d_emb", model.d_emb},     {"image_h", model.image_h},
                  {"image_w", model.image_w}, {"image_c", model.image_c},
                  {"max_len", model.max_len}, {"init_seed", model.init_seed}};
    j["pretrain"] = train_to_json(pretrain);
    ordered_json adapt_j = train_to_json(adapt.train);
    adapt_j["shots"] = adapt.shots;
    adapt_j["repetition_seeds"] = adapt.repetition_seeds;
    adapt_j["lora"] = {{"target", adapt.lora.target == LoraTarget::all_dense
                                      ? "all_dense"
                                      : "projections_only"},
                       {"rank", adapt.lora.rank},
                       {"alpha", adapt.lora.alpha},
                       {"seed", adapt.lora.seed}};
    adapt_j["tune"] = {{"enabled", adapt.tune.enabled},
                       {"lr_grid", adapt.tune.lr_grid},
                       {"wd_grid", adapt.tune.wd_grid},
                       {"probe_epochs", adapt.tune.probe_epochs}};
    adapt_j["balance"] = {{"enabled", adapt.balance.enabled},
                          {"target_per_class", adapt.balance.target_per_class},
                          {"policy", adapt.balance.policy == BalancePolicy::oversample
                                         ? "oversample"
                                         : "truncate"}};
    j["adapt"] = std::move(adapt_j);
    ordered_json coop_j = train_to_json(coop.train);
    coop_j["enabled"] = coop.enabled;
    coop_j["shots"] = coop.shots;
    coop_j["seeds"] = coop.seeds;
    ordered_json ctxs = ordered_json::array();
    for (const ContextChoice& ctx : coop.contexts)
        ctxs.push_back({{"mode", ctx.mode == ContextMode::csc ? "csc" : "unified"},
                        {"length", ctx.length}});
    coop_j["contexts"] = std::move(ctxs);
    coop_j["logit_scale"] = coop.logit_scale;
    coop_j["adapted_repetition"] = coop.adapted_repetition;
    j["coop"] = std::move(coop_j);
    return j.dump();
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a(to_canonical_json()); }

bool ExperimentConfig::stage_enabled(const std::string& name) const {
    if (stages.empty()) return true;
    return std::find(stages.begin(), stages.end(), name) != stages.end();
}

void ExperimentConfig::validate() const {
    auto strictly_increasing = [](const std::vector<std::size_t>& v, const char* what) {
        for (std::size_t i = 1; i < v.size(); ++i)
            if (v[i] <= v[i - 1])
                throw std::invalid_argument(std::string("config: ") + what +
                                            " must be strictly increasing");
    };
    if (adapt.shots.empty()) throw std::invalid_argument("config: adapt.shots is empty");
    strictly_increasing(adapt.shots, "adapt.shots");
    strictly_increasing(coop.shots, "coop.shots");
    if (adapt.repetition_seeds.empty())
        throw std::invalid_argument("config: no repetition seeds");
    if (coop.enabled && coop.adapted_repetition >= adapt.repetition_seeds.size())
        throw std::invalid_argument("config: coop.adapted_repetition out of range");
    if (!synth.enabled) {
        for (const auto& [path, name] :
             {std::pair<const std::string&, const char*>{paths.corpus, "corpus"},
              {paths.keywords, "keywords"},
              {paths.prompt_bank, "prompt_bank"},
              {paths.task_train, "task_train"},
              {paths.task_test, "task_test"}}) {
            if (path.empty() || !fs::exists(path))
                throw std::invalid_argument(std::string("config: with synth disabled, paths.") +
                                            name + " must reference an existing file");
        }
    }
}

double evaluate_metric(const std::string& metric, const std::vector<std::size_t>& truth,
                       const std::vector<std::size_t>& preds, std::size_t num_classes) {
    if (metric == "quadratic_kappa") return quadratic_kappa(truth, preds, num_classes);
    return balanced_accuracy(truth, preds, num_classes);
}

namespace {

struct StageRunner {
    const ExperimentConfig& cfg;
    fs::path out;
    bool force = false;
    std::map<std::string, std::uint64_t> keys;

    fs::path stage_file(const std::string& name) const {
        return out / ".stages" / (name + ".json");
    }

    bool up_to_date(const std::string& name, std::uint64_t key,
                    const std::vector<fs::path>& outputs) const {
        if (force) return false;
        const fs::path f = stage_file(name);
        if (!fs::exists(f)) return false;
        ordered_json j;
        try {
            std::ifstream in(f);
            j = ordered_json::parse(in);
        } catch (...) {
            return false;
        }
        if (get_or<std::string>(j, "key", "") != hex64(key)) return false;
        for (const fs::path& p : outputs)
            if (!fs::exists(p)) return false;
        return true;
    }

    void mark(const std::string& name, std::uint64_t key, const std::vector<fs::path>& outputs) {
        fs::create_directories(out / ".stages");
        ordered_json j;
        j["key"] = hex64(key);
        std::vector<std::string> rel;
        for (const fs::path& p : outputs) rel.push_back(p.lexically_relative(out).string());
        j["outputs"] = rel;
        std::ofstream f(stage_file(name));
        f << j.dump(2) << "\n";
    }
};

struct EffectivePaths {
    fs::path corpus, keywords, prompt_bank, task_train, task_test, wordlist;
};

EffectivePaths resolve_paths(const ExperimentConfig& cfg, const fs::path& out) {
    EffectivePaths p;
    auto pick = [&out](const std::string& configured, const char* fallback) {
        return configured.empty() ? out / fallback : fs::path(configured);
    };
    p.corpus = pick(cfg.paths.corpus, "corpus.jsonl");
    p.keywords = pick(cfg.paths.keywords, "keywords.json");
    p.prompt_bank = pick(cfg.paths.prompt_bank, "prompt_bank.json");
    p.task_train = pick(cfg.paths.task_train, "task_train.json");
    p.task_test = pick(cfg.paths.task_test, "task_test.json");
    p.wordlist = pick(cfg.paths.wordlist, "wordlist.json");
    return p;
}

std::string run_tag(const std::string& method, std::size_t shots, std::uint64_t rep) {
    return method + "_s" + std::to_string(shots) + "_r" + std::to_string(rep);
}

ordered_json section_of(const std::string& canonical, const char* key) {
    return ordered_json::parse(canonical).at(key);
}

// --------------------------------------------------------------------
// stages

void stage_synth(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key =
        fnv1a("synth|" + section_of(cfg.to_canonical_json(), "synth").dump() +
              section_of(cfg.to_canonical_json(), "model").dump());
    const std::vector<fs::path> outputs = {paths.corpus,     paths.keywords, paths.prompt_bank,
                                           paths.task_train, paths.task_test, paths.wordlist};
    r.keys["synth"] = key;
    if (r.up_to_date("synth", key, outputs)) return;

    const SynthTaskSpec spec = cfg.synth_spec();
    GeneratedCorpus gen = generate_corpus(spec, cfg.synth.task_organ, cfg.synth.corpus_size,
                                          cfg.synth.mix, cfg.synth.seed);
    save_corpus(paths.corpus.string(), gen.corpus);
    save_keyword_spec(paths.keywords.string(), make_keyword_spec(spec, cfg.synth.task_organ));
    save_prompt_bank(paths.prompt_bank.string(), make_prompt_bank(spec, cfg.synth.task_organ));
    save_task_dataset(paths.task_train.string(),
                      generate_task_dataset(spec, cfg.synth.task_organ,
                                            cfg.synth.train_per_class, "train",
                                            splitmix64(cfg.synth.seed + 1)));
    save_task_dataset(paths.task_test.string(),
                      generate_task_dataset(spec, cfg.synth.task_organ, cfg.synth.test_per_class,
                                            "test", splitmix64(cfg.synth.seed + 2)));
    ordered_json wl;
    wl["words"] = spec.word_list();
    wl["bookkeeping"] = {{"task_stratum", gen.bookkeeping.task_stratum},
                         {"domain_only_stratum", gen.bookkeeping.domain_only_stratum},
                         {"off_domain_stratum", gen.bookkeeping.off_domain_stratum},
                         {"mismatched_stratum", gen.bookkeeping.mismatched_stratum},
                         {"domain_expected", gen.bookkeeping.domain_expected()},
                         {"task_expected", gen.bookkeeping.task_expected()}};
    std::ofstream wf(paths.wordlist);
    wf << wl.dump(2) << "\n";
    r.mark("synth", key, outputs);
}

void stage_pretrain(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::string canon = cfg.to_canonical_json();
    const std::uint64_t key = fnv1a("pretrain|" + hex64(r.keys["synth"]) +
                                    section_of(canon, "pretrain").dump() +
                                    section_of(canon, "model").dump() +
                                    section_of(canon, "paths").dump());
    const fs::path model_path = r.out / "base_model.json";
    const fs::path trace_path = r.out / "pretrain_loss.csv";
    r.keys["pretrain"] = key;
    if (r.up_to_date("pretrain", key, {model_path, trace_path})) return;

    Corpus corpus = load_corpus(paths.corpus.string());
    if (corpus.empty()) throw std::runtime_error("pretrain: corpus is empty");

    std::vector<std::string> words;
    for (const CaptionRecord& rec : corpus.records())
        for (const std::string& w : split_words(normalize_text(rec.caption))) words.push_back(w);
    if (fs::exists(paths.wordlist)) {
        std::ifstream in(paths.wordlist);
        ordered_json wl = ordered_json::parse(in);
        for (const auto& w : wl.at("words")) words.push_back(w.get<std::string>());
    }
    DualEncoderModel model = DualEncoderModel::init(cfg.model, Vocabulary::build(words));

    std::vector<std::string> ids;
    for (const CaptionRecord& rec : corpus.records()) ids.push_back(rec.id);
    const std::vector<TrainingPair> pairs = make_training_pairs(ids, corpus, model);
    TrainResult result = train_adapt(model, pairs, cfg.pretrain);
    save_checkpoint(model_path.string(), result.model);
    write_loss_trace(trace_path.string(), result.epoch_loss, result.epoch_lr);
    r.mark("pretrain", key, {model_path, trace_path});
}

void stage_retrieve(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key = fnv1a("retrieve|" + hex64(r.keys["synth"]) +
                                    section_of(cfg.to_canonical_json(), "paths").dump());
    const fs::path domain_path = r.out / "retrieval_domain.json";
    const fs::path task_path = r.out / "retrieval_task.json";
    r.keys["retrieve"] = key;
    if (r.up_to_date("retrieve", key, {domain_path, task_path})) return;

    Corpus corpus = load_corpus(paths.corpus.string());
    KeywordSpec spec = load_keyword_spec(paths.keywords.string());
    save_retrieval_set(domain_path.string(), match_keywords(corpus, spec, RetrievalMode::domain));
    save_retrieval_set(task_path.string(), match_keywords(corpus, spec, RetrievalMode::task));
    r.mark("retrieve", key, {domain_path, task_path});
}

void stage_rank(StageRunner& r, const EffectivePaths& paths) {
    const std::uint64_t key =
        fnv1a("rank|" + hex64(r.keys["retrieve"]) + hex64(r.keys["pretrain"]));
    const fs::path domain_path = r.out / "ranked_domain.json";
    const fs::path task_path = r.out / "ranked_task.json";
    r.keys["rank"] = key;
    if (r.up_to_date("rank", key, {domain_path, task_path})) return;

    Corpus corpus = load_corpus(paths.corpus.string());
    DualEncoderModel model = load_checkpoint((r.out / "base_model.json").string());
    save_retrieval_set(domain_path.string(),
                       rank_pairs(load_retrieval_set((r.out / "retrieval_domain.json").string()),
                                  corpus, model));
    save_retrieval_set(task_path.string(),
                       rank_pairs(load_retrieval_set((r.out / "retrieval_task.json").string()),
                                  corpus, model));
    r.mark("rank", key, {domain_path, task_path});
}

struct AdaptRun {
    std::string method;
    std::size_t shots = 0;
    std::uint64_t rep_seed = 0;
};

std::vector<AdaptRun> adapt_runs(const ExperimentConfig& cfg) {
    std::vector<AdaptRun> runs;
    for (const std::string method : {"dapt", "tapt"})
        for (std::size_t shots : cfg.adapt.shots)
            for (std::uint64_t rep : cfg.adapt.repetition_seeds) runs.push_back({method, shots, rep});
    return runs;
}

void stage_adapt(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key = fnv1a("adapt|" + hex64(r.keys["rank"]) +
                                    section_of(cfg.to_canonical_json(), "adapt").dump());
    const fs::path adapt_dir = r.out / "adapt";
    const fs::path manifest_path = adapt_dir / "adapt_manifest.json";
    std::vector<fs::path> outputs = {manifest_path};
    const std::vector<AdaptRun> runs = adapt_runs(cfg);
    for (const AdaptRun& run : runs)
        outputs.push_back(adapt_dir / (run_tag(run.method, run.shots, run.rep_seed) + ".json"));
    r.keys["adapt"] = key;
    if (r.up_to_date("adapt", key, outputs)) return;
    fs::create_directories(adapt_dir);

    Corpus corpus = load_corpus(paths.corpus.string());
    KeywordSpec kspec = load_keyword_spec(paths.keywords.string());
    DualEncoderModel base = load_checkpoint((r.out / "base_model.json").string());
    RetrievalSet ranked_domain = load_retrieval_set((r.out / "ranked_domain.json").string());
    RetrievalSet ranked_task = load_retrieval_set((r.out / "ranked_task.json").string());
    const std::size_t num_classes = kspec.num_classes();

    // per (method, shots): subset selection, optional balancing and tuning,
    // shared across repetitions
    struct Plan {
        std::string method;
        std::size_t shots = 0;
        std::vector<TrainingPair> pairs;
        bool truncated = false;
        double lr = 0.0, wd = 0.0;
    };
    std::vector<Plan> plans;
    for (const std::string method : {"dapt", "tapt"}) {
        const RetrievalSet& ranked = method == "dapt" ? ranked_domain : ranked_task;
        for (std::size_t shots : cfg.adapt.shots) {
            Plan plan;
            plan.method = method;
            plan.shots = shots;
            ShotSpec shot_spec{shots, num_classes};
            SubsetResult subset = select_training_subset(ranked, shot_spec);
            plan.truncated = subset.truncated;
            RetrievalSet selected;
            selected.mode = ranked.mode;
            selected.members = subset.members;
            if (cfg.adapt.balance.enabled && method == "tapt") {
                const std::size_t target = cfg.adapt.balance.target_per_class
                                               ? cfg.adapt.balance.target_per_class
                                               : shots;
                selected = balance_by_label(assign_pseudo_labels(selected, kspec, corpus), kspec,
                                            target, cfg.adapt.balance.policy);
            }
            std::vector<std::string> ids;
            for (const RetrievalMember& m : selected.members) ids.push_back(m.id);
            plan.pairs = make_training_pairs(ids, corpus, base);
            plan.lr = cfg.adapt.train.lr;
            plan.wd = cfg.adapt.train.weight_decay;
            plans.push_back(std::move(plan));
        }
    }

    if (cfg.adapt.tune.enabled) {
        DualEncoderModel tune_model = base;
        if (cfg.adapt.train.update_mode == UpdateMode::lora)
            lora_inject(tune_model, cfg.adapt.lora.target, cfg.adapt.lora.rank,
                        cfg.adapt.lora.alpha, cfg.adapt.lora.seed);
        for (Plan& plan : plans) {
            if (plan.pairs.size() < 2) continue;
            TrainConfig probe_base = cfg.adapt.train;
            TuneResult tuned =
                tune_hyperparams(tune_model, plan.pairs, cfg.adapt.tune.lr_grid,
                                 cfg.adapt.tune.wd_grid, probe_base, cfg.adapt.tune.probe_epochs);
            plan.lr = tuned.lr;
            plan.wd = tuned.wd;
        }
    }

    ordered_json manifest;
    manifest["truncated"] = ordered_json::object();
    manifest["checkpoints"] = ordered_json::object();
    manifest["hyperparams"] = ordered_json::object();
    for (const Plan& plan : plans) {
        for (std::uint64_t rep : cfg.adapt.repetition_seeds) {
            const std::string tag = run_tag(plan.method, plan.shots, rep);
            manifest["truncated"][tag] = plan.truncated;
            manifest["hyperparams"][tag] = {{"lr", plan.lr}, {"wd", plan.wd}};
        }
    }

    struct RunSlot {
        const Plan* plan;
        std::uint64_t rep;
        std::string checkpoint_hash;
    };
    std::vector<RunSlot> slots;
    for (const Plan& plan : plans)
        for (std::uint64_t rep : cfg.adapt.repetition_seeds) slots.push_back({&plan, rep, ""});

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(slots.size()); ++i) {
        RunSlot& slot = slots[static_cast<std::size_t>(i)];
        const Plan& plan = *slot.plan;
        DualEncoderModel start = base;
        if (cfg.adapt.train.update_mode == UpdateMode::lora)
            lora_inject(start, cfg.adapt.lora.target, cfg.adapt.lora.rank, cfg.adapt.lora.alpha,
                        cfg.adapt.lora.seed);
        TrainConfig tc = cfg.adapt.train;
        tc.lr = plan.lr;
        tc.weight_decay = plan.wd;
        tc.seed = slot.rep;
        TrainResult result = train_adapt(start, plan.pairs, tc);
        const std::string tag = run_tag(plan.method, plan.shots, slot.rep);
        save_checkpoint((adapt_dir / (tag + ".json")).string(), result.model);
        write_loss_trace((adapt_dir / (tag + "_loss.csv")).string(), result.epoch_loss,
                         result.epoch_lr);
        slot.checkpoint_hash = hex64(result.model.param_hash());
    }
    for (const RunSlot& slot : slots)
        manifest["checkpoints"][run_tag(slot.plan->method, slot.plan->shots, slot.rep)] =
            slot.checkpoint_hash;

    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << "\n";
    r.mark("adapt", key, outputs);
}

double zero_shot_dataset_metric(const DualEncoderModel& model, const PromptBank& bank,
                                const TaskDataset& dataset, const std::string& metric) {
    // bank classes must cover the dataset classes; embeddings follow
    // dataset order so tie-breaking matches the task's class order
    std::vector<Tensor> bank_emb = build_class_embeddings(model, bank);
    std::vector<Tensor> class_emb;
    for (const std::string& cls : dataset.classes) {
        bool found = false;
        for (std::size_t i = 0; i < bank.classes.size(); ++i) {
            if (bank.classes[i].first == cls) {
                class_emb.push_back(bank_emb[i]);
                found = true;
                break;
            }
        }
        if (!found)
            throw std::runtime_error("zeroshot: prompt bank has no class '" + cls + "'");
    }
    std::vector<std::size_t> truth(dataset.items.size()), preds(dataset.items.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(dataset.items.size()); ++i) {
        const LabeledImage& item = dataset.items[static_cast<std::size_t>(i)];
        truth[static_cast<std::size_t>(i)] = item.label;
        preds[static_cast<std::size_t>(i)] =
            classify_zero_shot(model, item.image, class_emb).predicted;
    }
    return evaluate_metric(metric, truth, preds, dataset.classes.size());
}

void warn_unknown_words(const DualEncoderModel& model, const PromptBank& bank) {
    std::set<std::string> unknown;
    for (const auto& [cls, descriptions] : bank.classes)
        for (const std::string& desc : descriptions)
            for (const std::string& templ : bank.templates)
                for (const std::string& w :
                     split_words(normalize_text(render_template(templ, desc))))
                    if (!model.vocab.contains(w)) unknown.insert(w);
    for (const std::string& w : unknown)
        std::fprintf(stderr, "zeroshot: prompt word '%s' is outside the vocabulary\n", w.c_str());
}

void stage_zeroshot(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key = fnv1a("zeroshot|" + hex64(r.keys["adapt"]) + cfg.metric);
    const fs::path rows_path = r.out / "eval_zeroshot.json";
    r.keys["zeroshot"] = key;
    if (r.up_to_date("zeroshot", key, {rows_path})) return;

    const PromptBank bank = load_prompt_bank(paths.prompt_bank.string());
    const TaskDataset test = load_task_dataset(paths.task_test.string());
    DualEncoderModel base = load_checkpoint((r.out / "base_model.json").string());
    warn_unknown_words(base, bank);

    ordered_json rows = ordered_json::array();
    rows.push_back({{"method", "baseline"},
                    {"shots", 0},
                    {"repetition", 0},
                    {"metric", zero_shot_dataset_metric(base, bank, test, cfg.metric)}});
    for (const AdaptRun& run : adapt_runs(cfg)) {
        const std::string tag = run_tag(run.method, run.shots, run.rep_seed);
        DualEncoderModel model =
            load_checkpoint((r.out / "adapt" / (tag + ".json")).string());
        if (model.lora_target) lora_merge(model);
        rows.push_back({{"method", run.method},
                        {"shots", run.shots},
                        {"repetition", run.rep_seed},
                        {"metric", zero_shot_dataset_metric(model, bank, test, cfg.metric)}});
    }
    ordered_json j;
    j["config_hash"] = hex64(cfg.config_hash());
    j["rows"] = std::move(rows);
    std::ofstream f(rows_path);
    f << j.dump(2) << "\n";
    r.mark("zeroshot", key, {rows_path});
}

void stage_coop(StageRunner& r, const EffectivePaths& paths) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key = fnv1a("coop|" + hex64(r.keys["adapt"]) +
                                    section_of(cfg.to_canonical_json(), "coop").dump() +
                                    cfg.metric);
    const fs::path rows_path = r.out / "eval_coop.json";
    const fs::path ctx_dir = r.out / "coop";
    r.keys["coop"] = key;
    if (r.up_to_date("coop", key, {rows_path})) return;
    fs::create_directories(ctx_dir);

    const TaskDataset train = load_task_dataset(paths.task_train.string());
    const TaskDataset test = load_task_dataset(paths.task_test.string());
    std::vector<Image> test_images;
    std::vector<std::size_t> truth;
    for (const LabeledImage& item : test.items) {
        test_images.push_back(item.image);
        truth.push_back(item.label);
    }

    DualEncoderModel base = load_checkpoint((r.out / "base_model.json").string());
    const std::size_t max_shots =
        *std::max_element(cfg.adapt.shots.begin(), cfg.adapt.shots.end());
    const std::string tapt_tag =
        run_tag("tapt", max_shots, cfg.adapt.repetition_seeds.at(cfg.coop.adapted_repetition));
    DualEncoderModel adapted =
        load_checkpoint((r.out / "adapt" / (tapt_tag + ".json")).string());
    if (adapted.lora_target) lora_merge(adapted);

    for (const std::string& w : unknown_classname_words(base, train.classes))
        std::fprintf(stderr, "coop: class word '%s' is outside the vocabulary\n", w.c_str());

    struct CoopRun {
        const DualEncoderModel* model;
        std::string method;
        std::size_t shots;
        std::uint64_t seed;
        ContextChoice ctx;
        double metric = 0.0;
    };
    std::vector<CoopRun> runs;
    for (const ContextChoice& ctx : cfg.coop.contexts) {
        const std::string suffix =
            (ctx.mode == ContextMode::csc ? std::string("csc") : std::string("unified")) +
            std::to_string(ctx.length);
        for (const auto& [model_ptr, name] :
             {std::pair<const DualEncoderModel*, std::string>{&base, "coop_base_" + suffix},
              {&adapted, "coop_tapt_" + suffix}}) {
            for (std::size_t shots : cfg.coop.shots)
                for (std::uint64_t seed : cfg.coop.seeds)
                    runs.push_back({model_ptr, name, shots, seed, ctx});
        }
    }

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(runs.size()); ++i) {
        CoopRun& run = runs[static_cast<std::size_t>(i)];
        FewShotSet few = sample_few_shot(train, run.shots, run.seed);
        PromptContext ctx = init_context(run.ctx.mode, run.ctx.length, train.classes.size(),
                                         run.seed, run.model->config.d_tok);
        TrainConfig tc = cfg.coop.train;
        tc.seed = run.seed;
        CoopTrainResult trained = train_coop(*run.model, ctx, few, tc, cfg.coop.logit_scale);
        const std::vector<std::size_t> preds = coop_predict(
            *run.model, trained.context, test_images, test.classes, cfg.coop.logit_scale);
        run.metric = evaluate_metric(cfg.metric, truth, preds, test.classes.size());
        save_context((ctx_dir / (run.method + "_s" + std::to_string(run.shots) + "_seed" +
                                 std::to_string(run.seed) + ".json"))
                         .string(),
                     trained.context);
    }

    ordered_json rows = ordered_json::array();
    for (const CoopRun& run : runs)
        rows.push_back({{"method", run.method},
                        {"shots", run.shots},
                        {"repetition", run.seed},
                        {"metric", run.metric}});
    ordered_json j;
    j["config_hash"] = hex64(cfg.config_hash());
    j["rows"] = std::move(rows);
    j["adapted_checkpoint"] = tapt_tag;
    std::ofstream f(rows_path);
    f << j.dump(2) << "\n";
    r.mark("coop", key, {rows_path});
}

std::vector<ReportRow> read_rows(const fs::path& path) {
    std::vector<ReportRow> rows;
    if (!fs::exists(path)) return rows;
    std::ifstream in(path);
    ordered_json j = ordered_json::parse(in);
    for (const auto& rj : j.at("rows")) {
        ReportRow row;
        row.method = rj.at("method").get<std::string>();
        row.shots = rj.at("shots").get<std::size_t>();
        row.repetition = rj.at("repetition").get<std::uint64_t>();
        row.metric = rj.at("metric").get<double>();
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_report_csv(const fs::path& path, const std::vector<ReportRow>& rows) {
    // group stats over repetitions of the same (method, shots)
    std::map<std::pair<std::string, std::size_t>, std::vector<double>> groups;
    for (const ReportRow& row : rows) groups[{row.method, row.shots}].push_back(row.metric);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot open " + path.string());
    out << "method,shots,repetition,metric,median,min,max\n";
    for (const ReportRow& row : rows) {
        const RepetitionStats stats = aggregate_repetitions(groups[{row.method, row.shots}]);
        out << row.method << "," << row.shots << "," << row.repetition << ","
            << format_double(row.metric) << "," << format_double(stats.median) << ","
            << format_double(stats.min) << "," << format_double(stats.max) << "\n";
    }
}

void stage_report(StageRunner& r, RunReport& report) {
    const ExperimentConfig& cfg = r.cfg;
    const std::uint64_t key = fnv1a("report|" + hex64(r.keys["zeroshot"]) +
                                    hex64(r.keys["coop"]) + hex64(cfg.config_hash()));
    const fs::path zs_csv = r.out / "report_zeroshot.csv";
    const fs::path coop_csv = r.out / "report_coop.csv";
    const fs::path manifest_path = r.out / "manifest.json";
    r.keys["report"] = key;

    report.config_hash = cfg.config_hash();
    report.zeroshot_rows = read_rows(r.out / "eval_zeroshot.json");
    report.coop_rows = read_rows(r.out / "eval_coop.json");
    const fs::path adapt_manifest = r.out / "adapt" / "adapt_manifest.json";
    if (fs::exists(adapt_manifest)) {
        std::ifstream in(adapt_manifest);
        ordered_json j = ordered_json::parse(in);
        for (const auto& [tag, flag] : j.at("truncated").items())
            report.truncated[tag] = flag.get<bool>();
        for (const auto& [tag, hash] : j.at("checkpoints").items())
            report.checkpoints[tag] = hash.get<std::string>();
    }

    std::vector<fs::path> outputs = {zs_csv, manifest_path};
    if (!report.coop_rows.empty()) outputs.push_back(coop_csv);
    if (r.up_to_date("report", key, outputs)) return;

    write_report_csv(zs_csv, report.zeroshot_rows);
    if (!report.coop_rows.empty()) write_report_csv(coop_csv, report.coop_rows);

    ordered_json manifest;
    manifest["config_hash"] = hex64(report.config_hash);
    manifest["metric"] = cfg.metric;
    manifest["repetition_seeds"] = cfg.adapt.repetition_seeds;
    manifest["coop_seeds"] = cfg.coop.seeds;
    ordered_json keys_j = ordered_json::object();
    for (const auto& [name, k] : r.keys) keys_j[name] = hex64(k);
    manifest["stage_keys"] = std::move(keys_j);
    ordered_json trunc = ordered_json::object();
    for (const auto& [tag, flag] : report.truncated) trunc[tag] = flag;
    manifest["truncated"] = std::move(trunc);
    ordered_json ckpts = ordered_json::object();
    for (const auto& [tag, hash] : report.checkpoints) ckpts[tag] = hash;
    manifest["checkpoints"] = std::move(ckpts);
    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << "\n";
    r.mark("report", key, outputs);
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, bool force,
                         const std::string& stage_filter) {
    config.validate();
    StageRunner runner{config, fs::path(config.out_dir), force, {}};
    fs::create_directories(runner.out);
    const EffectivePaths paths = resolve_paths(config, runner.out);
    RunReport report;

    auto wants = [&](const std::string& name) {
        if (!stage_filter.empty()) return stage_filter == name;
        return config.stage_enabled(name);
    };
    auto guarded = [&](const std::string& name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            throw std::runtime_error("[stage " + name + "] " + e.what());
        }
    };

    if (wants("synth") && config.synth.enabled)
        guarded("synth", [&] { stage_synth(runner, paths); });
    if (wants("pretrain")) guarded("pretrain", [&] { stage_pretrain(runner, paths); });
    if (wants("retrieve")) guarded("retrieve", [&] { stage_retrieve(runner, paths); });
    if (wants("rank")) guarded("rank", [&] { stage_rank(runner, paths); });
    if (wants("adapt")) guarded("adapt", [&] { stage_adapt(runner, paths); });
    if (wants("zeroshot")) guarded("zeroshot", [&] { stage_zeroshot(runner, paths); });
    if (wants("coop") && config.coop.enabled)
        guarded("coop", [&] { stage_coop(runner, paths); });
    if (wants("report")) guarded("report", [&] { stage_report(runner, report); });
    return report;
}

}  // namespace vlmadapt
