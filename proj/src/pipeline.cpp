#include "rledit/pipeline.hpp"

#include <cstdio>
#include <fstream>

#include "rledit/errors.hpp"

namespace rledit {
namespace {

constexpr const char* kSetFiles[] = {"pretrain.jsonl", "train.jsonl", "eval.jsonl", "locality.jsonl"};

}  // namespace

Corpus generate_dataset(const RunConfig& cfg) {
    CorpusConfig data = cfg.data;
    data.seed = cfg.data_seed();
    return generate_corpus(data, cfg.model.vocab_size);
}

void save_dataset(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_records(corpus.pretrain, dir / kSetFiles[0]);
    save_records(corpus.train, dir / kSetFiles[1]);
    save_records(corpus.eval, dir / kSetFiles[2]);
    save_records(corpus.locality, dir / kSetFiles[3]);
}

Corpus load_dataset(const std::filesystem::path& dir) {
    Corpus c;
    c.pretrain = load_records(dir / kSetFiles[0]);
    c.train = load_records(dir / kSetFiles[1]);
    c.eval = load_records(dir / kSetFiles[2]);
    c.locality = load_records(dir / kSetFiles[3]);
    return c;
}

std::vector<std::filesystem::path> dataset_files(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    for (const char* f : kSetFiles) out.push_back(dir / f);
    return out;
}

ModelWeights pretrain_model(const RunConfig& cfg, const Corpus& corpus) {
    PretrainOptions opts = cfg.pretrain;
    opts.seed = cfg.pretrain_seed();
    const auto lm = corpus.lm_corpus();
    return pretrain(cfg.model, lm, opts).weights;
}

HyperNetwork initial_hypernetwork(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0) {
    const HyperParams& h = cfg.trainer.hyper;
    HyperNetwork net = HyperNetwork::init(cfg.model, h.rank, cfg.hypernet_seed(), h.lr_inner);
    calibrate_hypernetwork(net, w0, corpus.train, h.batch_size);
    return net;
}

TrainResult train_hypernetwork(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0) {
    const HyperParams& h = cfg.trainer.hyper;
    StreamSampler sampler(corpus.train, h.stream_len, h.batch_size, cfg.sampler_seed());
    if (cfg.resample_targets) sampler.resample_targets(1 + cfg.data.n_relations, cfg.data.n_relations + cfg.data.n_subjects);
    TrainerConfig tc = cfg.trainer;
    tc.seed = cfg.trainer_seed();
    return train(w0, initial_hypernetwork(cfg, corpus, w0), sampler, tc);
}

std::vector<RecordBatch> eval_stream(const RunConfig& cfg, const Corpus& corpus) {
    auto stream = make_stream(corpus.eval, cfg.trainer.hyper.batch_size);
    if (static_cast<int>(stream.size()) < cfg.edit_stream_len) {
        throw ConfigError("edit.stream_len", "held-out stream has only " + std::to_string(stream.size()) + " batches");
    }
    stream.resize(static_cast<std::size_t>(cfg.edit_stream_len));
    return stream;
}

std::vector<KnowledgeRecord> flatten(const std::vector<RecordBatch>& stream) {
    std::vector<KnowledgeRecord> out;
    for (const auto& b : stream) out.insert(out.end(), b.begin(), b.end());
    return out;
}

VariantOutcome run_variant(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0, Ablation ablation) {
    RunConfig c = cfg;
    c.trainer.ablation = ablation;
    const TrainResult trained = train_hypernetwork(c, corpus, w0);
    const auto stream = eval_stream(c, corpus);
    const EditSessionState session = edit_stream(w0, trained.hypernet, stream);
    VariantOutcome out;
    out.ablation = ablation;
    out.metrics = evaluate(session.weights, w0, flatten(stream), corpus.locality);
    out.metrics.mean_edit_seconds = session.mean_step_seconds();
    out.mean_update_norm_sq = session.mean_update_norm_sq();
    out.epochs_run = static_cast<int>(trained.log.size());
    return out;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<VariantOutcome>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingFileError(path.string());
    out << "variant,efficacy,generalization,specificity\n";
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g\n", ablation_name(r.ablation).c_str(), r.metrics.efficacy,
                      r.metrics.generalization, r.metrics.specificity);
        out << buf;
    }
}

void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::filesystem::path>& inputs) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "manifest.txt", std::ios::binary);
    if (!out) throw MissingFileError((dir / "manifest.txt").string());
    out << "command = " << command << '\n';
    out << "[config]\n" << cfg.to_text();
    out << "[inputs]\n";
    for (const auto& p : inputs) out << p.filename().string() << " = " << content_hash(p) << '\n';
}

}  // namespace rledit
