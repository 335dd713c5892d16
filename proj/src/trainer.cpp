#include "rledit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>

#include "rledit/errors.hpp"
#include "rledit/optim.hpp"

namespace rledit {
namespace {

constexpr double kClipNorm = 1.0;
constexpr double kDivergenceLimit = 1e6;

std::vector<int> ids_of(const RecordBatch& b) {
    std::vector<int> ids;
    for (const auto& r : b) ids.push_back(r.record_id);
    return ids;
}

std::vector<TokenSequence> edit_sequences(const RecordBatch& b) {
    std::vector<TokenSequence> seqs;
    for (const auto& r : b) seqs.push_back(r.edit());
    return seqs;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void maybe_checkpoint(const TrainerConfig& cfg, int epoch, const HyperNetwork& h) {
    if (cfg.checkpoint_every <= 0 || epoch % cfg.checkpoint_every != 0 || cfg.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(cfg.checkpoint_dir);
    char name[64];
    std::snprintf(name, sizeof name, "hypernet_epoch_%04d.rlh", epoch);
    h.save(cfg.checkpoint_dir / name);
}

// Tracks the best J seen; reports when `patience` epochs pass without a
// min_delta improvement.
// Convergence on the mean J of consecutive windows of `window` epochs; a
// single sampled trajectory is too noisy to compare epoch against epoch.
class EarlyStop {
public:
    EarlyStop(int patience, double min_delta, int window)
        : patience_(patience), min_delta_(min_delta), window_(window) {}
    bool update(double j) {
        sum_ += j;
        if (++count_ < window_) return false;
        const double mean = sum_ / window_;
        sum_ = 0.0;
        count_ = 0;
        if (!seen_ || mean > best_ + min_delta_) {
            best_ = mean;
            seen_ = true;
            stale_ = 0;
            return false;
        }
        return ++stale_ >= patience_;
    }

private:
    int patience_;
    double min_delta_;
    int window_;
    double best_ = 0.0;
    bool seen_ = false;
    int stale_ = 0;
    double sum_ = 0.0;
    int count_ = 0;
};

void check_return(double j, int epoch) {
    if (!std::isfinite(j)) throw TrainingFailure(epoch, "trajectory return is not finite");
    if (std::abs(j) > kDivergenceLimit) throw TrainingFailure(epoch, "trajectory return diverged");
}

}  // namespace

Ablation parse_ablation(const std::string& name) {
    for (Ablation a : kAllAblations)
        if (ablation_name(a) == name) return a;
    throw ConfigError("trainer.ablation",
                      "unknown ablation '" + name + "' (none, no_rl, no_backtracking, no_regularization)");
}

std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_rl: return "no_rl";
        case Ablation::no_backtracking: return "no_backtracking";
        case Ablation::no_regularization: return "no_regularization";
    }
    return "none";
}

void TrainerConfig::validate() const {
    hyper.validate();
    if (epochs < 1) throw ConfigError("trainer.epochs", "must be at least 1");
    if (patience < 1) throw ConfigError("trainer.patience", "must be at least 1");
    if (convergence_window < 1) throw ConfigError("trainer.convergence_window", "must be at least 1");
    if (!(min_delta >= 0.0)) throw ConfigError("trainer.min_delta", "must be nonnegative");
    if (checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every", "must be nonnegative");
}

int TrainerConfig::effective_k() const {
    return ablation == Ablation::no_backtracking || ablation == Ablation::no_rl ? 0 : hyper.k;
}

double TrainerConfig::effective_eta() const { return ablation == Ablation::no_regularization ? 0.0 : hyper.eta; }

// ---------------------------------------------------------------- probe

void RolloutProbe::on_state(int version, const ModelWeights& w) {
    states_.push_back({version, w.at(w.config().editable_layers.front()).id()});
}

void RolloutProbe::on_read(int step, Purpose purpose, const ModelWeights& w, std::span<const RecordBatch> batches) {
    Read r{step, purpose, w.at(w.config().editable_layers.front()).id(), {}};
    for (const auto& b : batches)
        for (const auto& rec : b) r.record_ids.push_back(rec.record_id);
    reads_.push_back(std::move(r));
}

int RolloutProbe::version_of(const void* id) const {
    for (const auto& s : states_)
        if (s.id == id) return s.version;
    return -1;
}

// ---------------------------------------------------------------- rollout

RolloutResult rollout(LocalityReference& ref, const HyperNetwork& h, std::span<const RecordBatch> stream,
                      const TrainerConfig& cfg, std::mt19937_64* noise_rng, RolloutProbe* probe) {
    if (stream.empty()) throw DegenerateInputError("rollout: empty stream");
    const HyperParams& hp = cfg.hyper;
    const auto k = static_cast<std::size_t>(cfg.effective_k());
    const double eta = cfg.effective_eta();

    // The chain only ever holds W_{t-1} and W_t plus the last k batches.
    ModelWeights prev = ref.weights();
    std::deque<RecordBatch> history;
    if (probe) probe->on_state(0, prev);

    RolloutResult out;
    std::vector<ad::Tensor> rewards;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const int t = static_cast<int>(i) + 1;
        const RecordBatch& batch = stream[i];

        if (probe) probe->on_read(t, RolloutProbe::Purpose::collect_factors, prev, std::span(&batch, 1));
        const auto seqs = edit_sequences(batch);
        const RankOneFactors factors = collect_rank_one_factors(prev, seqs);
        const EditUpdate update = h.transform(factors);
        ModelWeights cur = apply_update(prev, update, hp.noise_std, noise_rng);
        if (probe) probe->on_state(t, cur);

        if (probe) probe->on_read(t, RolloutProbe::Purpose::base_loss, cur, std::span(&batch, 1));
        const BaseLoss base = base_loss(cur, ref, batch, hp.lambda_loc);

        const std::vector<RecordBatch> window(history.begin(), history.end());
        if (probe && !window.empty()) probe->on_read(t, RolloutProbe::Purpose::backtracking, prev, window);
        const ad::Tensor back = backtracking_loss(prev, ref, window, hp.mu, hp.lambda_loc);

        StepReward sr = step_reward(base, back, update, eta);
        const auto& b = sr.breakdown;
        if (!std::isfinite(b.r) || !update.all_finite()) {
            char msg[256];
            std::snprintf(msg, sizeof msg, "non-finite reward (l_edit %g, l_loc %g, l_back %g, reg %g)", b.l_edit,
                          b.l_loc, b.l_back, b.reg);
            throw TrainingFailure(t, msg);
        }
        out.steps.push_back({t, ids_of(batch), b.reg, b});
        rewards.push_back(sr.r);

        if (k > 0) {
            history.push_back(batch);
            while (history.size() > k) history.pop_front();
        }
        prev = std::move(cur);
    }
    out.J = trajectory_return(rewards, hp.gamma);
    out.final_weights = std::move(prev);
    return out;
}

// ---------------------------------------------------------------- training

void calibrate_hypernetwork(HyperNetwork& h, const ModelWeights& w0, std::span<const KnowledgeRecord> pool,
                            int batch_size) {
    std::vector<RankOneFactors> samples;
    for (const auto& b : make_stream(pool, batch_size)) samples.push_back(collect_rank_one_factors(w0, edit_sequences(b)));
    h.calibrate(samples);
}

TrainResult train(const ModelWeights& w0, const HyperNetwork& h, StreamSampler& sampler, const TrainerConfig& cfg) {
    cfg.validate();
    if (cfg.ablation == Ablation::no_rl) return train_no_rl_baseline(w0, h, sampler, cfg);

    TrainResult result{h.clone(), {}, false};
    HyperNetwork& net = result.hypernet;
    LocalityReference ref(w0);
    AdamW opt(net.parameters(), {.lr = cfg.hyper.lr_meta});
    std::mt19937_64 noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    EarlyStop stop(cfg.patience, cfg.min_delta, cfg.convergence_window);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto stream = sampler.next();
        RolloutResult rr = rollout(ref, net, stream, cfg, &noise_rng);
        const double j = rr.J.item();
        check_return(j, epoch);

        opt.zero_grad();
        ad::backward(ad::scale(rr.J, -1.0));
        const double gnorm = opt.clip_grad_norm(kClipNorm);
        opt.step();

        result.log.push_back({epoch, j, gnorm, gnorm > kClipNorm, seconds_since(t0), std::move(rr.steps)});
        maybe_checkpoint(cfg, epoch, net);
        if (stop.update(j)) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

TrainResult train_no_rl_baseline(const ModelWeights& w0, const HyperNetwork& h, StreamSampler& sampler,
                                 const TrainerConfig& cfg) {
    cfg.validate();
    TrainResult result{h.clone(), {}, false};
    HyperNetwork& net = result.hypernet;
    LocalityReference ref(w0);
    AdamW opt(net.parameters(), {.lr = cfg.hyper.lr_meta});
    std::mt19937_64 noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    EarlyStop stop(cfg.patience, cfg.min_delta, cfg.convergence_window);
    const double eta = cfg.effective_eta();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto stream = sampler.next();
        EpochLog log{epoch, 0.0, 0.0, false, 0.0, {}};
        for (std::size_t i = 0; i < stream.size(); ++i) {
            const int t = static_cast<int>(i) + 1;
            const RecordBatch& batch = stream[i];
            // Every edit starts again from W_0.
            const RankOneFactors factors = collect_rank_one_factors(w0, edit_sequences(batch));
            const EditUpdate update = net.transform(factors);
            const ModelWeights cur = apply_update(w0, update, cfg.hyper.noise_std, &noise_rng);
            const BaseLoss base = base_loss(cur, ref, batch, cfg.hyper.lambda_loc);
            const StepReward sr = step_reward(base, ad::Tensor::scalar(0.0), update, eta);
            if (!std::isfinite(sr.breakdown.r)) throw TrainingFailure(t, "non-finite reward");

            opt.zero_grad();
            ad::backward(ad::scale(sr.r, -1.0));
            const double gnorm = opt.clip_grad_norm(kClipNorm);
            opt.step();

            log.J += sr.breakdown.r;
            log.grad_norm = std::max(log.grad_norm, gnorm);
            log.clipped = log.clipped || gnorm > kClipNorm;
            log.steps.push_back({t, ids_of(batch), sr.breakdown.reg, sr.breakdown});
        }
        check_return(log.J, epoch);
        log.seconds = seconds_since(t0);
        const double j = log.J;
        result.log.push_back(std::move(log));
        maybe_checkpoint(cfg, epoch, net);
        if (stop.update(j)) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingFileError(path.string());
    out << breakdown_csv_header() << '\n';
    for (const auto& e : log)
        for (const auto& s : e.steps) out << breakdown_csv_row(e.epoch, s.t, s.breakdown) << '\n';
}

}  // namespace rledit
