#pragma once

// Hypernetwork training over chained edit trajectories: each rollout edits
// W_0 -> W_1 -> ... -> W_n with the current hypernetwork, keeps the whole chain
// on the tape and ascends the trajectory return.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rledit/data.hpp"
#include "rledit/hypernet.hpp"
#include "rledit/reward.hpp"

namespace rledit {

enum class Ablation { none, no_rl, no_backtracking, no_regularization };

Ablation parse_ablation(const std::string& name);  // throws ConfigError("trainer.ablation")
std::string ablation_name(Ablation a);
inline constexpr Ablation kAllAblations[] = {Ablation::none, Ablation::no_rl, Ablation::no_backtracking,
                                              Ablation::no_regularization};

struct TrainerConfig {
    HyperParams hyper;
    int epochs = 300;
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::none;
    int patience = 5;
    double min_delta = 1e-3;
    int convergence_window = 1;  // epochs averaged per early-stopping comparison
    int checkpoint_every = 0;  // epochs; 0 disables
    std::filesystem::path checkpoint_dir;

    void validate() const;
    // Backtracking depth and regularization weight after the ablation is applied.
    int effective_k() const;
    double effective_eta() const;
};

struct TrajectoryStep {
    int t = 0;
    std::vector<int> record_ids;
    double update_norm_sq = 0.0;
    RewardBreakdown breakdown;
};

// Observes every weight and record access of a rollout. Weight states are
// identified by the storage of their first editable tensor.
class RolloutProbe {
public:
    enum class Purpose { collect_factors, base_loss, backtracking };
    struct WeightState {
        int version = 0;  // t for W_t
        const void* id = nullptr;
    };
    struct Read {
        int step = 0;
        Purpose purpose = Purpose::base_loss;
        const void* weights_id = nullptr;
        std::vector<int> record_ids;
    };

    void on_state(int version, const ModelWeights& w);
    void on_read(int step, Purpose purpose, const ModelWeights& w, std::span<const RecordBatch> batches);

    const std::vector<WeightState>& states() const noexcept { return states_; }
    const std::vector<Read>& reads() const noexcept { return reads_; }
    // Version of the state with this id, or -1 if the rollout never produced it.
    int version_of(const void* id) const;

private:
    std::vector<WeightState> states_;
    std::vector<Read> reads_;
};

struct RolloutResult {
    ad::Tensor J;
    std::vector<TrajectoryStep> steps;
    ModelWeights final_weights;
};

// One trajectory. `ref` supplies W_0 (the starting point and the KL
// reference). Throws TrainingFailure on a non-finite step.
RolloutResult rollout(LocalityReference& ref, const HyperNetwork& h, std::span<const RecordBatch> stream,
                      const TrainerConfig& cfg, std::mt19937_64* noise_rng = nullptr, RolloutProbe* probe = nullptr);

struct EpochLog {
    int epoch = 0;
    double J = 0.0;
    double grad_norm = 0.0;
    bool clipped = false;
    double seconds = 0.0;
    std::vector<TrajectoryStep> steps;
};

struct TrainResult {
    HyperNetwork hypernet;
    std::vector<EpochLog> log;
    bool early_stopped = false;
};

// Fits the hypernetwork input normalizer on W_0 factors of the pool batches.
void calibrate_hypernetwork(HyperNetwork& h, const ModelWeights& w0, std::span<const KnowledgeRecord> pool,
                            int batch_size);

// Gradient ascent on J. Dispatches to train_no_rl_baseline for Ablation::no_rl.
TrainResult train(const ModelWeights& w0, const HyperNetwork& h, StreamSampler& sampler, const TrainerConfig& cfg);

// Single-edit training: each step edits W_0, backpropagates -r_t at once and
// never chains edits.
TrainResult train_no_rl_baseline(const ModelWeights& w0, const HyperNetwork& h, StreamSampler& sampler,
                                 const TrainerConfig& cfg);

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace rledit
