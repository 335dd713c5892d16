#pragma once

// Per-step edit reward and trajectory return.
//   L_base = L_e + lambda_loc * L_loc
//   L_back = sum over the previous k batches of mu^(t-i) * (L_e_i + lambda_loc * L_loc_i), under W_{t-1}
//   r      = -(L_base + L_back + eta * ||update||^2)
//   J      = sum_i gamma^i r_i, i from 1

#include <map>
#include <span>
#include <string>
#include <vector>

#include "rledit/autodiff.hpp"
#include "rledit/data.hpp"
#include "rledit/hypernet.hpp"
#include "rledit/model.hpp"

namespace rledit {

struct HyperParams {
    int k = 10;
    double mu = 0.95;
    double gamma = 1.0;
    double lambda_loc = 0.6;
    double eta = 1e-4;
    double lr_inner = 1.0;
    double lr_meta = 1e-3;
    int stream_len = 20;
    int batch_size = 4;
    double noise_std = 0.0;
    int rank = 32;

    // Throws ConfigError naming the field.
    void validate() const;
};

struct RewardBreakdown {
    double l_edit = 0.0;
    double l_loc = 0.0;
    double l_base = 0.0;
    double l_back = 0.0;
    double reg = 0.0;
    double r = 0.0;
};

// Caches W_0 log-probabilities of locality sequences by record id so the
// reference side of the KL term is computed once per record.
class LocalityReference {
public:
    explicit LocalityReference(ModelWeights w0) : w0_(std::move(w0)) {}
    const ModelWeights& weights() const noexcept { return w0_; }
    // Constant (rows x vocab) reference log-probs for the stacked locality sequences.
    ad::Tensor log_probs(std::span<const KnowledgeRecord> records);
    std::size_t cached() const noexcept { return cache_.size(); }

private:
    ModelWeights w0_;
    std::map<int, std::vector<double>> cache_;
};

struct BaseLoss {
    ad::Tensor l_edit;  // mean paraphrase answer NLL over the batch
    ad::Tensor l_loc;   // mean KL to W_0 over every locality row
    ad::Tensor total;   // l_edit + lambda_loc * l_loc
};

BaseLoss base_loss(const ModelWeights& cur, LocalityReference& ref, std::span<const KnowledgeRecord> batch,
                   double lambda_loc);
BaseLoss base_loss(const ModelWeights& cur, const ModelWeights& w0, const KnowledgeRecord& record, double lambda_loc);

// Coefficients for a history of `n` entries, oldest first: (mu^n, ..., mu^1).
std::vector<double> backtracking_weights(std::size_t n, double mu);

// Decayed sum of base losses over `history` (oldest first) under `cur`, one
// stacked forward pass. Empty history gives an exact constant 0.
ad::Tensor backtracking_loss(const ModelWeights& cur, LocalityReference& ref, std::span<const RecordBatch> history,
                             double mu, double lambda_loc);

struct StepReward {
    ad::Tensor r;
    RewardBreakdown breakdown;
};

StepReward step_reward(const BaseLoss& base, const ad::Tensor& back, const EditUpdate& update, double eta);

// sum_{i=1..n} gamma^i r_i.
ad::Tensor trajectory_return(std::span<const ad::Tensor> rewards, double gamma);

// Training-log CSV row: epoch, step, l_edit, l_loc, l_base, l_back, reg, r (10 significant digits).
std::string breakdown_csv_header();
std::string breakdown_csv_row(int epoch, int step, const RewardBreakdown& b);

}  // namespace rledit
