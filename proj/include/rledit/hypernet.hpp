#pragma once

// Editor hypernetwork. A linear layer's weight gradient on a token batch is
// sum_p delta[p] u[p]^T; the hypernetwork maps each (u[p], delta[p]) pair to
// pseudo-factors and the edit is the sum of their outer products.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "rledit/autodiff.hpp"
#include "rledit/model.hpp"

namespace rledit {

struct LayerFactors {
    LayerSelector layer;
    ad::Tensor u;      // tokens x fan_in, detached
    ad::Tensor delta;  // tokens x fan_out, detached
};

struct RankOneFactors {
    std::vector<LayerFactors> layers;
    double loss = 0.0;  // answer NLL the factors were taken from

    const LayerFactors& at(const LayerSelector& layer) const;
};

// Factors of the answer-span NLL gradient for every editable layer. Rows are
// the token positions that carry gradient into the layer: answer positions for
// the final block, every position for earlier blocks (attention spreads the
// loss backwards). Throws ContractError for non-linear selectors.
RankOneFactors collect_rank_one_factors(const ModelWeights& w, std::span<const TokenSequence> seqs);
RankOneFactors collect_rank_one_factors(const ModelWeights& w, const TokenSequence& seq);

struct EditUpdate {
    std::vector<std::pair<LayerSelector, ad::Tensor>> deltas;  // fan_out x fan_in per layer
    int step = 0;

    const ad::Tensor& at(const LayerSelector& layer) const;
    bool all_finite() const;
    double norm_sq() const;
};

class HyperNetwork {
public:
    // Parameters shared by every editable layer of one (fan_in, fan_out) shape.
    struct Group {
        std::size_t fan_in = 0;
        std::size_t fan_out = 0;
        // Four-layer MLP over [u_hat, delta_hat]; the last layer is split into
        // the u and delta heads and starts at zero.
        ad::Tensor w1, b1, w2, b2, w3, b3, w4u, b4u, w4d, b4d;
        // Step size on the pseudo-gradient, zero at initialization.
        ad::Tensor edit_scale;
        // Per-feature input statistics, constant with respect to theta.
        std::vector<double> mean_u, std_u, mean_d, std_d;
        // Typical Frobenius norm of a raw gradient; makes edit_scale unit-free.
        double grad_norm_ref = 1.0;

        std::vector<ad::Tensor> parameters() const;
    };

    HyperNetwork() = default;
    static HyperNetwork init(const ModelConfig& cfg, int rank, std::uint64_t seed, double lr_inner = 1.0);

    // Pure given (theta, factors). Differentiable in theta, constant in the factors.
    EditUpdate transform(const RankOneFactors& factors) const;

    const Group& group_for(std::size_t fan_in, std::size_t fan_out) const;
    const std::vector<Group>& groups() const noexcept { return groups_; }
    std::vector<ad::Tensor> parameters() const;
    std::size_t parameter_count() const;
    int rank() const noexcept { return rank_; }
    double lr_inner() const noexcept { return lr_inner_; }

    // Fits the input normalizer to factor samples; frozen afterwards.
    void calibrate(std::span<const RankOneFactors> samples);

    HyperNetwork clone() const;
    bool bitwise_equal(const HyperNetwork& other) const;

    // Same container as model checkpoints with magic "RLH1".
    void save(const std::filesystem::path& path) const;
    static HyperNetwork load(const std::filesystem::path& path);

private:
    std::vector<Group> groups_;
    int rank_ = 0;
    double lr_inner_ = 1.0;
};

// Analytic parameter count of one group.
std::size_t group_parameter_count(std::size_t fan_in, std::size_t fan_out, std::size_t rank);

// W_t = W_{t-1} + update (+ zero-mean Gaussian noise of the given std). The sum
// stays on the tape; non-editable tensors are shared, untouched.
ModelWeights apply_update(const ModelWeights& w, const EditUpdate& update, double noise_std = 0.0,
                          std::mt19937_64* rng = nullptr);

}  // namespace rledit
