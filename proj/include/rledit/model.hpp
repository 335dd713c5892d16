#pragma once

// A tiny pre-norm causal transformer over an integer vocabulary, the editable
// language model. Weight matrices follow the (fan_out x fan_in) convention, so a
// linear layer computes y = x W^T + b on row-major token activations.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rledit/autodiff.hpp"

namespace rledit {

// Names one weight matrix as "<kind>@<block>", e.g. "ffn_up@1".
struct LayerSelector {
    std::string kind;
    int block = 0;

    static LayerSelector parse(const std::string& text);
    std::string str() const;
    // Linear projections admit the rank-1 gradient decomposition.
    bool is_linear() const;
    std::string weight_name() const;

    auto operator<=>(const LayerSelector&) const = default;
};

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 2;
    int d_ff = 64;
    int n_heads = 2;
    int max_seq_len = 24;
    std::vector<LayerSelector> editable_layers{{"ffn_up", 1}, {"ffn_down", 1}};

    // Throws ConfigError naming the violated field.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// tokens = prompt followed by the answer span starting at prompt_len.
struct TokenSequence {
    std::vector<int> tokens;
    int prompt_len = 0;

    void validate(const ModelConfig& cfg) const;
    std::span<const int> prompt() const { return {tokens.data(), static_cast<std::size_t>(prompt_len)}; }
    std::span<const int> answer() const {
        return {tokens.data() + prompt_len, tokens.size() - static_cast<std::size_t>(prompt_len)};
    }
    bool operator==(const TokenSequence&) const = default;
};

TokenSequence make_sequence(std::span<const int> prompt, std::span<const int> answer);

class ModelWeights {
public:
    ModelWeights() = default;
    explicit ModelWeights(ModelConfig cfg) : config_(std::move(cfg)) {}

    static ModelWeights initialize(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const ad::Tensor& at(const std::string& name) const;
    const ad::Tensor& at(const LayerSelector& layer) const;
    void set(const std::string& name, ad::Tensor t);
    void set(const LayerSelector& layer, ad::Tensor t);
    const std::map<std::string, ad::Tensor>& tensors() const noexcept { return tensors_; }

    // Deep copy with every tensor a fresh leaf. Editable matrices optionally
    // require gradients.
    ModelWeights detached(bool editable_requires_grad = false) const;
    // All tensors as trainable leaves (used by pretraining).
    ModelWeights trainable_copy() const;

    bool bitwise_equal(const ModelWeights& other) const;

    // Binary checkpoint: magic "RLE1", config as little-endian int32, then
    // (name length, name, rows, cols, row-major float64) per tensor.
    void save(const std::filesystem::path& path) const;
    static ModelWeights load(const std::filesystem::path& path);

private:
    ModelConfig config_;
    std::map<std::string, ad::Tensor> tensors_;
};

// Rows of a stacked batch of sequences. Each sequence contributes its tokens
// except the last, so row p predicts token p + 1.
struct SequenceBatch {
    std::vector<int> inputs;
    std::vector<int> positions;
    std::vector<int> targets;
    std::vector<bool> answer_mask;   // row predicts an answer token
    std::vector<bool> all_mask;      // every row
    std::vector<ad::Segment> segments;

    static SequenceBatch build(std::span<const TokenSequence> seqs, const ModelConfig& cfg);
    std::size_t rows() const { return inputs.size(); }
};

// Per-layer activations captured during a forward pass.
struct LayerTap {
    ad::Tensor input;       // u: rows x fan_in
    ad::Tensor preactivation;  // z = u W^T + b: rows x fan_out
};

struct ForwardTrace {
    std::map<LayerSelector, LayerTap> taps;
};

// Logits for every row of the batch; taps editable layers when a trace is given.
ad::Tensor forward_logits(const ModelWeights& w, const SequenceBatch& batch, ForwardTrace* trace = nullptr);
ad::Tensor forward_log_probs(const ModelWeights& w, const SequenceBatch& batch, ForwardTrace* trace = nullptr);

// Mean NLL over answer-span positions only.
ad::Tensor answer_nll(const ModelWeights& w, const TokenSequence& seq);
ad::Tensor answer_nll(const ModelWeights& w, std::span<const TokenSequence> seqs);

// Mean token-level KL[p_ref || p_cur] over every prediction row of the
// sequences; the reference side is a constant.
ad::Tensor answer_kl(const ModelWeights& ref, const ModelWeights& cur, const TokenSequence& seq);
ad::Tensor answer_kl(const ModelWeights& ref, const ModelWeights& cur, std::span<const TokenSequence> seqs);
// Same, with precomputed reference log-probabilities for `batch`.
ad::Tensor answer_kl(const ad::Tensor& ref_log_probs, const ModelWeights& cur, const SequenceBatch& batch);

// Iterated argmax continuation; ties resolve to the lowest token index.
std::vector<int> greedy_decode(const ModelWeights& w, std::span<const int> prompt, int max_new);

// True when the greedy continuation of the prompt equals the answer span exactly.
bool exact_match(const ModelWeights& w, const TokenSequence& seq);

struct PretrainOptions {
    int steps = 600;
    double lr = 1e-2;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    ModelWeights weights;
    double final_loss = 0.0;
};

// Adam on the answer-span NLL of the whole corpus (full batch).
PretrainResult pretrain(const ModelConfig& cfg, std::span<const TokenSequence> corpus, const PretrainOptions& opts);

}  // namespace rledit
