#include "rledit/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <random>

#include "rledit/errors.hpp"
#include "rledit/optim.hpp"
#include "rledit/tensor_io.hpp"

namespace rledit {
namespace {

// Order fixes the integer codes used in checkpoints.
constexpr std::array<const char*, 8> kKinds{"attn_q", "attn_k", "attn_v", "attn_o",
                                            "ffn_up", "ffn_down", "ln1", "ln2"};
constexpr std::array<char, 4> kMagic{'R', 'L', 'E', '1'};

int kind_code(const std::string& kind) {
    for (std::size_t i = 0; i < kKinds.size(); ++i)
        if (kind == kKinds[i]) return static_cast<int>(i);
    return -1;
}

std::string block_prefix(int b) { return "blocks." + std::to_string(b) + "."; }

ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
    return ad::add(ad::matmul(x, ad::transpose(w)), b);
}

ad::Tensor normal_tensor(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return ad::Tensor::from_values(rows, cols, std::move(v));
}

}  // namespace

// ---------------------------------------------------------------- LayerSelector

LayerSelector LayerSelector::parse(const std::string& text) {
    const auto at = text.find('@');
    if (at == std::string::npos || at == 0 || at + 1 == text.size()) {
        throw ConfigError("model.editable_layers", "selector '" + text + "' is not <kind>@<block>");
    }
    LayerSelector s;
    s.kind = text.substr(0, at);
    if (kind_code(s.kind) < 0) throw ConfigError("model.editable_layers", "unknown layer kind '" + s.kind + "'");
    const std::string num = text.substr(at + 1);
    if (!std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw ConfigError("model.editable_layers", "bad block index in '" + text + "'");
    }
    s.block = std::stoi(num);
    return s;
}

std::string LayerSelector::str() const { return kind + "@" + std::to_string(block); }

bool LayerSelector::is_linear() const { return kind != "ln1" && kind != "ln2"; }

std::string LayerSelector::weight_name() const {
    return block_prefix(block) + kind + (is_linear() ? "" : ".gain");
}

// ---------------------------------------------------------------- config and sequences

void ModelConfig::validate() const {
    auto positive = [](int v, const char* field) {
        if (v <= 0) throw ConfigError(field, "must be positive");
    };
    positive(vocab_size, "model.vocab_size");
    positive(d_model, "model.d_model");
    positive(n_layers, "model.n_layers");
    positive(d_ff, "model.d_ff");
    positive(n_heads, "model.n_heads");
    positive(max_seq_len, "model.max_seq_len");
    if (d_model % n_heads != 0) throw ConfigError("model.n_heads", "must divide d_model");
    if (editable_layers.empty()) throw ConfigError("model.editable_layers", "must not be empty");
    for (const auto& l : editable_layers) {
        if (kind_code(l.kind) < 0) throw ConfigError("model.editable_layers", "unknown kind " + l.kind);
        if (l.block < 0 || l.block >= n_layers) {
            throw ConfigError("model.editable_layers", l.str() + " names a block outside [0, n_layers)");
        }
        if (std::count(editable_layers.begin(), editable_layers.end(), l) != 1) {
            throw ConfigError("model.editable_layers", l.str() + " listed twice");
        }
    }
}

void TokenSequence::validate(const ModelConfig& cfg) const {
    const auto n = static_cast<int>(tokens.size());
    if (prompt_len <= 0 || prompt_len >= n) {
        throw DegenerateInputError("sequence needs a nonempty prompt and answer (prompt_len " +
                                   std::to_string(prompt_len) + ", length " + std::to_string(n) + ")");
    }
    if (n > cfg.max_seq_len) throw DimensionError("sequence longer than max_seq_len");
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) throw DimensionError("token " + std::to_string(t) + " outside vocabulary");
    }
}

TokenSequence make_sequence(std::span<const int> prompt, std::span<const int> answer) {
    TokenSequence s;
    s.tokens.assign(prompt.begin(), prompt.end());
    s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
    s.prompt_len = static_cast<int>(prompt.size());
    return s;
}

SequenceBatch SequenceBatch::build(std::span<const TokenSequence> seqs, const ModelConfig& cfg) {
    if (seqs.empty()) throw DegenerateInputError("empty sequence batch");
    SequenceBatch b;
    for (const auto& s : seqs) {
        s.validate(cfg);
        const std::size_t offset = b.inputs.size();
        const auto rows = s.tokens.size() - 1;
        for (std::size_t p = 0; p < rows; ++p) {
            b.inputs.push_back(s.tokens[p]);
            b.positions.push_back(static_cast<int>(p));
            b.targets.push_back(s.tokens[p + 1]);
            b.answer_mask.push_back(static_cast<int>(p) + 1 >= s.prompt_len);
            b.all_mask.push_back(true);
        }
        b.segments.push_back({offset, rows});
    }
    return b;
}

// ---------------------------------------------------------------- weights

ModelWeights ModelWeights::initialize(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const auto V = static_cast<std::size_t>(cfg.vocab_size), D = static_cast<std::size_t>(cfg.d_model),
               F = static_cast<std::size_t>(cfg.d_ff), L = static_cast<std::size_t>(cfg.max_seq_len);
    ModelWeights w(cfg);
    w.set("tok_emb", normal_tensor(V, D, 0.5, rng));
    w.set("pos_emb", normal_tensor(L, D, 0.5, rng));
    auto add_linear = [&](const std::string& name, std::size_t out, std::size_t in) {
        w.set(name, normal_tensor(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        w.set(name + ".bias", ad::Tensor::zeros(1, out));
    };
    for (int b = 0; b < cfg.n_layers; ++b) {
        const std::string p = block_prefix(b);
        w.set(p + "ln1.gain", ad::Tensor::filled(1, D, 1.0));
        w.set(p + "ln1.bias", ad::Tensor::zeros(1, D));
        add_linear(p + "attn_q", D, D);
        add_linear(p + "attn_k", D, D);
        add_linear(p + "attn_v", D, D);
        add_linear(p + "attn_o", D, D);
        w.set(p + "ln2.gain", ad::Tensor::filled(1, D, 1.0));
        w.set(p + "ln2.bias", ad::Tensor::zeros(1, D));
        add_linear(p + "ffn_up", F, D);
        add_linear(p + "ffn_down", D, F);
    }
    w.set("ln_f.gain", ad::Tensor::filled(1, D, 1.0));
    w.set("ln_f.bias", ad::Tensor::zeros(1, D));
    w.set("head", normal_tensor(V, D, 1.0 / std::sqrt(static_cast<double>(D)), rng));
    return w;
}

const ad::Tensor& ModelWeights::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("no weight named " + name);
    return it->second;
}

const ad::Tensor& ModelWeights::at(const LayerSelector& layer) const { return at(layer.weight_name()); }

void ModelWeights::set(const std::string& name, ad::Tensor t) {
    auto it = tensors_.find(name);
    if (it != tensors_.end() && !(it->second.shape() == t.shape())) {
        throw DimensionError("weight " + name + " is " + it->second.shape().str() + ", got " + t.shape().str());
    }
    tensors_[name] = std::move(t);
}

void ModelWeights::set(const LayerSelector& layer, ad::Tensor t) { set(layer.weight_name(), std::move(t)); }

ModelWeights ModelWeights::detached(bool editable_requires_grad) const {
    ModelWeights out(config_);
    for (const auto& [name, t] : tensors_) out.tensors_[name] = t.detach(false);
    if (editable_requires_grad) {
        for (const auto& l : config_.editable_layers) out.set(l, at(l).detach(true));
    }
    return out;
}

ModelWeights ModelWeights::trainable_copy() const {
    ModelWeights out(config_);
    for (const auto& [name, t] : tensors_) out.tensors_[name] = t.detach(true);
    return out;
}

bool ModelWeights::bitwise_equal(const ModelWeights& other) const {
    if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [name, t] : tensors_) {
        auto it = other.tensors_.find(name);
        if (it == other.tensors_.end() || !(it->second.shape() == t.shape())) return false;
        const auto a = t.values();
        const auto b = it->second.values();
        // Bit patterns, so that -0.0 and NaN payloads count as differences.
        if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

void ModelWeights::save(const std::filesystem::path& path) const {
    TensorContainer c;
    c.magic = kMagic;
    c.fields = {config_.vocab_size, config_.d_model, config_.n_layers, config_.d_ff,
                config_.n_heads,    config_.max_seq_len, static_cast<std::int32_t>(config_.editable_layers.size())};
    for (const auto& l : config_.editable_layers) {
        c.fields.push_back(kind_code(l.kind));
        c.fields.push_back(l.block);
    }
    for (const auto& [name, t] : tensors_) c.tensors.emplace_back(name, t);
    write_container(path, c);
}

ModelWeights ModelWeights::load(const std::filesystem::path& path) {
    TensorContainer c = read_container(path, kMagic);
    const auto& f = c.fields;
    if (f.size() < 7) throw ParseError(path.string(), 0, "model header too short");
    ModelConfig cfg;
    cfg.vocab_size = f[0];
    cfg.d_model = f[1];
    cfg.n_layers = f[2];
    cfg.d_ff = f[3];
    cfg.n_heads = f[4];
    cfg.max_seq_len = f[5];
    const auto n_edit = static_cast<std::size_t>(f[6]);
    if (f.size() != 7 + 2 * n_edit) throw ParseError(path.string(), 0, "model header field count mismatch");
    cfg.editable_layers.clear();
    for (std::size_t i = 0; i < n_edit; ++i) {
        const int code = f[7 + 2 * i];
        if (code < 0 || code >= static_cast<int>(kKinds.size())) throw ParseError(path.string(), 0, "bad layer code");
        cfg.editable_layers.push_back({kKinds[static_cast<std::size_t>(code)], f[8 + 2 * i]});
    }
    cfg.validate();
    ModelWeights w(cfg);
    for (auto& [name, t] : c.tensors) w.tensors_[name] = std::move(t);
    // Every tensor an initialized model would have must be present with the same shape.
    const ModelWeights shape_ref = initialize(cfg, 0);
    for (const auto& [name, t] : shape_ref.tensors_) {
        auto it = w.tensors_.find(name);
        if (it == w.tensors_.end() || !(it->second.shape() == t.shape())) {
            throw ParseError(path.string(), 0, "missing or misshapen tensor " + name);
        }
    }
    return w;
}

// ---------------------------------------------------------------- forward

ad::Tensor forward_logits(const ModelWeights& w, const SequenceBatch& batch, ForwardTrace* trace) {
    const ModelConfig& cfg = w.config();
    ad::Tensor x = ad::add(ad::gather_rows(w.at("tok_emb"), batch.inputs), ad::gather_rows(w.at("pos_emb"), batch.positions));
    auto proj = [&](const ad::Tensor& in, int b, const char* kind) {
        const std::string name = block_prefix(b) + kind;
        ad::Tensor z = linear(in, w.at(name), w.at(name + ".bias"));
        if (trace) trace->taps[{kind, b}] = {in, z};
        return z;
    };
    for (int b = 0; b < cfg.n_layers; ++b) {
        const std::string p = block_prefix(b);
        ad::Tensor a = ad::layer_norm(x, w.at(p + "ln1.gain"), w.at(p + "ln1.bias"));
        ad::Tensor att = ad::causal_attention(proj(a, b, "attn_q"), proj(a, b, "attn_k"), proj(a, b, "attn_v"),
                                              batch.segments, static_cast<std::size_t>(cfg.n_heads));
        x = ad::add(x, proj(att, b, "attn_o"));
        ad::Tensor m = ad::layer_norm(x, w.at(p + "ln2.gain"), w.at(p + "ln2.bias"));
        ad::Tensor hidden = ad::gelu(proj(m, b, "ffn_up"));
        x = ad::add(x, proj(hidden, b, "ffn_down"));
    }
    x = ad::layer_norm(x, w.at("ln_f.gain"), w.at("ln_f.bias"));
    return ad::matmul(x, ad::transpose(w.at("head")));
}

ad::Tensor forward_log_probs(const ModelWeights& w, const SequenceBatch& batch, ForwardTrace* trace) {
    return ad::log_softmax(forward_logits(w, batch, trace));
}

ad::Tensor answer_nll(const ModelWeights& w, const TokenSequence& seq) { return answer_nll(w, std::span(&seq, 1)); }

ad::Tensor answer_nll(const ModelWeights& w, std::span<const TokenSequence> seqs) {
    const auto batch = SequenceBatch::build(seqs, w.config());
    return ad::nll_loss(forward_log_probs(w, batch), batch.targets, batch.answer_mask);
}

ad::Tensor answer_kl(const ModelWeights& ref, const ModelWeights& cur, const TokenSequence& seq) {
    return answer_kl(ref, cur, std::span(&seq, 1));
}

ad::Tensor answer_kl(const ModelWeights& ref, const ModelWeights& cur, std::span<const TokenSequence> seqs) {
    if (!(ref.config() == cur.config())) throw ContractError("answer_kl: weight sets have different configs");
    const auto batch = SequenceBatch::build(seqs, cur.config());
    ad::Tensor ref_lp;
    {
        ad::NoGradGuard guard;
        ref_lp = forward_log_probs(ref, batch);
    }
    return answer_kl(ref_lp, cur, batch);
}

ad::Tensor answer_kl(const ad::Tensor& ref_log_probs, const ModelWeights& cur, const SequenceBatch& batch) {
    return ad::kl_divergence(ref_log_probs, forward_log_probs(cur, batch), batch.all_mask);
}

std::vector<int> greedy_decode(const ModelWeights& w, std::span<const int> prompt, int max_new) {
    if (prompt.empty()) throw DegenerateInputError("greedy_decode: empty prompt");
    const ModelConfig& cfg = w.config();
    ad::NoGradGuard guard;
    std::vector<int> ctx(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new && static_cast<int>(ctx.size()) < cfg.max_seq_len; ++step) {
        SequenceBatch b;
        for (std::size_t p = 0; p < ctx.size(); ++p) {
            b.inputs.push_back(ctx[p]);
            b.positions.push_back(static_cast<int>(p));
        }
        b.segments.push_back({0, ctx.size()});
        const ad::Tensor logits = forward_logits(w, b);
        const auto v = logits.values();
        const auto V = static_cast<std::size_t>(cfg.vocab_size);
        const double* last = v.data() + (ctx.size() - 1) * V;
        // max_element returns the first maximum, i.e. the lowest index on ties.
        const int next = static_cast<int>(std::max_element(last, last + V) - last);
        out.push_back(next);
        ctx.push_back(next);
    }
    return out;
}

bool exact_match(const ModelWeights& w, const TokenSequence& seq) {
    const auto answer = seq.answer();
    const auto decoded = greedy_decode(w, seq.prompt(), static_cast<int>(answer.size()));
    return std::equal(answer.begin(), answer.end(), decoded.begin(), decoded.end());
}

// ---------------------------------------------------------------- pretraining

PretrainResult pretrain(const ModelConfig& cfg, std::span<const TokenSequence> corpus, const PretrainOptions& opts) {
    if (corpus.empty()) throw DegenerateInputError("pretrain: empty corpus");
    ModelWeights w = ModelWeights::initialize(cfg, opts.seed).trainable_copy();
    const auto batch = SequenceBatch::build(corpus, cfg);
    std::vector<ad::Tensor> params;
    for (const auto& [name, t] : w.tensors()) params.push_back(t);
    AdamW opt(params, {.lr = opts.lr});
    double loss_value = 0.0;
    for (int step = 0; step <= opts.steps; ++step) {
        const ad::Tensor loss = ad::nll_loss(forward_log_probs(w, batch), batch.targets, batch.answer_mask);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw TrainingFailure(step, "pretraining loss is not finite");
        if (step == opts.steps) break;
        opt.zero_grad();
        ad::backward(loss);
        opt.step();
    }
    return {w.detached(), loss_value};
}

}  // namespace rledit
