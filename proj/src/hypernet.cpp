#include "rledit/hypernet.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "rledit/errors.hpp"
#include "rledit/tensor_io.hpp"

namespace rledit {
namespace {

constexpr std::array<char, 4> kMagic{'R', 'L', 'H', '1'};

// Rows outside the answer span only carry gradient when the layer sits below
// an attention mixing step, i.e. in an earlier block or as a key/value projection.
bool answer_rows_suffice(const LayerSelector& l, const ModelConfig& cfg) {
    if (l.block != cfg.n_layers - 1) return false;
    return l.kind != "attn_k" && l.kind != "attn_v";
}

ad::Tensor select_rows(std::span<const double> values, std::size_t cols, const std::vector<std::size_t>& rows) {
    std::vector<double> out;
    out.reserve(rows.size() * cols);
    for (auto r : rows) out.insert(out.end(), values.begin() + static_cast<long>(r * cols),
                                   values.begin() + static_cast<long>((r + 1) * cols));
    return ad::Tensor::from_values(rows.size(), cols, std::move(out));
}

ad::Tensor normal_tensor(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return ad::Tensor::from_values(rows, cols, std::move(v), true);
}

ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
    return ad::add(ad::matmul(x, ad::transpose(w)), b);
}

ad::Tensor row_tensor(const std::vector<double>& v) { return ad::Tensor::from_values(1, v.size(), v); }

std::vector<double> tensor_row(const ad::Tensor& t) {
    const auto v = t.values();
    return {v.begin(), v.end()};
}

// Per-feature mean and std of a set of row-major matrices sharing a width.
void feature_stats(const std::vector<const ad::Tensor*>& mats, std::size_t cols, std::vector<double>& mean,
                   std::vector<double>& stddev) {
    mean.assign(cols, 0.0);
    stddev.assign(cols, 1.0);
    std::size_t n = 0;
    for (const auto* m : mats) n += m->rows();
    if (n == 0) return;
    for (const auto* m : mats) {
        const auto v = m->values();
        for (std::size_t r = 0; r < m->rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) mean[c] += v[r * cols + c];
    }
    for (auto& x : mean) x /= static_cast<double>(n);
    std::vector<double> var(cols, 0.0);
    for (const auto* m : mats) {
        const auto v = m->values();
        for (std::size_t r = 0; r < m->rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = v[r * cols + c] - mean[c];
                var[c] += d * d;
            }
    }
    for (std::size_t c = 0; c < cols; ++c) {
        const double s = std::sqrt(var[c] / static_cast<double>(n));
        stddev[c] = s > 1e-12 ? s : 1.0;
    }
}

bool same_bits(const ad::Tensor& a, const ad::Tensor& b) {
    if (!(a.shape() == b.shape())) return false;
    return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// ---------------------------------------------------------------- factors

const LayerFactors& RankOneFactors::at(const LayerSelector& layer) const {
    for (const auto& f : layers)
        if (f.layer == layer) return f;
    throw ContractError("no factors for layer " + layer.str());
}

RankOneFactors collect_rank_one_factors(const ModelWeights& w, const TokenSequence& seq) {
    return collect_rank_one_factors(w, std::span(&seq, 1));
}

RankOneFactors collect_rank_one_factors(const ModelWeights& w, std::span<const TokenSequence> seqs) {
    const ModelConfig& cfg = w.config();
    for (const auto& l : cfg.editable_layers) {
        if (!l.is_linear()) throw ContractError("layer " + l.str() + " is not a linear projection");
    }
    const auto batch = SequenceBatch::build(seqs, cfg);
    RankOneFactors out;
    {
        ad::GradModeGuard tape(true);
        const ModelWeights local = w.detached(true);
        ForwardTrace trace;
        const ad::Tensor loss = ad::nll_loss(forward_log_probs(local, batch, &trace), batch.targets, batch.answer_mask);
        out.loss = loss.item();
        ad::backward(loss);

        std::vector<std::size_t> answer_rows, all_rows;
        for (std::size_t r = 0; r < batch.rows(); ++r) {
            all_rows.push_back(r);
            if (batch.answer_mask[r]) answer_rows.push_back(r);
        }
        for (const auto& l : cfg.editable_layers) {
            const LayerTap& tap = trace.taps.at(l);
            const auto& rows = answer_rows_suffice(l, cfg) ? answer_rows : all_rows;
            const std::vector<double> dz = tap.preactivation.grad();
            out.layers.push_back({l, select_rows(tap.input.values(), tap.input.cols(), rows),
                                  select_rows(dz, tap.preactivation.cols(), rows)});
        }
    }
    return out;
}

// ---------------------------------------------------------------- updates

const ad::Tensor& EditUpdate::at(const LayerSelector& layer) const {
    for (const auto& [l, t] : deltas)
        if (l == layer) return t;
    throw ContractError("no update for layer " + layer.str());
}

bool EditUpdate::all_finite() const {
    for (const auto& [l, t] : deltas)
        for (double v : t.values())
            if (!std::isfinite(v)) return false;
    return true;
}

double EditUpdate::norm_sq() const {
    double s = 0.0;
    for (const auto& [l, t] : deltas)
        for (double v : t.values()) s += v * v;
    return s;
}

ModelWeights apply_update(const ModelWeights& w, const EditUpdate& update, double noise_std, std::mt19937_64* rng) {
    if (noise_std < 0.0) throw ContractError("apply_update: negative noise std");
    if (noise_std > 0.0 && rng == nullptr) throw ContractError("apply_update: noise requires an rng");
    ModelWeights out = w;
    for (const auto& [layer, delta] : update.deltas) {
        const ad::Tensor& cur = w.at(layer);
        if (!(cur.shape() == delta.shape())) {
            throw DimensionError("update for " + layer.str() + " is " + delta.shape().str() + ", weight is " +
                                 cur.shape().str());
        }
        ad::Tensor next = ad::add(cur, delta);
        if (noise_std > 0.0) {
            std::normal_distribution<double> dist(0.0, noise_std);
            std::vector<double> noise(cur.size());
            for (auto& x : noise) x = dist(*rng);
            next = ad::add(next, ad::Tensor::from_values(cur.rows(), cur.cols(), std::move(noise)));
        }
        out.set(layer, next);
    }
    return out;
}

// ---------------------------------------------------------------- hypernetwork

std::size_t group_parameter_count(std::size_t fan_in, std::size_t fan_out, std::size_t rank) {
    const std::size_t d = fan_in + fan_out;
    return (d * rank + rank) + 2 * (rank * rank + rank) + (rank * fan_in + fan_in) + (rank * fan_out + fan_out) + 1;
}

std::vector<ad::Tensor> HyperNetwork::Group::parameters() const {
    return {w1, b1, w2, b2, w3, b3, w4u, b4u, w4d, b4d, edit_scale};
}

HyperNetwork HyperNetwork::init(const ModelConfig& cfg, int rank, std::uint64_t seed, double lr_inner) {
    cfg.validate();
    if (rank <= 0) throw ConfigError("hyper.rank", "must be positive");
    if (!(lr_inner > 0.0)) throw ConfigError("hyper.lr_inner", "must be positive");
    const ModelWeights shapes = ModelWeights::initialize(cfg, 0);
    HyperNetwork h;
    h.rank_ = rank;
    h.lr_inner_ = lr_inner;
    std::mt19937_64 rng(seed);
    const auto r = static_cast<std::size_t>(rank);
    for (const auto& l : cfg.editable_layers) {
        if (!l.is_linear()) throw ContractError("layer " + l.str() + " is not a linear projection");
        const auto& wt = shapes.at(l);
        const std::size_t in = wt.cols(), out = wt.rows();
        const bool known = std::any_of(h.groups_.begin(), h.groups_.end(),
                                       [&](const Group& g) { return g.fan_in == in && g.fan_out == out; });
        if (known) continue;
        Group g;
        g.fan_in = in;
        g.fan_out = out;
        const std::size_t d = in + out;
        g.w1 = normal_tensor(r, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        g.b1 = ad::Tensor::zeros(1, r, true);
        g.w2 = normal_tensor(r, r, 1.0 / std::sqrt(static_cast<double>(r)), rng);
        g.b2 = ad::Tensor::zeros(1, r, true);
        g.w3 = normal_tensor(r, r, 1.0 / std::sqrt(static_cast<double>(r)), rng);
        g.b3 = ad::Tensor::zeros(1, r, true);
        g.w4u = ad::Tensor::zeros(in, r, true);
        g.b4u = ad::Tensor::zeros(1, in, true);
        g.w4d = ad::Tensor::zeros(out, r, true);
        g.b4d = ad::Tensor::zeros(1, out, true);
        g.edit_scale = ad::Tensor::zeros(1, 1, true);
        g.mean_u.assign(in, 0.0);
        g.std_u.assign(in, 1.0);
        g.mean_d.assign(out, 0.0);
        g.std_d.assign(out, 1.0);
        h.groups_.push_back(std::move(g));
    }
    return h;
}

const HyperNetwork::Group& HyperNetwork::group_for(std::size_t fan_in, std::size_t fan_out) const {
    for (const auto& g : groups_)
        if (g.fan_in == fan_in && g.fan_out == fan_out) return g;
    throw ContractError("no hypernetwork group for shape " + std::to_string(fan_out) + "x" + std::to_string(fan_in));
}

std::vector<ad::Tensor> HyperNetwork::parameters() const {
    std::vector<ad::Tensor> out;
    for (const auto& g : groups_) {
        auto p = g.parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::size_t HyperNetwork::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
}

EditUpdate HyperNetwork::transform(const RankOneFactors& factors) const {
    EditUpdate update;
    for (const auto& f : factors.layers) {
        const std::size_t in = f.u.cols(), out = f.delta.cols(), tokens = f.u.rows();
        if (f.delta.rows() != tokens) throw DimensionError("factor token counts differ for " + f.layer.str());
        const Group& g = group_for(in, out);

        // Normalized input rows [u_hat, delta_hat]; constants with respect to theta.
        std::vector<double> x(tokens * (in + out));
        const auto u = f.u.values();
        const auto dl = f.delta.values();
        for (std::size_t p = 0; p < tokens; ++p) {
            double* row = x.data() + p * (in + out);
            for (std::size_t c = 0; c < in; ++c) row[c] = (u[p * in + c] - g.mean_u[c]) / g.std_u[c];
            for (std::size_t c = 0; c < out; ++c) row[in + c] = (dl[p * out + c] - g.mean_d[c]) / g.std_d[c];
        }
        const ad::Tensor xin = ad::Tensor::from_values(tokens, in + out, std::move(x));
        const ad::Tensor h1 = ad::gelu(linear(xin, g.w1, g.b1));
        const ad::Tensor h2 = ad::gelu(linear(h1, g.w2, g.b2));
        const ad::Tensor h3 = ad::gelu(linear(h2, g.w3, g.b3));

        std::vector<double> sd_scaled(g.std_d);
        for (auto& s : sd_scaled) s *= lr_inner_;
        const ad::Tensor u_tilde = ad::add(f.u.detach(), ad::mul(linear(h3, g.w4u, g.b4u), row_tensor(g.std_u)));
        const ad::Tensor d_tilde = ad::add(ad::scale(f.delta.detach(), lr_inner_),
                                           ad::mul(linear(h3, g.w4d, g.b4d), row_tensor(sd_scaled)));
        const ad::Tensor outer = ad::matmul(ad::transpose(d_tilde), u_tilde);
        update.deltas.emplace_back(f.layer, ad::mul(ad::scale(outer, -1.0 / g.grad_norm_ref), g.edit_scale));
    }
    return update;
}

void HyperNetwork::calibrate(std::span<const RankOneFactors> samples) {
    for (auto& g : groups_) {
        std::vector<const ad::Tensor*> us, ds;
        double norm_sum = 0.0;
        std::size_t norm_count = 0;
        for (const auto& s : samples) {
            for (const auto& f : s.layers) {
                if (f.u.cols() != g.fan_in || f.delta.cols() != g.fan_out) continue;
                us.push_back(&f.u);
                ds.push_back(&f.delta);
                ad::NoGradGuard guard;
                norm_sum += std::sqrt(ad::frobenius_norm_sq(ad::matmul(ad::transpose(f.delta), f.u)).item());
                ++norm_count;
            }
        }
        feature_stats(us, g.fan_in, g.mean_u, g.std_u);
        feature_stats(ds, g.fan_out, g.mean_d, g.std_d);
        const double ref = norm_count ? norm_sum / static_cast<double>(norm_count) : 0.0;
        g.grad_norm_ref = ref > 1e-12 ? ref : 1.0;
    }
}

HyperNetwork HyperNetwork::clone() const {
    HyperNetwork h = *this;
    for (auto& g : h.groups_) {
        for (ad::Tensor* t : {&g.w1, &g.b1, &g.w2, &g.b2, &g.w3, &g.b3, &g.w4u, &g.b4u, &g.w4d, &g.b4d, &g.edit_scale})
            *t = t->detach(true);
    }
    return h;
}

bool HyperNetwork::bitwise_equal(const HyperNetwork& other) const {
    if (rank_ != other.rank_ || groups_.size() != other.groups_.size()) return false;
    if (std::memcmp(&lr_inner_, &other.lr_inner_, sizeof(double)) != 0) return false;
    for (std::size_t i = 0; i < groups_.size(); ++i) {
        const Group& a = groups_[i];
        const Group& b = other.groups_[i];
        if (a.fan_in != b.fan_in || a.fan_out != b.fan_out) return false;
        const auto pa = a.parameters(), pb = b.parameters();
        for (std::size_t j = 0; j < pa.size(); ++j)
            if (!same_bits(pa[j], pb[j])) return false;
        if (!same_bits(a.mean_u, b.mean_u) || !same_bits(a.std_u, b.std_u) || !same_bits(a.mean_d, b.mean_d) ||
            !same_bits(a.std_d, b.std_d) ||
            std::memcmp(&a.grad_norm_ref, &b.grad_norm_ref, sizeof(double)) != 0)
            return false;
    }
    return true;
}

namespace {
constexpr std::array<const char*, 11> kParamNames{"w1", "b1", "w2", "b2", "w3", "b3",
                                                  "w4u", "b4u", "w4d", "b4d", "edit_scale"};
}

void HyperNetwork::save(const std::filesystem::path& path) const {
    TensorContainer c;
    c.magic = kMagic;
    c.fields = {rank_, static_cast<std::int32_t>(groups_.size())};
    c.tensors.emplace_back("lr_inner", ad::Tensor::scalar(lr_inner_));
    for (std::size_t i = 0; i < groups_.size(); ++i) {
        const Group& g = groups_[i];
        c.fields.push_back(static_cast<std::int32_t>(g.fan_in));
        c.fields.push_back(static_cast<std::int32_t>(g.fan_out));
        const std::string p = "group" + std::to_string(i) + ".";
        const auto params = g.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) c.tensors.emplace_back(p + kParamNames[j], params[j]);
        c.tensors.emplace_back(p + "mean_u", row_tensor(g.mean_u));
        c.tensors.emplace_back(p + "std_u", row_tensor(g.std_u));
        c.tensors.emplace_back(p + "mean_d", row_tensor(g.mean_d));
        c.tensors.emplace_back(p + "std_d", row_tensor(g.std_d));
        c.tensors.emplace_back(p + "grad_norm_ref", ad::Tensor::scalar(g.grad_norm_ref));
    }
    write_container(path, c);
}

HyperNetwork HyperNetwork::load(const std::filesystem::path& path) {
    TensorContainer c = read_container(path, kMagic);
    const auto& f = c.fields;
    const std::string where = path.string();
    if (f.size() < 2 || f[0] <= 0 || f[1] < 0 || f.size() != 2 + 2 * static_cast<std::size_t>(f[1])) {
        throw ParseError(where, 0, "bad hypernetwork header");
    }
    std::map<std::string, ad::Tensor> named;
    for (auto& [name, t] : c.tensors) named[name] = t;
    auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        auto it = named.find(name);
        if (it == named.end() || it->second.rows() != rows || it->second.cols() != cols) {
            throw ParseError(where, 0, "missing or misshapen tensor " + name);
        }
        return it->second.detach(true);
    };
    HyperNetwork h;
    h.rank_ = f[0];
    h.lr_inner_ = take("lr_inner", 1, 1).item();
    const auto r = static_cast<std::size_t>(h.rank_);
    for (std::int32_t i = 0; i < f[1]; ++i) {
        Group g;
        if (f[2 + 2 * i] <= 0 || f[3 + 2 * i] <= 0) throw ParseError(where, 0, "bad group shape");
        g.fan_in = static_cast<std::size_t>(f[2 + 2 * i]);
        g.fan_out = static_cast<std::size_t>(f[3 + 2 * i]);
        const std::size_t in = g.fan_in, out = g.fan_out;
        const std::string p = "group" + std::to_string(i) + ".";
        g.w1 = take(p + "w1", r, in + out);
        g.b1 = take(p + "b1", 1, r);
        g.w2 = take(p + "w2", r, r);
        g.b2 = take(p + "b2", 1, r);
        g.w3 = take(p + "w3", r, r);
        g.b3 = take(p + "b3", 1, r);
        g.w4u = take(p + "w4u", in, r);
        g.b4u = take(p + "b4u", 1, in);
        g.w4d = take(p + "w4d", out, r);
        g.b4d = take(p + "b4d", 1, out);
        g.edit_scale = take(p + "edit_scale", 1, 1);
        g.mean_u = tensor_row(take(p + "mean_u", 1, in));
        g.std_u = tensor_row(take(p + "std_u", 1, in));
        g.mean_d = tensor_row(take(p + "mean_d", 1, out));
        g.std_d = tensor_row(take(p + "std_d", 1, out));
        g.grad_norm_ref = take(p + "grad_norm_ref", 1, 1).item();
        h.groups_.push_back(std::move(g));
    }
    return h;
}

}  // namespace rledit
