#include "rledit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "rledit/errors.hpp"

namespace rledit::ad {

std::string Shape::str() const { return std::to_string(rows) + "x" + std::to_string(cols); }

namespace detail {

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::atomic<std::uint64_t> next_id{1};
thread_local bool tape_enabled = true;

NodePtr new_node(Shape shape, std::vector<double> value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->id = next_id.fetch_add(1, std::memory_order_relaxed);
    n->shape = shape;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

// Records an op output. Inputs and the backward rule are only kept when some
// input needs a gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward_fn) {
    bool needs = false;
    if (tape_enabled) {
        for (const auto& in : inputs) needs = needs || in->requires_grad;
    }
    auto n = new_node(shape, std::move(value), needs);
    if (needs) {
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

const NodePtr& checked(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
    return t.node();
}

enum class Broadcast { same, row, scalar };

Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Broadcast::same;
    if (b.rows == 1 && b.cols == a.cols) return Broadcast::row;
    if (b.rows == 1 && b.cols == 1) return Broadcast::scalar;
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

inline std::size_t bidx(Broadcast k, std::size_t i, std::size_t cols) {
    switch (k) {
        case Broadcast::same: return i;
        case Broadcast::row: return i % cols;
        case Broadcast::scalar: return 0;
    }
    return 0;
}

std::size_t count_mask(const std::vector<bool>& mask) {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
    return filled(rows, cols, 0.0, requires_grad);
}

Tensor Tensor::filled(std::size_t rows, std::size_t cols, double v, bool requires_grad) {
    if (rows == 0 || cols == 0) throw DimensionError("tensor shape must be positive");
    return Tensor(new_node({rows, cols}, std::vector<double>(rows * cols, v), requires_grad));
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                           bool requires_grad) {
    if (rows == 0 || cols == 0) throw DimensionError("tensor shape must be positive");
    if (values.size() != rows * cols) {
        throw DimensionError("tensor " + Shape{rows, cols}.str() + " given " +
                             std::to_string(values.size()) + " values");
    }
    return Tensor(new_node({rows, cols}, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return filled(1, 1, v, requires_grad); }

Shape Tensor::shape() const { return checked(*this, "shape")->shape; }

std::span<const double> Tensor::values() const { return checked(*this, "values")->value; }

std::span<double> Tensor::mutable_values() {
    const auto& n = checked(*this, "mutable_values");
    if (!n->is_leaf()) throw ContractError("mutable_values: tensor is not a leaf");
    return n->value;
}

double Tensor::at(std::size_t r, std::size_t c) const {
    const auto& n = checked(*this, "at");
    if (r >= n->shape.rows || c >= n->shape.cols) throw DimensionError("at: index out of range");
    return n->value[r * n->shape.cols + c];
}

double Tensor::item() const {
    const auto& n = checked(*this, "item");
    if (n->shape.size() != 1) throw DimensionError("item: tensor is " + n->shape.str());
    return n->value[0];
}

bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }
bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->is_leaf(); }
bool Tensor::has_grad() const { return !checked(*this, "has_grad")->grad.empty(); }

std::vector<double> Tensor::grad() const {
    const auto& n = checked(*this, "grad");
    if (n->grad.empty()) return std::vector<double>(n->value.size(), 0.0);
    return n->grad;
}

void Tensor::zero_grad() {
    auto& g = checked(*this, "zero_grad")->grad;
    std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const { return detach(false); }

Tensor Tensor::detach(bool requires_grad) const {
    const auto& n = checked(*this, "detach");
    return Tensor(new_node(n->shape, n->value, requires_grad));
}

GradModeGuard::GradModeGuard(bool enabled) : previous_(tape_enabled) { tape_enabled = enabled; }
GradModeGuard::~GradModeGuard() { tape_enabled = previous_; }
bool grad_enabled() noexcept { return tape_enabled; }

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& na = checked(a, "matmul");
    const auto& nb = checked(b, "matmul");
    const std::size_t m = na->shape.rows, k = na->shape.cols, n = nb->shape.cols;
    if (k != nb->shape.rows) {
        throw DimensionError("matmul: " + na->shape.str() + " * " + nb->shape.str());
    }
    std::vector<double> out(m * n, 0.0);
    const double* A = na->value.data();
    const double* B = nb->value.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), {na, nb}, [m, k, n](Node& self) {
        const double* G = self.grad.data();
        Node& a_ = *self.inputs[0];
        Node& b_ = *self.inputs[1];
        if (a_.requires_grad) {
            auto& ga = a_.grad_buffer();
            const double* B = b_.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = B + p * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + p] += s;
                }
            }
        }
        if (b_.requires_grad) {
            auto& gb = b_.grad_buffer();
            const double* A = a_.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    if (aip == 0.0) continue;
                    double* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& x) {
    const auto& nx = checked(x, "transpose");
    const std::size_t r = nx->shape.rows, c = nx->shape.cols;
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = nx->value[i * c + j];
    return make_result({c, r}, std::move(out), {nx}, [r, c](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    const auto& na = checked(a, "add");
    const auto& nb = checked(b, "add");
    const Broadcast kind = broadcast_kind(na->shape, nb->shape, "add");
    const std::size_t cols = na->shape.cols;
    std::vector<double> out(na->value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += nb->value[bidx(kind, i, cols)];
    return make_result(na->shape, std::move(out), {na, nb}, [kind, cols](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[bidx(kind, i, cols)] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const auto& na = checked(a, "sub");
    const auto& nb = checked(b, "sub");
    const Broadcast kind = broadcast_kind(na->shape, nb->shape, "sub");
    const std::size_t cols = na->shape.cols;
    std::vector<double> out(na->value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= nb->value[bidx(kind, i, cols)];
    return make_result(na->shape, std::move(out), {na, nb}, [kind, cols](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[bidx(kind, i, cols)] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const auto& na = checked(a, "mul");
    const auto& nb = checked(b, "mul");
    const Broadcast kind = broadcast_kind(na->shape, nb->shape, "mul");
    const std::size_t cols = na->shape.cols;
    std::vector<double> out(na->value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= nb->value[bidx(kind, i, cols)];
    return make_result(na->shape, std::move(out), {na, nb}, [kind, cols](Node& self) {
        Node& a_ = *self.inputs[0];
        Node& b_ = *self.inputs[1];
        if (a_.requires_grad) {
            auto& g = a_.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b_.value[bidx(kind, i, cols)];
        }
        if (b_.requires_grad) {
            auto& g = b_.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[bidx(kind, i, cols)] += self.grad[i] * a_.value[i];
        }
    });
}

Tensor scale(const Tensor& x, double s) {
    const auto& nx = checked(x, "scale");
    std::vector<double> out(nx->value);
    for (auto& v : out) v *= s;
    return make_result(nx->shape, std::move(out), {nx}, [s](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    const auto& nx = checked(x, "sum");
    double s = 0.0;
    for (double v : nx->value) s += v;
    return make_result({1, 1}, {s}, {nx}, [](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const auto& nx = checked(x, "mean");
    const double n = static_cast<double>(nx->value.size());
    double s = 0.0;
    for (double v : nx->value) s += v;
    return make_result({1, 1}, {s / n}, {nx}, [n](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0] / n;
    });
}

Tensor gelu(const Tensor& x) {
    const auto& nx = checked(x, "gelu");
    std::vector<double> out(nx->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = nx->value[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    return make_result(nx->shape, std::move(out), {nx}, [](Node& self) {
        Node& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = in.value[i];
            const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

// ---------------------------------------------------------------- losses

Tensor log_softmax(const Tensor& logits) {
    const auto& nx = checked(logits, "log_softmax");
    const std::size_t r = nx->shape.rows, c = nx->shape.cols;
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = nx->value.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lz;
    }
    return make_result(nx->shape, std::move(out), {nx}, [r, c](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
            const double* grow = self.grad.data() + i * c;
            const double* lp = self.value.data() + i * c;
            double gs = 0.0;
            for (std::size_t j = 0; j < c; ++j) gs += grow[j];
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += grow[j] - std::exp(lp[j]) * gs;
        }
    });
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, const std::vector<bool>& mask) {
    const auto& nx = checked(log_probs, "nll_loss");
    const std::size_t r = nx->shape.rows, c = nx->shape.cols;
    if (targets.size() != r || mask.size() != r) {
        throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets and " +
                             std::to_string(mask.size()) + " mask entries for " + nx->shape.str());
    }
    const std::size_t count = count_mask(mask);
    if (count == 0) throw DegenerateInputError("nll_loss: every position is masked");
    std::vector<int> tgt(targets.begin(), targets.end());
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c) {
            throw DimensionError("nll_loss: target " + std::to_string(tgt[i]) + " outside vocabulary");
        }
        s -= nx->value[i * c + static_cast<std::size_t>(tgt[i])];
    }
    const double n = static_cast<double>(count);
    return make_result({1, 1}, {s / n}, {nx}, [tgt = std::move(tgt), mask, c, n](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (mask[i]) g[i * c + static_cast<std::size_t>(tgt[i])] -= self.grad[0] / n;
        }
    });
}

Tensor kl_divergence(const Tensor& log_p_ref, const Tensor& log_p_cur, const std::vector<bool>& mask) {
    const auto& nr = checked(log_p_ref, "kl_divergence");
    const auto& nc = checked(log_p_cur, "kl_divergence");
    if (!(nr->shape == nc->shape)) {
        throw DimensionError("kl_divergence: " + nr->shape.str() + " vs " + nc->shape.str());
    }
    const std::size_t r = nc->shape.rows, c = nc->shape.cols;
    if (mask.size() != r) throw DimensionError("kl_divergence: mask length differs from rows");
    const std::size_t count = count_mask(mask);
    if (count == 0) throw DegenerateInputError("kl_divergence: every row is masked");
    // Reference probabilities are frozen; zero-probability entries contribute nothing.
    std::vector<double> p_ref(r * c, 0.0);
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < c; ++j) {
            const double lr = nr->value[i * c + j];
            const double p = std::exp(lr);
            p_ref[i * c + j] = p;
            if (p > 0.0) s += p * (lr - nc->value[i * c + j]);
        }
    }
    const double n = static_cast<double>(count);
    return make_result({1, 1}, {s / n}, {nc}, [p_ref = std::move(p_ref), n](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[0] * p_ref[i] / n;
    });
}

Tensor frobenius_norm_sq(const Tensor& x) {
    const auto& nx = checked(x, "frobenius_norm_sq");
    double s = 0.0;
    for (double v : nx->value) s += v * v;
    return make_result({1, 1}, {s}, {nx}, [](Node& self) {
        Node& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * in.value[i] * self.grad[0];
    });
}

// ---------------------------------------------------------------- model building blocks

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
    const auto& nt = checked(table, "gather_rows");
    const std::size_t vr = nt->shape.rows, c = nt->shape.cols;
    if (indices.empty()) throw DimensionError("gather_rows: no indices");
    std::vector<int> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size() * c);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vr) {
            throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " outside " +
                                 nt->shape.str());
        }
        std::copy_n(nt->value.data() + static_cast<std::size_t>(idx[i]) * c, c, out.data() + i * c);
    }
    const std::size_t n = idx.size();
    return make_result({n, c}, std::move(out), {nt}, [idx = std::move(idx), c](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double* dst = g.data() + static_cast<std::size_t>(idx[i]) * c;
            const double* src = self.grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto& nx = checked(x, "layer_norm");
    const auto& ng = checked(gain, "layer_norm");
    const auto& nb = checked(bias, "layer_norm");
    const std::size_t r = nx->shape.rows, c = nx->shape.cols;
    if (!(ng->shape == Shape{1, c}) || !(nb->shape == Shape{1, c})) {
        throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(c));
    }
    std::vector<double> xhat(r * c), inv_std(r), out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = nx->value.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * ng->value[j] + nb->value[j];
        }
    }
    return make_result(nx->shape, std::move(out), {nx, ng, nb},
                       [xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](Node& self) {
        Node& x_ = *self.inputs[0];
        Node& g_ = *self.inputs[1];
        Node& b_ = *self.inputs[2];
        const double* G = self.grad.data();
        if (g_.requires_grad) {
            auto& gg = g_.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += G[i * c + j] * xhat[i * c + j];
        }
        if (b_.requires_grad) {
            auto& gb = b_.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += G[i * c + j];
        }
        if (x_.requires_grad) {
            auto& gx = x_.grad_buffer();
            const double cn = static_cast<double>(c);
            for (std::size_t i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = G[i * c + j] * g_.value[j];
                    m1 += d;
                    m2 += d * xhat[i * c + j];
                }
                m1 /= cn;
                m2 /= cn;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = G[i * c + j] * g_.value[j];
                    gx[i * c + j] += inv_std[i] * (d - m1 - xhat[i * c + j] * m2);
                }
            }
        }
    });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, std::size_t n_heads) {
    const auto& nq = checked(q, "causal_attention");
    const auto& nk = checked(k, "causal_attention");
    const auto& nv = checked(v, "causal_attention");
    const Shape shape = nq->shape;
    if (!(nk->shape == shape) || !(nv->shape == shape)) {
        throw DimensionError("causal_attention: q/k/v shapes differ");
    }
    const std::size_t d = shape.cols;
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by heads");
    }
    std::size_t covered = 0;
    for (const auto& s : segments) {
        if (s.offset != covered || s.length == 0) throw DimensionError("causal_attention: segments must tile rows");
        covered += s.length;
    }
    if (covered != shape.rows) throw DimensionError("causal_attention: segments must tile rows");

    const std::size_t dh = d / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // Attention weights per segment and head, lower-triangular L x L blocks.
    std::vector<Segment> segs(segments.begin(), segments.end());
    std::vector<std::size_t> prob_offset(segs.size());
    std::size_t total = 0;
    for (std::size_t s = 0; s < segs.size(); ++s) {
        prob_offset[s] = total;
        total += n_heads * segs[s].length * segs[s].length;
    }
    std::vector<double> probs(total, 0.0);
    std::vector<double> out(shape.size(), 0.0);
    const double* Q = nq->value.data();
    const double* K = nk->value.data();
    const double* V = nv->value.data();
    for (std::size_t s = 0; s < segs.size(); ++s) {
        const std::size_t L = segs[s].length, off = segs[s].offset;
        for (std::size_t h = 0; h < n_heads; ++h) {
            double* P = probs.data() + prob_offset[s] + h * L * L;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
                const double* qi = Q + (off + i) * d + c0;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = K + (off + j) * d + c0;
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += qi[e] * kj[e];
                    P[i * L + j] = dot * inv_scale;
                    mx = std::max(mx, P[i * L + j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * L + j] = std::exp(P[i * L + j] - mx);
                    z += P[i * L + j];
                }
                double* oi = out.data() + (off + i) * d + c0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * L + j] /= z;
                    const double* vj = V + (off + j) * d + c0;
                    for (std::size_t e = 0; e < dh; ++e) oi[e] += P[i * L + j] * vj[e];
                }
            }
        }
    }
    return make_result(shape, std::move(out), {nq, nk, nv},
                       [segs = std::move(segs), prob_offset = std::move(prob_offset),
                        probs = std::move(probs), n_heads, dh, d, inv_scale](Node& self) {
        Node& q_ = *self.inputs[0];
        Node& k_ = *self.inputs[1];
        Node& v_ = *self.inputs[2];
        const double* G = self.grad.data();
        std::vector<double> gq(q_.value.size(), 0.0), gk(gq.size(), 0.0), gv(gq.size(), 0.0);
        std::vector<double> dS;
        for (std::size_t s = 0; s < segs.size(); ++s) {
            const std::size_t L = segs[s].length, off = segs[s].offset;
            dS.assign(L * L, 0.0);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double* P = probs.data() + prob_offset[s] + h * L * L;
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < L; ++i) {
                    const double* gi = G + (off + i) * d + c0;
                    double rowdot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double* vj = v_.value.data() + (off + j) * d + c0;
                        double* gvj = gv.data() + (off + j) * d + c0;
                        double dp = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dp += gi[e] * vj[e];
                            gvj[e] += P[i * L + j] * gi[e];
                        }
                        dS[i * L + j] = dp;
                        rowdot += dp * P[i * L + j];
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        dS[i * L + j] = P[i * L + j] * (dS[i * L + j] - rowdot) * inv_scale;
                    }
                    const double* qi = q_.value.data() + (off + i) * d + c0;
                    double* gqi = gq.data() + (off + i) * d + c0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = dS[i * L + j];
                        if (ds == 0.0) continue;
                        const double* kj = k_.value.data() + (off + j) * d + c0;
                        double* gkj = gk.data() + (off + j) * d + c0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            gqi[e] += ds * kj[e];
                            gkj[e] += ds * qi[e];
                        }
                    }
                }
            }
        }
        auto accumulate = [](Node& node, const std::vector<double>& src) {
            if (!node.requires_grad) return;
            auto& g = node.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        };
        accumulate(q_, gq);
        accumulate(k_, gk);
        accumulate(v_, gv);
    });
}

// ---------------------------------------------------------------- backward

void backward(const Tensor& loss) {
    const auto& root = checked(loss, "backward");
    if (root->shape.size() != 1) throw ContractError("backward: loss must be 1x1, got " + root->shape.str());
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    // Inputs are always created before their consumers, so descending id is a
    // reverse topological order.
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

    // Interior gradients are recomputed each pass; leaves accumulate across passes.
    for (Node* n : order) {
        if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    }
    root->grad_buffer()[0] += 1.0;
    for (Node* n : order) {
        if (!n->is_leaf()) n->backward_fn(*n);
    }
}

}  // namespace rledit::ad
