#pragma once

// Reverse-mode automatic differentiation over dense row-major 2-D arrays of
// doubles. Every operation appends a node to a dynamic tape; `backward` walks
// the nodes reachable from a scalar loss in reverse creation order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rledit::ad {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

namespace detail {

struct Node {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first touched by backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer();
    bool is_leaf() const noexcept { return !backward_fn; }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
    static Tensor filled(std::size_t rows, std::size_t cols, double v, bool requires_grad = false);
    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    Shape shape() const;
    std::size_t rows() const { return shape().rows; }
    std::size_t cols() const { return shape().cols; }
    std::size_t size() const { return shape().size(); }

    std::span<const double> values() const;
    // Only leaves may be written in place; derived values belong to the tape.
    std::span<double> mutable_values();
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    // Gradient of the last backward pass; zeros if the tensor was never reached.
    std::vector<double> grad() const;
    void zero_grad();

    // A leaf holding a copy of the values; no gradient flows through it.
    Tensor detach() const;
    Tensor detach(bool requires_grad) const;

    // Stable address of the underlying storage; equal ids mean the same parameter.
    const void* id() const noexcept { return node_.get(); }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Sets whether ops record onto the tape on this thread for the guard's lifetime.
class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

class NoGradGuard : public GradModeGuard {
public:
    NoGradGuard() : GradModeGuard(false) {}
};

bool grad_enabled() noexcept;

// Contiguous row range [offset, offset + length) forming one causal sequence.
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// Binary elementwise ops accept b with the same shape as a, a 1 x cols row
// (broadcast over rows) or a 1 x 1 scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor gelu(const Tensor& x);
Tensor log_softmax(const Tensor& logits);
Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, const std::vector<bool>& mask);
Tensor kl_divergence(const Tensor& log_p_ref, const Tensor& log_p_cur, const std::vector<bool>& mask);
Tensor frobenius_norm_sq(const Tensor& x);

// out[i] = table[indices[i]].
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
// Row-wise layer normalization with 1 x cols gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Multi-head causal self-attention; each segment attends only within itself.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, std::size_t n_heads);

void backward(const Tensor& loss);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

}  // namespace rledit::ad
