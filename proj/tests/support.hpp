#pragma once

// Finite-difference oracle and a seeded generator of random tape compositions,
// shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <random>
#include <string>
#include <vector>

#include "rledit/autodiff.hpp"

namespace rledit::testing {

inline ad::Tensor random_leaf(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return ad::Tensor::from_values(rows, cols, std::move(v), true);
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom < 1e-300 ? 0.0 : std::sqrt(diff) / denom;
}

// Central differences of a scalar function over every entry of the leaves.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<ad::Tensor>& leaves,
                                            double h = 1e-5) {
    std::vector<double> out;
    for (auto& leaf : leaves) {
        auto v = leaf.mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + h;
            const double up = f();
            v[i] = keep - h;
            const double down = f();
            v[i] = keep;
            out.push_back((up - down) / (2.0 * h));
        }
    }
    return out;
}

inline std::vector<double> analytic_gradient(const ad::Tensor& loss, std::vector<ad::Tensor>& leaves) {
    for (auto& l : leaves) l.zero_grad();
    ad::backward(loss);
    std::vector<double> out;
    for (auto& l : leaves) {
        const auto g = l.grad();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

// A random expression over fresh leaves. `build` replays the same expression
// on the current leaf values, so it can be re-evaluated under perturbation.
struct Composition {
    std::vector<ad::Tensor> leaves;
    std::function<ad::Tensor()> build;
    std::vector<std::string> ops;
};

inline const std::vector<std::string>& primitive_names() {
    static const std::vector<std::string> names{
        "matmul", "transpose", "add", "sub", "mul", "scale", "sum", "mean", "gelu", "log_softmax",
        "nll_loss", "kl_divergence", "frobenius_norm_sq", "gather_rows", "layer_norm", "causal_attention"};
    return names;
}

// Composition `index` cycles its head primitive through every operation so a
// run of 16 or more seeds covers the full set; the rest of the chain is random.
inline Composition make_composition(std::uint64_t seed, std::size_t index) {
    std::mt19937_64 rng(seed);
    Composition c;
    const std::size_t rows = 4, cols = 6;
    auto leaf = [&](std::size_t r, std::size_t k, double s = 0.7) {
        c.leaves.push_back(random_leaf(r, k, rng, s));
        return c.leaves.size() - 1;
    };
    const std::size_t table = leaf(7, cols);
    std::vector<int> idx(rows);
    for (auto& i : idx) i = static_cast<int>(rng() % 7);

    struct Step {
        int op;
        std::size_t a = 0, b = 0;
        double s = 1.0;
    };
    std::vector<Step> steps;
    std::size_t cur_rows = rows, cur_cols = cols;
    const auto& names = primitive_names();
    const int n_chain = 4;
    std::vector<int> targets;
    std::vector<bool> mask;
    ad::Tensor reference;  // constant KL reference, not a leaf
    int terminal = -1;

    auto chain_op = [&](int op) {
        Step st{op};
        switch (op) {
            case 0: {  // matmul
                const std::size_t k = 4 + rng() % 3;
                st.a = leaf(cur_cols, k);
                cur_cols = k;
                break;
            }
            case 1: std::swap(cur_rows, cur_cols); break;
            case 2: st.a = leaf(rng() % 2 ? cur_rows : 1, cur_cols); break;
            case 3: st.a = leaf(cur_rows, cur_cols); break;
            case 4: st.a = leaf(cur_rows, cur_cols); break;
            case 5: st.s = 0.5 + static_cast<double>(rng() % 100) / 100.0; break;
            case 8: break;
            case 9: break;
            case 14:
                st.a = leaf(1, cur_cols, 0.5);
                st.b = leaf(1, cur_cols, 0.5);
                break;
            case 15:
                if (cur_cols % 2) {
                    st.op = 0;
                    st.a = leaf(cur_cols, 6);
                    cur_cols = 6;
                } else {
                    st.a = leaf(cur_cols, cur_cols);
                }
                break;
            default: break;
        }
        steps.push_back(st);
    };

    const int head = static_cast<int>(index % names.size());
    const bool head_is_terminal = head == 6 || head == 7 || head == 10 || head == 11 || head == 12;
    if (head != 13 && !head_is_terminal) chain_op(head);
    for (int i = 0; i < n_chain; ++i) {
        static const int chain_ops[] = {0, 1, 2, 3, 4, 5, 8, 9, 14, 15};
        chain_op(chain_ops[rng() % 10]);
    }
    terminal = head_is_terminal ? head : std::vector<int>{6, 7, 10, 11, 12}[rng() % 5];
    if (terminal == 10 || terminal == 11) {
        mask.assign(cur_rows, true);
        mask[rng() % cur_rows] = false;
        targets.resize(cur_rows);
        for (auto& t : targets) t = static_cast<int>(rng() % cur_cols);
        if (terminal == 11) reference = random_leaf(cur_rows, cur_cols, rng).detach();
    }
    // Attention segments over the final row count at each step are fixed at build time.
    c.ops.push_back("gather_rows");
    for (const auto& st : steps) c.ops.push_back(names[static_cast<std::size_t>(st.op)]);
    c.ops.push_back(names[static_cast<std::size_t>(terminal)]);

    auto leaves = c.leaves;
    c.build = [leaves, steps, idx, table, terminal, targets, mask, reference]() {
        ad::Tensor x = ad::gather_rows(leaves[table], idx);
        for (const auto& st : steps) {
            switch (st.op) {
                case 0: x = ad::matmul(x, leaves[st.a]); break;
                case 1: x = ad::transpose(x); break;
                case 2: x = ad::add(x, leaves[st.a]); break;
                case 3: x = ad::sub(x, leaves[st.a]); break;
                case 4: x = ad::mul(x, leaves[st.a]); break;
                case 5: x = ad::scale(x, st.s); break;
                case 8: x = ad::gelu(x); break;
                case 9: x = ad::log_softmax(x); break;
                case 14: x = ad::layer_norm(x, leaves[st.a], leaves[st.b]); break;
                case 15: {
                    const std::size_t half = x.rows() / 2;
                    std::vector<ad::Segment> segs{{0, x.rows() - half}};
                    if (half) segs.push_back({x.rows() - half, half});
                    x = ad::causal_attention(x, ad::matmul(x, leaves[st.a]), x, segs, 2);
                    break;
                }
                default: break;
            }
        }
        switch (terminal) {
            case 6: return ad::sum(x);
            case 7: return ad::mean(x);
            case 10: return ad::nll_loss(ad::log_softmax(x), targets, mask);
            case 11: return ad::kl_divergence(ad::log_softmax(reference), ad::log_softmax(x), mask);
            default: return ad::frobenius_norm_sq(x);
        }
    };
    return c;
}

}  // namespace rledit::testing
