// Scalar training objectives.
//
// The model-contrastive loss compares the representation of the model being
// trained against the frozen global model (positive) and frozen previous
// local models (negatives):
//
//   per row:  -log( exp(s_glob/tau) / (exp(s_glob/tau) + sum_j exp(s_prev_j/tau)) )
//
// with cosine similarities s in [-1, 1]. It is evaluated in max-shifted
// log1p form (softplus branching for one negative), so no intermediate
// exponential can overflow even at tau = 0.1. The frozen representations are
// stop-gradients: backward writes only into z, never into z_glob / z_prev,
// regardless of their requires_grad flags.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "fedsim/nn.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

struct ContrastiveConfig {
    double temperature = 0.5;
    double mu = 1.0;
    int max_negative_pairs = 1;

    void validate() const {
        if (!(temperature > 0.0))
            throw std::invalid_argument("contrastive config: temperature must be > 0");
        if (mu < 0.0) throw std::invalid_argument("contrastive config: mu must be >= 0");
        if (max_negative_pairs < 1)
            throw std::invalid_argument("contrastive config: max_negative_pairs must be >= 1");
    }
};

// log(1 + e^x) without overflow; monotone in x.
inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline constexpr double kNormFloor = 1e-12;

namespace detail {

// Row norms and dot products behind the cosine similarities. A row whose
// norm falls below the floor reports similarity 0 and contributes no
// gradient (the true gradient is unbounded there).
struct RowCosine {
    double dot = 0.0;
    double norm_a = 0.0;
    double norm_b = 0.0;
    double value = 0.0;
    bool degenerate = false;
};

inline RowCosine row_cosine(const double* a, const double* b, std::size_t d) {
    RowCosine rc;
    double na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        rc.dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    rc.norm_a = std::sqrt(na);
    rc.norm_b = std::sqrt(nb);
    rc.degenerate = rc.norm_a < kNormFloor || rc.norm_b < kNormFloor;
    const double denom = std::max(rc.norm_a, kNormFloor) * std::max(rc.norm_b, kNormFloor);
    rc.value = std::clamp(rc.dot / denom, -1.0, 1.0);
    return rc;
}

// d cos(a,b) / d a_j with b held constant.
inline double row_cosine_grad_a(const RowCosine& rc, const double* a, const double* b,
                                std::size_t j) {
    if (rc.degenerate) return 0.0;
    return b[j] / (rc.norm_a * rc.norm_b) - rc.value * a[j] / (rc.norm_a * rc.norm_a);
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[label], max-shifted.
inline TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits,
                               const std::vector<int>& labels) {
    if (logits->shape.size() != 2)
        throw std::invalid_argument("cross_entropy: logits must be [batch x classes], got " +
                                    shape_str(logits->shape));
    const std::size_t batch = logits->shape[0], classes = logits->shape[1];
    if (batch == 0) throw std::invalid_argument("cross_entropy: empty batch");
    if (labels.size() != batch)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(batch));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                        " outside [0, " + std::to_string(classes) + ")");

    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = &logits->values[i * classes];
        const double m = *std::max_element(row, row + classes);
        double sum = 0.0;
        for (std::size_t j = 0; j < classes; ++j) sum += std::exp(row[j] - m);
        total += std::log(sum) + m - row[static_cast<std::size_t>(labels[i])];
    }
    auto out = Tensor::make({1}, {total / static_cast<double>(batch)}, logits->requires_grad);
    if (out->requires_grad) {
        tape.record({logits}, out, [logits, out, labels, batch, classes] {
            auto& gl = logits->grad_buffer();
            const double g = out->grad[0] / static_cast<double>(batch);
            for (std::size_t i = 0; i < batch; ++i) {
                const double* row = &logits->values[i * classes];
                const double m = *std::max_element(row, row + classes);
                double sum = 0.0;
                for (std::size_t j = 0; j < classes; ++j) sum += std::exp(row[j] - m);
                for (std::size_t j = 0; j < classes; ++j) {
                    const double p = std::exp(row[j] - m) / sum;
                    gl[i * classes + j] +=
                        g * (p - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// Cosine similarity of two vectors, clamped to [-1, 1]. Zero-norm inputs
// yield similarity 0 rather than NaN.
inline TensorPtr cosine_sim(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("cosine_sim", *a, *b);
    if (a->shape.size() != 1)
        throw std::invalid_argument("cosine_sim: expected vectors, got " + shape_str(a->shape));
    const std::size_t d = a->shape[0];
    const auto rc = detail::row_cosine(a->values.data(), b->values.data(), d);
    auto out = Tensor::make({1}, {rc.value}, detail::any_requires_grad({&a, &b}));
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, rc, d] {
            const double g = out->grad[0];
            if (a->requires_grad) {
                auto& ga = a->grad_buffer();
                for (std::size_t j = 0; j < d; ++j)
                    ga[j] += g * detail::row_cosine_grad_a(rc, a->values.data(), b->values.data(), j);
            }
            if (b->requires_grad) {
                detail::RowCosine flipped = rc;
                std::swap(flipped.norm_a, flipped.norm_b);
                auto& gb = b->grad_buffer();
                for (std::size_t j = 0; j < d; ++j)
                    gb[j] +=
                        g * detail::row_cosine_grad_a(flipped, b->values.data(), a->values.data(), j);
            }
        });
    }
    return out;
}

// Contrastive loss with one positive (z_glob) and k >= 1 negatives, averaged
// over the batch. Single code path for k = 1 and k > 1 so the two public
// entry points agree bitwise.
inline TensorPtr multi_negative_contrastive(Tape& tape, const TensorPtr& z,
                                            const TensorPtr& z_glob,
                                            const std::vector<TensorPtr>& z_prevs, double tau) {
    if (!(tau > 0.0))
        throw std::invalid_argument("contrastive loss: temperature must be > 0, got " +
                                    std::to_string(tau));
    if (z_prevs.empty())
        throw std::logic_error("contrastive loss: needs at least one previous representation");
    detail::check_same_shape("contrastive loss", *z, *z_glob);
    for (const auto& zp : z_prevs) detail::check_same_shape("contrastive loss", *z, *zp);
    if (z->shape.size() != 2)
        throw std::invalid_argument("contrastive loss: expected [batch x dim], got " +
                                    shape_str(z->shape));

    const std::size_t batch = z->shape[0], d = z->shape[1];
    const std::size_t k = z_prevs.size();

    // scores[i][0] is the positive similarity, 1..k the negatives.
    std::vector<std::vector<detail::RowCosine>> scores(batch);
    auto rows = Tensor::zeros({batch}, z->requires_grad);
    for (std::size_t i = 0; i < batch; ++i) {
        auto& sc = scores[i];
        sc.reserve(k + 1);
        sc.push_back(detail::row_cosine(&z->values[i * d], &z_glob->values[i * d], d));
        for (const auto& zp : z_prevs)
            sc.push_back(detail::row_cosine(&z->values[i * d], &zp->values[i * d], d));

        double m = sc[0].value / tau;
        for (std::size_t j = 1; j <= k; ++j) m = std::max(m, sc[j].value / tau);
        double shifted_sum_minus_max = 0.0;  // sum of e^(s/tau - m) with the max term's 1 removed
        for (std::size_t j = 0; j <= k; ++j)
            shifted_sum_minus_max += std::exp(sc[j].value / tau - m);
        shifted_sum_minus_max -= 1.0;
        rows->values[i] = std::log1p(shifted_sum_minus_max) + m - sc[0].value / tau;
    }

    if (rows->requires_grad) {
        std::vector<TensorPtr> inputs{z, z_glob};
        inputs.insert(inputs.end(), z_prevs.begin(), z_prevs.end());
        // Stop-gradient on z_glob and all z_prevs: only z receives gradient.
        tape.record(inputs, rows, [z, z_glob, z_prevs, rows, scores, tau, batch, d, k] {
            auto& gz = z->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i) {
                const double g = rows->grad[i];
                if (g == 0.0) continue;
                const auto& sc = scores[i];
                double m = sc[0].value / tau;
                for (std::size_t j = 1; j <= k; ++j) m = std::max(m, sc[j].value / tau);
                double total = 0.0;
                for (std::size_t j = 0; j <= k; ++j) total += std::exp(sc[j].value / tau - m);
                for (std::size_t j = 0; j <= k; ++j) {
                    const double p = std::exp(sc[j].value / tau - m) / total;
                    const double ds = (p - (j == 0 ? 1.0 : 0.0)) / tau;  // d loss_i / d s_j
                    const double* other =
                        j == 0 ? &z_glob->values[i * d] : &z_prevs[j - 1]->values[i * d];
                    for (std::size_t c = 0; c < d; ++c)
                        gz[i * d + c] += g * ds *
                                         detail::row_cosine_grad_a(sc[j], &z->values[i * d], other, c);
                }
            }
        });
    }
    return mean(tape, rows);
}

inline TensorPtr model_contrastive_loss(Tape& tape, const TensorPtr& z, const TensorPtr& z_glob,
                                        const TensorPtr& z_prev, double tau) {
    return multi_negative_contrastive(tape, z, z_glob, {z_prev}, tau);
}

// Mean over the batch of the per-row Euclidean distance ||z - z_glob||
// (the norm itself, not its square). z_glob is a stop-gradient.
inline TensorPtr l2_rep_penalty(Tape& tape, const TensorPtr& z, const TensorPtr& z_glob) {
    detail::check_same_shape("l2_rep_penalty", *z, *z_glob);
    if (z->shape.size() != 2)
        throw std::invalid_argument("l2_rep_penalty: expected [batch x dim], got " +
                                    shape_str(z->shape));
    const std::size_t batch = z->shape[0], d = z->shape[1];
    auto rows = Tensor::zeros({batch}, z->requires_grad);
    for (std::size_t i = 0; i < batch; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = z->values[i * d + j] - z_glob->values[i * d + j];
            acc += diff * diff;
        }
        rows->values[i] = std::sqrt(acc);
    }
    if (rows->requires_grad) {
        tape.record({z, z_glob}, rows, [z, z_glob, rows, batch, d] {
            auto& gz = z->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i) {
                const double r = rows->values[i];
                if (r < kNormFloor) continue;  // kink at zero distance
                const double g = rows->grad[i] / r;
                for (std::size_t j = 0; j < d; ++j)
                    gz[i * d + j] += g * (z->values[i * d + j] - z_glob->values[i * d + j]);
            }
        });
    }
    return mean(tape, rows);
}

// (1/2) ||w - w_glob||^2 over the network's parameters, differentiable in
// the parameters; w_glob is the frozen reference in canonical order.
inline TensorPtr proximal_term(Tape& tape, const Network& net, const ParamVector& w_glob) {
    const auto params = net.parameters();
    std::size_t total = 0;
    for (const auto& p : params) total += p->numel();
    if (total != w_glob.size())
        throw std::invalid_argument("proximal_term: length mismatch " + std::to_string(total) +
                                    " vs " + std::to_string(w_glob.size()));

    double acc = 0.0;
    bool requires = false;
    std::size_t offset = 0;
    for (const auto& p : params) {
        requires = requires || p->requires_grad;
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double diff = p->values[i] - w_glob.values[offset + i];
            acc += diff * diff;
        }
        offset += p->numel();
    }
    auto out = Tensor::make({1}, {0.5 * acc}, requires);
    if (out->requires_grad) {
        tape.record(params, out, [params, w_glob, out] {
            const double g = out->grad[0];
            std::size_t offset = 0;
            for (const auto& p : params) {
                if (p->requires_grad) {
                    auto& gp = p->grad_buffer();
                    for (std::size_t i = 0; i < p->numel(); ++i)
                        gp[i] += g * (p->values[i] - w_glob.values[offset + i]);
                }
                offset += p->numel();
            }
        });
    }
    return out;
}

// Local objective: cross-entropy plus mu times the model-contrastive term.
// With mu = 0 the result is bit-identical to the cross-entropy alone.
inline TensorPtr combined_local_loss(Tape& tape, const TensorPtr& logits,
                                     const std::vector<int>& labels, const TensorPtr& z,
                                     const TensorPtr& z_glob, const TensorPtr& z_prev,
                                     const ContrastiveConfig& cfg) {
    cfg.validate();
    auto sup = cross_entropy(tape, logits, labels);
    auto con = model_contrastive_loss(tape, z, z_glob, z_prev, cfg.temperature);
    return add(tape, sup, scale(tape, con, cfg.mu));
}

}  // namespace fedsim
