// Dense n-d arrays of doubles with reverse-mode automatic differentiation.
//
// The graph is define-by-run: a Tape records one entry per executed op, in
// execution order, so the record list is already topologically sorted and a
// single reverse sweep propagates gradients. Tapes are rebuilt per forward
// pass and are single-threaded; distinct tapes share no mutable state.
//
// Custom fused ops (losses etc.) plug in through Tape::record, so this file
// only carries the generic primitives.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedsim {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
    out << "]";
    return out.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

class Tensor {
  public:
    Shape shape;
    std::vector<double> values;  // row-major
    std::vector<double> grad;    // empty until first accumulation
    bool requires_grad = false;

    Tensor(Shape s, std::vector<double> v, bool rg)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
    }

    static std::shared_ptr<Tensor> make(Shape s, std::vector<double> v, bool requires_grad = false) {
        return std::make_shared<Tensor>(std::move(s), std::move(v), requires_grad);
    }

    static std::shared_ptr<Tensor> zeros(Shape s, bool requires_grad = false) {
        std::vector<double> v(shape_numel(s), 0.0);
        return std::make_shared<Tensor>(std::move(s), std::move(v), requires_grad);
    }

    static std::shared_ptr<Tensor> scalar(double v, bool requires_grad = false) {
        return make({1}, {v}, requires_grad);
    }

    std::size_t numel() const { return values.size(); }

    bool is_scalar() const { return values.size() == 1; }

    double item() const {
        if (!is_scalar())
            throw std::logic_error("item: tensor " + shape_str(shape) + " is not a scalar");
        return values[0];
    }

    double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

    bool has_grad() const { return !grad.empty(); }

    // Allocates the accumulator on first use; shape always matches values.
    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad;
    }

    void zero_grad() {
        if (!grad.empty()) grad.assign(values.size(), 0.0);
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

class Tape {
  public:
    struct Record {
        std::vector<Tensor*> inputs;
        Tensor* output;
        std::function<void()> backward;
    };

    // Registers an executed op. Call only when the output requires grad;
    // the backward rule must accumulate (+=) into input grad buffers.
    void record(const std::vector<TensorPtr>& inputs, const TensorPtr& output,
                std::function<void()> backward) {
        Record rec;
        rec.inputs.reserve(inputs.size());
        for (const auto& t : inputs) {
            rec.inputs.push_back(t.get());
            alive_.push_back(t);
        }
        rec.output = output.get();
        alive_.push_back(output);
        rec.backward = std::move(backward);
        records_.push_back(std::move(rec));
    }

    std::size_t size() const { return records_.size(); }

    // Reverse sweep from a scalar loss. Leaf grads accumulate across calls;
    // non-leaf (op output) grads are reset each call so a replay does not
    // double-count paths through intermediates.
    void backward(const TensorPtr& loss) {
        if (!loss->is_scalar())
            throw std::logic_error("backward: loss must be scalar, got " + shape_str(loss->shape));
        bool found = false;
        for (const auto& rec : records_)
            if (rec.output == loss.get()) found = true;
        if (!found)
            throw std::logic_error("backward: loss was not produced on this tape");

        for (auto& rec : records_) rec.output->grad.clear();
        loss->grad_buffer()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output->has_grad()) continue;  // no gradient reached this op
            it->backward();
        }
    }

  private:
    std::vector<Record> records_;
    std::vector<TensorPtr> alive_;  // keeps operand storage valid for backward
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

inline bool any_requires_grad(std::initializer_list<const TensorPtr*> ts) {
    for (const auto* t : ts)
        if ((*t)->requires_grad) return true;
    return false;
}

// exp saturates instead of overflowing; forward values stay finite for any
// finite input.
inline double safe_exp(double x) {
    if (x > 709.0) x = 709.0;
    if (x < -745.0) x = -745.0;
    return std::exp(x);
}

}  // namespace detail

// --------------------------------------------------------------------------
// primitives

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = Tensor::zeros({m, n}, detail::any_requires_grad({&a, &b}));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a->values[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out->values[i * n + j] += av * b->values[p * n + j];
        }
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, m, k, n] {
            const auto& g = out->grad;
            if (a->requires_grad) {
                auto& ga = a->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += g[i * n + j] * b->values[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b->requires_grad) {
                auto& gb = b->grad_buffer();
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            acc += a->values[i * k + p] * g[i * n + j];
                        gb[p * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

inline TensorPtr transpose(Tape& tape, const TensorPtr& a) {
    if (a->shape.size() != 2)
        throw std::invalid_argument("transpose: expected matrix, got " + shape_str(a->shape));
    const std::size_t m = a->shape[0], n = a->shape[1];
    auto out = Tensor::zeros({n, m}, a->requires_grad);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->values[j * m + i] = a->values[i * n + j];
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, m, n] {
            auto& ga = a->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += out->grad[j * m + i];
        });
    }
    return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
TensorPtr binary_elementwise(Tape& tape, const char* name, const TensorPtr& a, const TensorPtr& b,
                             Fwd fwd, Bwd bwd) {
    check_same_shape(name, *a, *b);
    auto out = Tensor::zeros(a->shape, any_requires_grad({&a, &b}));
    for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = fwd(a->values[i], b->values[i]);
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, bwd] {
            for (std::size_t i = 0; i < out->grad.size(); ++i) bwd(*a, *b, i, out->grad[i]);
        });
    }
    return out;
}

}  // namespace detail

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elementwise(
        tape, "add", a, b, [](double x, double y) { return x + y; },
        [](Tensor& x, Tensor& y, std::size_t i, double g) {
            if (x.requires_grad) x.grad_buffer()[i] += g;
            if (y.requires_grad) y.grad_buffer()[i] += g;
        });
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elementwise(
        tape, "sub", a, b, [](double x, double y) { return x - y; },
        [](Tensor& x, Tensor& y, std::size_t i, double g) {
            if (x.requires_grad) x.grad_buffer()[i] += g;
            if (y.requires_grad) y.grad_buffer()[i] -= g;
        });
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elementwise(
        tape, "mul", a, b, [](double x, double y) { return x * y; },
        [](Tensor& x, Tensor& y, std::size_t i, double g) {
            if (x.requires_grad) x.grad_buffer()[i] += g * y.values[i];
            if (y.requires_grad) y.grad_buffer()[i] += g * x.values[i];
        });
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double factor) {
    auto out = Tensor::zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = factor * a->values[i];
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, factor] {
            auto& ga = a->grad_buffer();
            for (std::size_t i = 0; i < out->grad.size(); ++i) ga[i] += factor * out->grad[i];
        });
    }
    return out;
}

// Adds a length-n row vector to every row of an m-by-n matrix. The one
// explicit broadcast in the library; dense-layer bias needs it.
inline TensorPtr add_rowwise(Tape& tape, const TensorPtr& m, const TensorPtr& row) {
    if (m->shape.size() != 2 || row->shape.size() != 1 || row->shape[0] != m->shape[1])
        throw std::invalid_argument("add_rowwise: shape mismatch " + shape_str(m->shape) + " vs " +
                                    shape_str(row->shape));
    const std::size_t rows = m->shape[0], cols = m->shape[1];
    auto out = Tensor::zeros(m->shape, detail::any_requires_grad({&m, &row}));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out->values[i * cols + j] = m->values[i * cols + j] + row->values[j];
    if (out->requires_grad) {
        tape.record({m, row}, out, [m, row, out, rows, cols] {
            if (m->requires_grad) {
                auto& gm = m->grad_buffer();
                for (std::size_t i = 0; i < out->grad.size(); ++i) gm[i] += out->grad[i];
            }
            if (row->requires_grad) {
                auto& gr = row->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) gr[j] += out->grad[i * cols + j];
            }
        });
    }
    return out;
}

inline TensorPtr relu(Tape& tape, const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = a->values[i] > 0.0 ? a->values[i] : 0.0;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            auto& ga = a->grad_buffer();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                if (a->values[i] > 0.0) ga[i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr exp(Tape& tape, const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = detail::safe_exp(a->values[i]);
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            auto& ga = a->grad_buffer();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                ga[i] += out->grad[i] * out->values[i];
        });
    }
    return out;
}

inline TensorPtr log(Tape& tape, const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) {
        if (!(a->values[i] > 0.0))
            throw std::domain_error("log: non-positive input " + std::to_string(a->values[i]) +
                                    " at index " + std::to_string(i));
        out->values[i] = std::log(a->values[i]);
    }
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            auto& ga = a->grad_buffer();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                ga[i] += out->grad[i] / a->values[i];
        });
    }
    return out;
}

inline TensorPtr sum(Tape& tape, const TensorPtr& a) {
    double total = 0.0;
    for (double v : a->values) total += v;
    auto out = Tensor::make({1}, {total}, a->requires_grad);
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            auto& ga = a->grad_buffer();
            const double g = out->grad[0];
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

inline TensorPtr mean(Tape& tape, const TensorPtr& a) {
    double total = 0.0;
    for (double v : a->values) total += v;
    const double inv = 1.0 / static_cast<double>(a->numel());
    auto out = Tensor::make({1}, {total * inv}, a->requires_grad);
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, inv] {
            auto& ga = a->grad_buffer();
            const double g = out->grad[0] * inv;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

}  // namespace fedsim
