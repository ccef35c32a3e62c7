// Dense networks: base encoder, two-layer projection head, linear output
// layer. forward_repr gives the projected representation, forward_full the
// class logits, and forward_full(x) is by construction the output layer
// applied to forward_repr(x).
//
// ParamVector is the flat canonical view of all weights (encoder layers in
// order, then projection hidden, projection output, output layer; each layer
// contributes its weight matrix row-major followed by its bias). Aggregation,
// proximal terms and control variates all work on this view.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class Activation { kNone, kRelu };

struct DenseLayer {
    TensorPtr weight;  // [out x in]
    TensorPtr bias;    // [out]
    Activation activation = Activation::kNone;
};

struct NetworkArch {
    std::size_t input_dim = 0;
    std::vector<std::size_t> encoder_widths;  // may be empty
    std::size_t projection_dim = 0;
    std::size_t num_classes = 0;

    bool operator==(const NetworkArch&) const = default;

    void validate() const {
        if (input_dim == 0 || projection_dim == 0 || num_classes == 0)
            throw std::invalid_argument("network arch: dimensions must be positive");
        for (std::size_t w : encoder_widths)
            if (w == 0) throw std::invalid_argument("network arch: encoder width must be positive");
    }
};

struct ParamVector {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    static ParamVector zeros(std::size_t n) { return ParamVector{std::vector<double>(n, 0.0)}; }

    bool operator==(const ParamVector&) const = default;
};

namespace detail {
inline void check_same_length(const char* op, const ParamVector& a, const ParamVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": length mismatch " +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()));
}
}  // namespace detail

// alpha * a + b
inline ParamVector axpy(double alpha, const ParamVector& a, const ParamVector& b) {
    detail::check_same_length("axpy", a, b);
    ParamVector out = ParamVector::zeros(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = alpha * a.values[i] + b.values[i];
    return out;
}

inline double l2_norm_sq(const ParamVector& a) {
    double acc = 0.0;
    for (double v : a.values) acc += v * v;
    return acc;
}

inline double l2_distance(const ParamVector& a, const ParamVector& b) {
    detail::check_same_length("l2_distance", a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

class Network {
  public:
    explicit Network(NetworkArch arch, bool requires_grad = true) : arch_(std::move(arch)) {
        arch_.validate();
        std::size_t in = arch_.input_dim;
        for (std::size_t width : arch_.encoder_widths) {
            encoder_.push_back(make_layer(width, in, Activation::kRelu, requires_grad));
            in = width;
        }
        // Projection head: hidden layer with relu, linear output of
        // projection_dim units; hidden width equals projection_dim.
        projection_[0] = make_layer(arch_.projection_dim, in, Activation::kRelu, requires_grad);
        projection_[1] =
            make_layer(arch_.projection_dim, arch_.projection_dim, Activation::kNone, requires_grad);
        output_layer_ = make_layer(arch_.num_classes, arch_.projection_dim, Activation::kNone,
                                   requires_grad);
    }

    const NetworkArch& arch() const { return arch_; }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        for (const auto& l : encoder_) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        for (const auto& l : projection_) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        out.push_back(output_layer_.weight);
        out.push_back(output_layer_.bias);
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->numel();
        return n;
    }

    void zero_grad() const {
        for (const auto& p : parameters()) p->zero_grad();
    }

  private:
    static DenseLayer make_layer(std::size_t out, std::size_t in, Activation act,
                                 bool requires_grad) {
        return DenseLayer{Tensor::zeros({out, in}, requires_grad),
                          Tensor::zeros({out}, requires_grad), act};
    }

    NetworkArch arch_;
    std::vector<DenseLayer> encoder_;
    std::array<DenseLayer, 2> projection_;
    DenseLayer output_layer_;

    friend TensorPtr forward_repr(Tape&, const Network&, const TensorPtr&);
    friend TensorPtr apply_output_layer(Tape&, const Network&, const TensorPtr&);
};

namespace detail {
inline TensorPtr apply_layer(Tape& tape, const DenseLayer& layer, const TensorPtr& x) {
    auto z = add_rowwise(tape, matmul(tape, x, transpose(tape, layer.weight)), layer.bias);
    return layer.activation == Activation::kRelu ? relu(tape, z) : z;
}
}  // namespace detail

// R_w(x): encoder plus projection head, one row per input row.
inline TensorPtr forward_repr(Tape& tape, const Network& net, const TensorPtr& x) {
    if (x->shape.size() != 2 || x->shape[1] != net.arch().input_dim)
        throw std::invalid_argument("forward: input " + shape_str(x->shape) +
                                    " does not match input_dim " +
                                    std::to_string(net.arch().input_dim));
    TensorPtr h = x;
    for (const auto& layer : net.encoder_) h = detail::apply_layer(tape, layer, h);
    h = detail::apply_layer(tape, net.projection_[0], h);
    return detail::apply_layer(tape, net.projection_[1], h);
}

inline TensorPtr apply_output_layer(Tape& tape, const Network& net, const TensorPtr& repr) {
    return detail::apply_layer(tape, net.output_layer_, repr);
}

// F_w(x): class logits, defined as the output layer applied to R_w(x).
inline TensorPtr forward_full(Tape& tape, const Network& net, const TensorPtr& x) {
    return apply_output_layer(tape, net, forward_repr(tape, net, x));
}

inline ParamVector to_vector(const Network& net) {
    ParamVector out;
    for (const auto& p : net.parameters())
        out.values.insert(out.values.end(), p->values.begin(), p->values.end());
    return out;
}

inline Network from_vector(const NetworkArch& arch, const ParamVector& v,
                           bool requires_grad = true) {
    Network net(arch, requires_grad);
    std::size_t offset = 0;
    for (const auto& p : net.parameters()) {
        if (offset + p->numel() > v.size())
            throw std::invalid_argument("from_vector: vector too short for architecture");
        std::copy(v.values.begin() + static_cast<std::ptrdiff_t>(offset),
                  v.values.begin() + static_cast<std::ptrdiff_t>(offset + p->numel()),
                  p->values.begin());
        offset += p->numel();
    }
    if (offset != v.size())
        throw std::invalid_argument("from_vector: vector length " + std::to_string(v.size()) +
                                    " does not match architecture (" + std::to_string(offset) +
                                    " params)");
    return net;
}

// He initialization: W ~ N(0, 2/fan_in) drawn in canonical parameter order,
// biases zero. Same seed, same network, bit for bit.
inline Network init(const NetworkArch& arch, std::uint64_t seed) {
    Network net(arch, true);
    SplitMix64 rng(seed);
    for (const auto& p : net.parameters()) {
        if (p->shape.size() != 2) continue;  // biases stay zero
        const double stddev = std::sqrt(2.0 / static_cast<double>(p->shape[1]));
        for (double& w : p->values) w = rng.next_normal() * stddev;
    }
    return net;
}

struct SgdState {
    double learning_rate = 0.01;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::vector<double> velocity;

    SgdState(double lr, double mom, double wd, std::size_t param_count)
        : learning_rate(lr), momentum(mom), weight_decay(wd), velocity(param_count, 0.0) {
        if (!(lr >= 0.0) || !std::isfinite(lr) || !std::isfinite(mom) || !std::isfinite(wd))
            throw std::invalid_argument("sgd: coefficients must be finite, learning rate >= 0");
    }
};

// Coupled weight decay applied to the gradient before the momentum update:
//   g' = g + wd * p;  v = mom * v + g';  p -= lr * v
inline void sgd_step(const Network& net, SgdState& state) {
    std::size_t offset = 0;
    for (const auto& p : net.parameters()) {
        if (!p->has_grad())
            throw std::logic_error("sgd_step: parameter has no gradient; run backward first");
        if (offset + p->numel() > state.velocity.size())
            throw std::logic_error("sgd_step: velocity buffer does not match network");
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double g = p->grad[i] + state.weight_decay * p->values[i];
            double& v = state.velocity[offset + i];
            v = state.momentum * v + g;
            p->values[i] -= state.learning_rate * v;
        }
        offset += p->numel();
    }
    if (offset != state.velocity.size())
        throw std::logic_error("sgd_step: velocity buffer does not match network");
}

}  // namespace fedsim
