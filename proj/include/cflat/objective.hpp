#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cflat/numcore.hpp"

namespace cflat {

// Mini-batch of labelled examples. Features are row-major (n x d_in).
struct Batch {
    std::size_t d_in = 0;
    std::vector<double> features;
    std::vector<int> labels;

    Batch() = default;
    Batch(std::size_t d_in, std::vector<double> features, std::vector<int> labels);

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::span<const double> row(std::size_t i) const noexcept {
        return std::span<const double>(features).subspan(i * d_in, d_in);
    }

    Batch subset(std::span<const std::size_t> indices) const;
    void append(const Batch& other);
    int max_label() const noexcept;
    // Throws InvalidArgument if any label is outside [0, num_classes).
    void check_labels(std::size_t num_classes) const;
};

Batch concat(const Batch& a, const Batch& b);

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};

// Differentiable objective: loss, gradient and Hessian-vector product of a
// mean-reduced loss on a batch. Implementations are immutable after
// construction and safe to call concurrently.
//
// The public entry points validate dimensions and finiteness; a non-finite
// loss or gradient raises DivergenceError.
class Objective {
public:
    virtual ~Objective() = default;

    virtual std::size_t dim() const = 0;
    // True when hvp() is the exact product rather than a finite difference.
    virtual bool exact_hvp() const { return false; }

    double loss(const ParamVector& theta, const Batch& batch) const;
    ParamVector grad(const ParamVector& theta, const Batch& batch) const;
    LossGrad loss_grad(const ParamVector& theta, const Batch& batch) const;
    // `base_grad`, when given, must equal grad(theta, batch); finite-difference
    // implementations reuse it instead of recomputing.
    ParamVector hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                    const ParamVector* base_grad = nullptr) const;

protected:
    virtual double do_loss(const ParamVector& theta, const Batch& batch) const = 0;
    virtual LossGrad do_loss_grad(const ParamVector& theta, const Batch& batch) const = 0;
    virtual ParamVector do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                               const ParamVector* base_grad) const = 0;

    void check_dim(const ParamVector& theta, const char* what) const;
};

// Relative finite-difference step for gradient-difference HVPs.
inline constexpr double kDefaultHvpStep = 1e-4;

// Forward difference (grad(theta + delta*v/|v|) - grad(theta)) / delta * |v|
// with delta = rel_step * (1 + |theta|).
ParamVector finite_difference_hvp(const Objective& objective, const ParamVector& theta,
                                  const ParamVector& v, const Batch& batch,
                                  const ParamVector* base_grad, double rel_step = kDefaultHvpStep);

// Dense symmetric matrix stored row-major.
struct SymmetricMatrix {
    std::size_t n = 0;
    std::vector<double> values;

    SymmetricMatrix() = default;
    SymmetricMatrix(std::size_t n, std::vector<double> row_major);
    static SymmetricMatrix diagonal(std::span<const double> diag);
    static SymmetricMatrix identity(std::size_t n, double scale = 1.0);

    double operator()(std::size_t i, std::size_t j) const noexcept { return values[i * n + j]; }
    ParamVector apply(const ParamVector& v) const;
};

// L(theta) = 0.5 (theta - c)^T H (theta - c). The batch is ignored.
class QuadraticObjective final : public Objective {
public:
    QuadraticObjective(SymmetricMatrix hessian, ParamVector center);

    std::size_t dim() const override { return center_.size(); }
    bool exact_hvp() const override { return true; }
    const SymmetricMatrix& hessian() const noexcept { return hessian_; }
    const ParamVector& center() const noexcept { return center_; }

protected:
    double do_loss(const ParamVector& theta, const Batch& batch) const override;
    LossGrad do_loss_grad(const ParamVector& theta, const Batch& batch) const override;
    ParamVector do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                       const ParamVector* base_grad) const override;

private:
    SymmetricMatrix hessian_;
    ParamVector center_;
};

// Rejects asymmetric H.
QuadraticObjective make_quadratic(SymmetricMatrix hessian, ParamVector center);

// Multinomial logistic regression with exact gradient and HVP. Parameters are
// laid out as "weight" (classes x d_in) followed by "bias" (classes); the
// regularizer is 0.5 * l2 * |theta|^2.
class LogisticObjective final : public Objective {
public:
    LogisticObjective(std::size_t d_in, std::size_t classes, double l2);

    std::size_t dim() const override { return classes_ * (d_in_ + 1); }
    bool exact_hvp() const override { return true; }
    std::size_t d_in() const noexcept { return d_in_; }
    std::size_t classes() const noexcept { return classes_; }
    Manifest manifest() const;

protected:
    double do_loss(const ParamVector& theta, const Batch& batch) const override;
    LossGrad do_loss_grad(const ParamVector& theta, const Batch& batch) const override;
    ParamVector do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                       const ParamVector* base_grad) const override;

private:
    void logits_row(const ParamVector& theta, std::span<const double> x, std::span<double> out) const;

    std::size_t d_in_;
    std::size_t classes_;
    double l2_;
};

LogisticObjective make_logreg(std::size_t d_in, std::size_t classes, double l2);

enum class Activation { tanh, relu };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

struct MlpSpec {
    // Layer widths including input and output: {d_in, hidden..., classes}.
    std::vector<std::size_t> widths;
    Activation activation = Activation::tanh;
    double l2 = 0.0;

    std::size_t input_width() const { return widths.front(); }
    std::size_t output_width() const { return widths.back(); }
    std::size_t num_layers() const { return widths.size() - 1; }
    std::size_t param_count() const;
    Manifest manifest() const;
    void validate() const;

    bool operator==(const MlpSpec&) const = default;
};

std::string weight_segment(std::size_t layer);
std::string bias_segment(std::size_t layer);

// Per-example loss on the output logits. Writes dL/dlogits for that example
// (not yet divided by batch size) and returns the example's loss.
using LogitLoss = std::function<double(std::size_t example, std::span<const double> logits,
                                       std::span<double> dlogits)>;

// Softmax cross-entropy per example.
double softmax_cross_entropy(std::span<const double> logits, int label, std::span<double> dlogits);

// Fully-connected network with softmax cross-entropy loss. Gradients by
// backpropagation; HVP by forward difference of gradients.
class Mlp : public Objective {
public:
    explicit Mlp(MlpSpec spec, double hvp_step = kDefaultHvpStep);

    std::size_t dim() const override { return spec_.param_count(); }
    const MlpSpec& spec() const noexcept { return spec_; }
    double hvp_step() const noexcept { return hvp_step_; }

    // Glorot-style normal init for weights, zero biases.
    ParamVector init_params(SeededRng& rng) const;

    // Row-major (n x classes) logits.
    std::vector<double> logits(const ParamVector& theta, const Batch& batch) const;
    // Row-major (n x widths[layer]) inputs to `layer`; layer 0 returns features.
    std::vector<double> layer_inputs(const ParamVector& theta, const Batch& batch,
                                     std::size_t layer) const;
    std::vector<int> predict(const ParamVector& theta, const Batch& batch) const;

    // Mean of `per_example` over the batch plus the l2 term, with gradient.
    LossGrad loss_grad_with(const ParamVector& theta, const Batch& batch,
                            const LogitLoss& per_example) const;
    double loss_with(const ParamVector& theta, const Batch& batch,
                     const LogitLoss& per_example) const;

protected:
    double do_loss(const ParamVector& theta, const Batch& batch) const override;
    LossGrad do_loss_grad(const ParamVector& theta, const Batch& batch) const override;
    ParamVector do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                       const ParamVector* base_grad) const override;

private:
    struct Forward;
    void forward(const ParamVector& theta, const Batch& batch, Forward& out,
                 std::size_t stop_layer) const;

    MlpSpec spec_;
    double hvp_step_;
    std::vector<std::size_t> weight_offsets_;
    std::vector<std::size_t> bias_offsets_;
};

struct InitializedMlp {
    Mlp oracle;
    ParamVector theta;
};

InitializedMlp make_mlp(const MlpSpec& spec, SeededRng& rng);

}  // namespace cflat
