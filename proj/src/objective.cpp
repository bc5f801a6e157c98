#include "cflat/objective.hpp"

#include <algorithm>
#include <cmath>

#include "cflat/error.hpp"

namespace cflat {

// ---------------------------------------------------------------- Batch

Batch::Batch(std::size_t d_in_, std::vector<double> features_, std::vector<int> labels_)
    : d_in(d_in_), features(std::move(features_)), labels(std::move(labels_)) {
    if (features.size() != labels.size() * d_in)
        throw DimensionError("batch features", labels.size() * d_in, features.size());
}

Batch Batch::subset(std::span<const std::size_t> indices) const {
    Batch out;
    out.d_in = d_in;
    out.features.reserve(indices.size() * d_in);
    out.labels.reserve(indices.size());
    for (auto i : indices) {
        const auto r = row(i);
        out.features.insert(out.features.end(), r.begin(), r.end());
        out.labels.push_back(labels[i]);
    }
    return out;
}

void Batch::append(const Batch& other) {
    if (other.empty()) return;
    if (empty() && d_in == 0) d_in = other.d_in;
    if (other.d_in != d_in) throw DimensionError("batch append", d_in, other.d_in);
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

int Batch::max_label() const noexcept {
    int m = -1;
    for (int l : labels) m = std::max(m, l);
    return m;
}

void Batch::check_labels(std::size_t num_classes) const {
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
            throw InvalidArgument("label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
}

Batch concat(const Batch& a, const Batch& b) {
    Batch out = a;
    out.append(b);
    return out;
}

// ---------------------------------------------------------------- Objective

void Objective::check_dim(const ParamVector& theta, const char* what) const {
    if (theta.size() != dim()) throw DimensionError(what, dim(), theta.size());
}

double Objective::loss(const ParamVector& theta, const Batch& batch) const {
    check_dim(theta, "loss");
    const double value = do_loss(theta, batch);
    if (!std::isfinite(value)) throw DivergenceError("non-finite loss");
    return value;
}

LossGrad Objective::loss_grad(const ParamVector& theta, const Batch& batch) const {
    check_dim(theta, "grad");
    LossGrad out = do_loss_grad(theta, batch);
    if (!std::isfinite(out.loss)) throw DivergenceError("non-finite loss");
    if (!out.grad.all_finite()) throw DivergenceError("non-finite gradient");
    return out;
}

ParamVector Objective::grad(const ParamVector& theta, const Batch& batch) const {
    return loss_grad(theta, batch).grad;
}

ParamVector Objective::hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                           const ParamVector* base_grad) const {
    check_dim(theta, "hvp theta");
    check_dim(v, "hvp vector");
    ParamVector out = do_hvp(theta, v, batch, base_grad);
    if (!out.all_finite()) throw DivergenceError("non-finite Hessian-vector product");
    return out;
}

ParamVector finite_difference_hvp(const Objective& objective, const ParamVector& theta,
                                  const ParamVector& v, const Batch& batch,
                                  const ParamVector* base_grad, double rel_step) {
    const double vnorm = norm2(v);
    if (vnorm == 0.0) return ParamVector(theta.size());
    const double delta = rel_step * (1.0 + norm2(theta));
    const ParamVector shifted = axpy(delta / vnorm, v, theta);
    ParamVector g_shift = objective.grad(shifted, batch);
    const ParamVector g_base = base_grad ? *base_grad : objective.grad(theta, batch);
    const double scale = vnorm / delta;
    for (std::size_t i = 0; i < g_shift.size(); ++i) g_shift[i] = (g_shift[i] - g_base[i]) * scale;
    return g_shift;
}

// ---------------------------------------------------------------- Quadratic

SymmetricMatrix::SymmetricMatrix(std::size_t n_, std::vector<double> row_major)
    : n(n_), values(std::move(row_major)) {
    if (values.size() != n * n) throw DimensionError("symmetric matrix", n * n, values.size());
}

SymmetricMatrix SymmetricMatrix::diagonal(std::span<const double> diag) {
    SymmetricMatrix m(diag.size(), std::vector<double>(diag.size() * diag.size(), 0.0));
    for (std::size_t i = 0; i < diag.size(); ++i) m.values[i * m.n + i] = diag[i];
    return m;
}

SymmetricMatrix SymmetricMatrix::identity(std::size_t n, double scale) {
    std::vector<double> d(n, scale);
    return diagonal(d);
}

ParamVector SymmetricMatrix::apply(const ParamVector& v) const {
    if (v.size() != n) throw DimensionError("matrix apply", n, v.size());
    ParamVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += values[i * n + j] * v[j];
        out[i] = acc;
    }
    return out;
}

QuadraticObjective::QuadraticObjective(SymmetricMatrix hessian, ParamVector center)
    : hessian_(std::move(hessian)), center_(std::move(center)) {
    if (hessian_.n != center_.size())
        throw DimensionError("quadratic center", hessian_.n, center_.size());
    for (std::size_t i = 0; i < hessian_.n; ++i)
        for (std::size_t j = i + 1; j < hessian_.n; ++j) {
            const double a = hessian_(i, j), b = hessian_(j, i);
            if (std::abs(a - b) > 1e-12 * std::max({1.0, std::abs(a), std::abs(b)}))
                throw InvalidArgument("quadratic Hessian is not symmetric at (" + std::to_string(i) +
                                      ", " + std::to_string(j) + ")");
        }
}

double QuadraticObjective::do_loss(const ParamVector& theta, const Batch&) const {
    const ParamVector diff = theta - center_;
    return 0.5 * dot(diff, hessian_.apply(diff));
}

LossGrad QuadraticObjective::do_loss_grad(const ParamVector& theta, const Batch&) const {
    const ParamVector diff = theta - center_;
    ParamVector g = hessian_.apply(diff);
    const double value = 0.5 * dot(diff, g);
    return {value, std::move(g)};
}

ParamVector QuadraticObjective::do_hvp(const ParamVector&, const ParamVector& v, const Batch&,
                                       const ParamVector*) const {
    return hessian_.apply(v);
}

QuadraticObjective make_quadratic(SymmetricMatrix hessian, ParamVector center) {
    return QuadraticObjective(std::move(hessian), std::move(center));
}

// ---------------------------------------------------------------- softmax helpers

namespace {

// Softmax probabilities of `logits` into `probs`; returns log-sum-exp.
double softmax(std::span<const double> logits, std::span<double> probs) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        probs[c] = std::exp(logits[c] - m);
        total += probs[c];
    }
    for (auto& p : probs) p /= total;
    return m + std::log(total);
}

}  // namespace

double softmax_cross_entropy(std::span<const double> logits, int label, std::span<double> dlogits) {
    const double lse = softmax(logits, dlogits);
    dlogits[static_cast<std::size_t>(label)] -= 1.0;
    return lse - logits[static_cast<std::size_t>(label)];
}

// ---------------------------------------------------------------- Logistic

LogisticObjective::LogisticObjective(std::size_t d_in, std::size_t classes, double l2)
    : d_in_(d_in), classes_(classes), l2_(l2) {
    if (d_in < 1) throw InvalidArgument("logistic regression needs d_in >= 1");
    if (classes < 2) throw InvalidArgument("logistic regression needs at least 2 classes");
    if (!(l2 >= 0.0)) throw InvalidArgument("l2 must be >= 0");
}

Manifest LogisticObjective::manifest() const {
    return {{"weight", 0, {classes_, d_in_}}, {"bias", classes_ * d_in_, {classes_}}};
}

void LogisticObjective::logits_row(const ParamVector& theta, std::span<const double> x,
                                   std::span<double> out) const {
    const std::size_t bias_offset = classes_ * d_in_;
    for (std::size_t c = 0; c < classes_; ++c) {
        double acc = theta[bias_offset + c];
        const double* w = &theta.raw()[c * d_in_];
        for (std::size_t j = 0; j < d_in_; ++j) acc += w[j] * x[j];
        out[c] = acc;
    }
}

double LogisticObjective::do_loss(const ParamVector& theta, const Batch& batch) const {
    return do_loss_grad(theta, batch).loss;
}

LossGrad LogisticObjective::do_loss_grad(const ParamVector& theta, const Batch& batch) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    if (batch.d_in != d_in_) throw DimensionError("logistic batch features", d_in_, batch.d_in);
    batch.check_labels(classes_);
    const std::size_t n = batch.size();
    const std::size_t bias_offset = classes_ * d_in_;
    std::vector<double> z(classes_), dz(classes_);
    ParamVector g(dim());
    double total = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
        const auto x = batch.row(e);
        logits_row(theta, x, z);
        total += softmax_cross_entropy(z, batch.labels[e], dz);
        for (std::size_t c = 0; c < classes_; ++c) {
            double* gw = &g.values()[c * d_in_];
            for (std::size_t j = 0; j < d_in_; ++j) gw[j] += dz[c] * x[j];
            g[bias_offset + c] += dz[c];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] * inv_n + l2_ * theta[i];
    return {total * inv_n + 0.5 * l2_ * sq_norm(theta), std::move(g)};
}

ParamVector LogisticObjective::do_hvp(const ParamVector& theta, const ParamVector& v,
                                      const Batch& batch, const ParamVector*) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    if (batch.d_in != d_in_) throw DimensionError("logistic batch features", d_in_, batch.d_in);
    const std::size_t n = batch.size();
    const std::size_t bias_offset = classes_ * d_in_;
    std::vector<double> z(classes_), p(classes_), dz(classes_), u(classes_);
    ParamVector out(dim());
    for (std::size_t e = 0; e < n; ++e) {
        const auto x = batch.row(e);
        logits_row(theta, x, z);
        softmax(z, p);
        // Directional change of the logits along v.
        logits_row(v, x, dz);
        double pdz = 0.0;
        for (std::size_t c = 0; c < classes_; ++c) pdz += p[c] * dz[c];
        // (diag(p) - p p^T) dz
        for (std::size_t c = 0; c < classes_; ++c) u[c] = p[c] * (dz[c] - pdz);
        for (std::size_t c = 0; c < classes_; ++c) {
            double* hw = &out.values()[c * d_in_];
            for (std::size_t j = 0; j < d_in_; ++j) hw[j] += u[c] * x[j];
            out[bias_offset + c] += u[c];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * inv_n + l2_ * v[i];
    return out;
}

LogisticObjective make_logreg(std::size_t d_in, std::size_t classes, double l2) {
    return LogisticObjective(d_in, classes, l2);
}

// ---------------------------------------------------------------- MLP

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation parse_activation(const std::string& name) {
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    throw InvalidArgument("unknown activation '" + name + "'");
}

std::string weight_segment(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_segment(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

std::size_t MlpSpec::param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l + 1] * (widths[l] + 1);
    return n;
}

Manifest MlpSpec::manifest() const {
    Manifest m;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        m.push_back({weight_segment(l), offset, {widths[l + 1], widths[l]}});
        offset += widths[l + 1] * widths[l];
        m.push_back({bias_segment(l), offset, {widths[l + 1]}});
        offset += widths[l + 1];
    }
    return m;
}

void MlpSpec::validate() const {
    if (widths.size() < 2) throw InvalidArgument("MLP needs at least input and output widths");
    for (auto w : widths)
        if (w == 0) throw InvalidArgument("MLP layer widths must be positive");
    if (widths.back() < 2) throw InvalidArgument("MLP output width must be >= 2");
    if (!(l2 >= 0.0)) throw InvalidArgument("l2 must be >= 0");
}

struct Mlp::Forward {
    // pre[l]: pre-activations of layer l (n x widths[l+1]);
    // act[l]: inputs to layer l (n x widths[l]); act[0] aliases the features.
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> act;
};

Mlp::Mlp(MlpSpec spec, double hvp_step) : spec_(std::move(spec)), hvp_step_(hvp_step) {
    spec_.validate();
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
        weight_offsets_.push_back(offset);
        offset += spec_.widths[l + 1] * spec_.widths[l];
        bias_offsets_.push_back(offset);
        offset += spec_.widths[l + 1];
    }
}

ParamVector Mlp::init_params(SeededRng& rng) const {
    ParamVector theta(dim());
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
        const std::size_t in = spec_.widths[l], out = spec_.widths[l + 1];
        const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
        for (std::size_t i = 0; i < in * out; ++i) theta[weight_offsets_[l] + i] = stddev * rng.normal();
    }
    theta.set_manifest(spec_.manifest());
    return theta;
}

void Mlp::forward(const ParamVector& theta, const Batch& batch, Forward& out,
                  std::size_t stop_layer) const {
    check_dim(theta, "mlp forward");
    if (batch.d_in != spec_.input_width())
        throw DimensionError("mlp batch features", spec_.input_width(), batch.d_in);
    const std::size_t n = batch.size();
    const std::size_t layers = std::min(stop_layer, spec_.num_layers());
    out.pre.assign(layers, {});
    out.act.assign(layers + 1, {});
    out.act[0] = batch.features;
    const auto& w = theta.raw();
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t in = spec_.widths[l], width = spec_.widths[l + 1];
        const double* weight = &w[weight_offsets_[l]];
        const double* bias = &w[bias_offsets_[l]];
        auto& pre = out.pre[l];
        pre.assign(n * width, 0.0);
        const auto& a = out.act[l];
        for (std::size_t e = 0; e < n; ++e) {
            const double* x = &a[e * in];
            double* z = &pre[e * width];
            for (std::size_t o = 0; o < width; ++o) {
                const double* row = weight + o * in;
                double acc = bias[o];
                for (std::size_t j = 0; j < in; ++j) acc += row[j] * x[j];
                z[o] = acc;
            }
        }
        const bool hidden = l + 1 < spec_.num_layers();
        auto& next = out.act[l + 1];
        if (hidden) {
            next.resize(pre.size());
            if (spec_.activation == Activation::tanh)
                for (std::size_t i = 0; i < pre.size(); ++i) next[i] = std::tanh(pre[i]);
            else
                for (std::size_t i = 0; i < pre.size(); ++i) next[i] = pre[i] > 0.0 ? pre[i] : 0.0;
        } else {
            next = pre;
        }
    }
}

std::vector<double> Mlp::logits(const ParamVector& theta, const Batch& batch) const {
    Forward f;
    forward(theta, batch, f, spec_.num_layers());
    return std::move(f.act.back());
}

std::vector<double> Mlp::layer_inputs(const ParamVector& theta, const Batch& batch,
                                      std::size_t layer) const {
    if (layer >= spec_.num_layers())
        throw InvalidArgument("layer index " + std::to_string(layer) + " out of range");
    Forward f;
    forward(theta, batch, f, layer);
    return std::move(f.act[layer]);
}

std::vector<int> Mlp::predict(const ParamVector& theta, const Batch& batch) const {
    const auto z = logits(theta, batch);
    const std::size_t classes = spec_.output_width();
    std::vector<int> out(batch.size());
    for (std::size_t e = 0; e < batch.size(); ++e) {
        const auto first = z.begin() + static_cast<std::ptrdiff_t>(e * classes);
        out[e] = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(classes)) - first);
    }
    return out;
}

double Mlp::loss_with(const ParamVector& theta, const Batch& batch,
                      const LogitLoss& per_example) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    const auto z = logits(theta, batch);
    const std::size_t classes = spec_.output_width();
    std::vector<double> scratch(classes);
    double total = 0.0;
    for (std::size_t e = 0; e < batch.size(); ++e)
        total += per_example(e, std::span<const double>(z).subspan(e * classes, classes), scratch);
    return total / static_cast<double>(batch.size()) + 0.5 * spec_.l2 * sq_norm(theta);
}

LossGrad Mlp::loss_grad_with(const ParamVector& theta, const Batch& batch,
                             const LogitLoss& per_example) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    Forward f;
    forward(theta, batch, f, spec_.num_layers());
    const std::size_t n = batch.size();
    const std::size_t layers = spec_.num_layers();
    const std::size_t classes = spec_.output_width();
    const double inv_n = 1.0 / static_cast<double>(n);

    // delta holds dL/d(pre-activation) of the current layer.
    std::vector<double> delta(n * classes);
    double total = 0.0;
    const auto& out_logits = f.act.back();
    for (std::size_t e = 0; e < n; ++e) {
        auto d = std::span<double>(delta).subspan(e * classes, classes);
        total += per_example(e, std::span<const double>(out_logits).subspan(e * classes, classes), d);
        for (auto& v : d) v *= inv_n;
    }

    ParamVector g(dim());
    auto gv = g.values();
    const auto& w = theta.raw();
    for (std::size_t l = layers; l-- > 0;) {
        const std::size_t in = spec_.widths[l], width = spec_.widths[l + 1];
        const auto& a = f.act[l];
        double* gw = &gv[weight_offsets_[l]];
        double* gb = &gv[bias_offsets_[l]];
        for (std::size_t e = 0; e < n; ++e) {
            const double* x = &a[e * in];
            const double* d = &delta[e * width];
            for (std::size_t o = 0; o < width; ++o) {
                if (d[o] == 0.0) continue;
                double* row = gw + o * in;
                for (std::size_t j = 0; j < in; ++j) row[j] += d[o] * x[j];
                gb[o] += d[o];
            }
        }
        if (l == 0) break;
        // Propagate to the previous layer's pre-activations.
        const double* weight = &w[weight_offsets_[l]];
        std::vector<double> prev(n * in, 0.0);
        const auto& pre = f.pre[l - 1];
        for (std::size_t e = 0; e < n; ++e) {
            const double* d = &delta[e * width];
            double* p = &prev[e * in];
            for (std::size_t o = 0; o < width; ++o) {
                if (d[o] == 0.0) continue;
                const double* row = weight + o * in;
                for (std::size_t j = 0; j < in; ++j) p[j] += row[j] * d[o];
            }
            const double* z = &pre[e * in];
            const double* act = &a[e * in];
            if (spec_.activation == Activation::tanh)
                for (std::size_t j = 0; j < in; ++j) p[j] *= 1.0 - act[j] * act[j];
            else
                for (std::size_t j = 0; j < in; ++j) p[j] = z[j] > 0.0 ? p[j] : 0.0;
        }
        delta = std::move(prev);
    }
    if (spec_.l2 != 0.0)
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += spec_.l2 * w[i];
    return {total * inv_n + 0.5 * spec_.l2 * sq_norm(theta), std::move(g)};
}

namespace {

LogitLoss cross_entropy_for(const Batch& batch, std::size_t classes) {
    batch.check_labels(classes);
    return [&batch](std::size_t e, std::span<const double> z, std::span<double> dz) {
        return softmax_cross_entropy(z, batch.labels[e], dz);
    };
}

}  // namespace

double Mlp::do_loss(const ParamVector& theta, const Batch& batch) const {
    return loss_with(theta, batch, cross_entropy_for(batch, spec_.output_width()));
}

LossGrad Mlp::do_loss_grad(const ParamVector& theta, const Batch& batch) const {
    return loss_grad_with(theta, batch, cross_entropy_for(batch, spec_.output_width()));
}

ParamVector Mlp::do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                        const ParamVector* base_grad) const {
    return finite_difference_hvp(*this, theta, v, batch, base_grad, hvp_step_);
}

InitializedMlp make_mlp(const MlpSpec& spec, SeededRng& rng) {
    Mlp oracle(spec);
    ParamVector theta = oracle.init_params(rng);
    return {std::move(oracle), std::move(theta)};
}

}  // namespace cflat
