#include "cflat/optim.hpp"

#include <cmath>
#include <numeric>

#include "cflat/error.hpp"

namespace cflat {

void OptimConfig::validate() const {
    if (!(eta > 0.0)) throw ConfigError("optim.eta", "must be > 0");
    if (!(rho >= 0.0)) throw ConfigError("optim.rho", "must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("optim.lambda", "must be >= 0");
    if (!(eps_guard > 0.0)) throw ConfigError("optim.eps_guard", "must be > 0");
    if (!(rho_min <= rho && rho <= rho_max))
        throw ConfigError("optim.rho", "must satisfy rho_min <= rho <= rho_max");
    if (!(eta_min <= eta && eta <= eta_max))
        throw ConfigError("optim.eta", "must satisfy eta_min <= eta <= eta_max");
}

double proxy_value(const ProxyState& state) noexcept {
    const double x = -state.k * static_cast<double>(state.i - state.i0);
    return state.A / (1.0 + std::exp(x));
}

ParamVector sam_perturb(const ParamVector& g, double rho, double eps_guard) {
    return scaled(rho / (norm2(g) + eps_guard), g);
}

Direction sgd_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch) {
    LossGrad lg = oracle.loss_grad(theta, batch);
    Direction d;
    d.stats.loss = lg.loss;
    d.stats.sq_grad_norm = sq_norm(lg.grad);
    d.stats.grad_evals = 1;
    d.g = std::move(lg.grad);
    return d;
}

namespace {

Direction sam_from(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                   const OptimConfig& cfg, const LossGrad& at_theta) {
    Direction d;
    d.stats.loss = at_theta.loss;
    d.stats.sq_grad_norm = sq_norm(at_theta.grad);
    d.perturbation = sam_perturb(at_theta.grad, cfg.rho, cfg.eps_guard);
    d.stats.eps0_norm = norm2(d.perturbation);
    d.g = oracle.grad(theta + d.perturbation, batch);
    d.stats.grad_evals = 2;
    return d;
}

ParamVector descend(const ParamVector& theta, double eta, const ParamVector& g) {
    ParamVector out = axpy(-eta, g, theta);
    out.set_manifest(theta.manifest());
    return out;
}

}  // namespace

Direction sam_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                        const OptimConfig& cfg) {
    return sam_from(oracle, theta, batch, cfg, oracle.loss_grad(theta, batch));
}

Direction cflat_gradient(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                         const OptimConfig& cfg, const LossGrad* at_theta) {
    const LossGrad base = at_theta ? *at_theta : oracle.loss_grad(theta, batch);
    const ParamVector& g = base.grad;
    const double g_norm = norm2(g);

    // Zeroth-order term: gradient at the SAM ascent point.
    Direction d = sam_from(oracle, theta, batch, cfg, base);

    // First-order term: ascend along grad |grad L|, then take grad |grad L| there.
    const ParamVector g_unit = scaled(1.0 / (g_norm + cfg.eps_guard), g);
    const ParamVector h = oracle.hvp(theta, g_unit, batch, &g);
    const ParamVector eps1 = scaled(cfg.rho / (norm2(h) + cfg.eps_guard), h);
    const ParamVector theta1 = theta + eps1;
    const ParamVector g_at1 = oracle.grad(theta1, batch);
    const ParamVector g_at1_unit = scaled(1.0 / (norm2(g_at1) + cfg.eps_guard), g_at1);
    const ParamVector g1 = oracle.hvp(theta1, g_at1_unit, batch, &g_at1);

    d.g = axpy(cfg.lambda, g1, d.g);
    d.stats.used_cflat = true;
    d.stats.eps1_norm = norm2(eps1);
    d.stats.grad_evals = 4;
    d.stats.hvp_evals = 2;
    return d;
}

StepResult sgd_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                    const OptimConfig& cfg) {
    Direction d = sgd_direction(oracle, theta, batch);
    return {descend(theta, cfg.eta, d.g), d.stats};
}

StepResult sam_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                    const OptimConfig& cfg) {
    Direction d = sam_direction(oracle, theta, batch, cfg);
    return {descend(theta, cfg.eta, d.g), d.stats};
}

StepResult cflat_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                      const OptimConfig& cfg) {
    Direction d = cflat_gradient(oracle, theta, batch, cfg);
    return {descend(theta, cfg.eta, d.g), d.stats};
}

Direction cflatpp_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                            const OptimConfig& cfg, ProxyState& state) {
    LossGrad base = oracle.loss_grad(theta, batch);
    const double s = sq_norm(base.grad);

    ProxyRecord rec;
    rec.iteration = state.i;
    rec.value = proxy_value(state);
    rec.A_before = state.A;
    rec.error = rec.value - s;
    state.A = state.A - state.eta0 * rec.error;
    rec.A_after = state.A;
    state.i += 1;
    if (!std::isfinite(state.A)) throw DivergenceError("non-finite sharpness bound A");

    Direction d;
    if (rec.error <= 0.0) {
        d = cflat_gradient(oracle, theta, batch, cfg, &base);
    } else {
        d.stats.loss = base.loss;
        d.stats.sq_grad_norm = s;
        d.stats.grad_evals = 1;
        d.g = std::move(base.grad);
    }
    d.stats.proxy = rec;
    return d;
}

CflatPlusPlusResult cflatpp_step(const Objective& oracle, const ParamVector& theta,
                                 const Batch& batch, const OptimConfig& cfg, ProxyState state) {
    Direction d = cflatpp_direction(oracle, theta, batch, cfg, state);
    return {descend(theta, cfg.eta, d.g), state, d.stats};
}

double rho_schedule(const OptimConfig& cfg, double eta_now) {
    if (cfg.eta_max == cfg.eta_min) return cfg.rho_max;
    if (!(cfg.eta_max > cfg.eta_min)) throw InvalidArgument("rho_schedule: eta_max < eta_min");
    const double slack = 1e-12 * cfg.eta_max;
    if (eta_now < cfg.eta_min - slack || eta_now > cfg.eta_max + slack)
        throw InvalidArgument("rho_schedule: learning rate outside [eta_min, eta_max]");
    return cfg.rho_min + (cfg.rho_max - cfg.rho_min) / (cfg.eta_max - cfg.eta_min) * (eta_now - cfg.eta_min);
}

std::string to_string(HybridOrdering o) {
    return o == HybridOrdering::cflat_first ? "cflat_first" : "cflat_last";
}

HybridOrdering parse_hybrid_ordering(const std::string& name) {
    if (name == "cflat_first") return HybridOrdering::cflat_first;
    if (name == "cflat_last") return HybridOrdering::cflat_last;
    throw InvalidArgument("unknown hybrid ordering '" + name + "'");
}

std::vector<bool> hybrid_step_plan(std::size_t total_steps, double p, HybridOrdering ordering) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("hybrid proportion must lie in [0, 1]");
    // std::nearbyint under the default rounding mode is round-half-to-even.
    const auto n_cflat = static_cast<std::size_t>(std::nearbyint(p * static_cast<double>(total_steps)));
    std::vector<bool> plan(total_steps, false);
    if (ordering == HybridOrdering::cflat_first)
        for (std::size_t i = 0; i < n_cflat; ++i) plan[i] = true;
    else
        for (std::size_t i = total_steps - n_cflat; i < total_steps; ++i) plan[i] = true;
    return plan;
}

std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::sam: return "sam";
        case OptimizerKind::cflat: return "cflat";
        case OptimizerKind::cflatpp: return "cflat++";
        case OptimizerKind::hybrid: return "hybrid";
    }
    return "unknown";
}

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "sam") return OptimizerKind::sam;
    if (name == "cflat") return OptimizerKind::cflat;
    if (name == "cflat++") return OptimizerKind::cflatpp;
    if (name == "hybrid") return OptimizerKind::hybrid;
    throw InvalidArgument("unknown optimizer '" + name + "'");
}

namespace {

class SgdStepper final : public Stepper {
public:
    Direction direction(const Objective& o, const ParamVector& t, const Batch& b,
                        const OptimConfig&) override {
        return sgd_direction(o, t, b);
    }
};

class SamStepper final : public Stepper {
public:
    Direction direction(const Objective& o, const ParamVector& t, const Batch& b,
                        const OptimConfig& cfg) override {
        return sam_direction(o, t, b, cfg);
    }
};

class CflatStepper final : public Stepper {
public:
    Direction direction(const Objective& o, const ParamVector& t, const Batch& b,
                        const OptimConfig& cfg) override {
        return cflat_gradient(o, t, b, cfg);
    }
};

class CflatPlusPlusStepper final : public Stepper {
public:
    CflatPlusPlusStepper(ProxyState initial, bool reset_per_task)
        : initial_(initial), state_(initial), reset_per_task_(reset_per_task) {}

    void begin_task(std::size_t) override {
        if (reset_per_task_) state_ = initial_;
    }

    Direction direction(const Objective& o, const ParamVector& t, const Batch& b,
                        const OptimConfig& cfg) override {
        return cflatpp_direction(o, t, b, cfg, state_);
    }

private:
    ProxyState initial_;
    ProxyState state_;
    bool reset_per_task_;
};

class HybridStepper final : public Stepper {
public:
    HybridStepper(double p, HybridOrdering ordering) : p_(p), ordering_(ordering) {}

    void begin_task(std::size_t total_steps) override {
        plan_ = hybrid_step_plan(total_steps, p_, ordering_);
        next_ = 0;
    }

    Direction direction(const Objective& o, const ParamVector& t, const Batch& b,
                        const OptimConfig& cfg) override {
        const bool use_cflat = next_ < plan_.size() && plan_[next_];
        ++next_;
        return use_cflat ? cflat_gradient(o, t, b, cfg) : sgd_direction(o, t, b);
    }

private:
    double p_;
    HybridOrdering ordering_;
    std::vector<bool> plan_;
    std::size_t next_ = 0;
};

}  // namespace

std::unique_ptr<Stepper> make_stepper(const StepperOptions& options) {
    switch (options.kind) {
        case OptimizerKind::sgd: return std::make_unique<SgdStepper>();
        case OptimizerKind::sam: return std::make_unique<SamStepper>();
        case OptimizerKind::cflat: return std::make_unique<CflatStepper>();
        case OptimizerKind::cflatpp:
            return std::make_unique<CflatPlusPlusStepper>(options.proxy, options.reset_proxy_per_task);
        case OptimizerKind::hybrid:
            return std::make_unique<HybridStepper>(options.hybrid_p, options.hybrid_ordering);
    }
    throw InvalidArgument("unknown optimizer kind");
}

double Schedule::eta_at(const OptimConfig& cfg, int epoch) const {
    double eta = cfg.eta;
    for (int m : milestones)
        if (epoch >= m) eta *= decay;
    return eta;
}

std::size_t steps_per_epoch(std::size_t examples, std::size_t batch_size) {
    if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
    return (examples + batch_size - 1) / batch_size;
}

TrainResult train_epochs(const Objective& oracle, ParamVector theta, const Batch& data,
                         const OptimConfig& cfg, Stepper& stepper, const TrainOptions& options,
                         SeededRng& rng) {
    if (options.batch_size == 0 || options.batch_size > data.size())
        throw InvalidArgument("batch_size must lie in [1, dataset size]");
    TrainResult result;
    std::vector<std::size_t> order(data.size());
    long step = options.step_offset;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        OptimConfig step_cfg = cfg;
        step_cfg.eta = options.schedule.eta_at(cfg, epoch);
        if (cfg.rho_min != cfg.rho_max) step_cfg.rho = rho_schedule(cfg, step_cfg.eta);

        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t stop = std::min(order.size(), start + options.batch_size);
            const Batch batch =
                data.subset(std::span<const std::size_t>(order).subspan(start, stop - start));
            try {
                Direction d = stepper.direction(oracle, theta, batch, step_cfg);
                const ParamVector update =
                    options.filter ? options.filter->filter(oracle, theta, batch, d, step_cfg) : d.g;
                theta = descend(theta, step_cfg.eta, update);
                if (!theta.all_finite()) throw DivergenceError("non-finite parameters after update");
                result.trace.push_back(
                    {options.task, epoch, step, step_cfg.eta, step_cfg.rho, batch.size(), d.stats});
            } catch (const DivergenceError& e) {
                throw DivergenceError(e.detail(), step);
            }
            ++step;
        }
    }
    result.theta = std::move(theta);
    return result;
}

}  // namespace cflat
