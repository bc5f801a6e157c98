#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cflat/numcore.hpp"
#include "cflat/objective.hpp"

namespace cflat {

struct OptimConfig {
    double eta = 0.05;        // learning rate
    double rho = 0.2;         // neighborhood radius
    double lambda = 0.2;      // weight of the first-order flatness term
    double eps_guard = 1e-12; // added to every normalizing norm
    double rho_min = 0.2;
    double rho_max = 0.2;
    double eta_min = 0.05;
    double eta_max = 0.05;

    // Throws ConfigError on violated bounds.
    void validate() const;
};

// Sigmoid sharpness proxy A / (1 + exp(-k (i - i0))) with error feedback on A.
struct ProxyState {
    double A = 5.0;
    double k = 0.01;
    long i0 = 80;
    double eta0 = 5e-3;
    long i = 0;
};

double proxy_value(const ProxyState& state) noexcept;

// Error-feedback record of one C-Flat++ step, kept so traces can be replayed.
struct ProxyRecord {
    long iteration = 0;
    double value = 0.0;    // proxy at `iteration`
    double A_before = 0.0;
    double A_after = 0.0;
    double error = 0.0;    // value - sq_grad_norm
};

struct StepStats {
    double loss = 0.0;
    double sq_grad_norm = 0.0;   // |grad L(theta)|^2 on this batch
    bool used_cflat = false;
    std::optional<ProxyRecord> proxy;
    // Cost accounting: one per direct gradient, one per HVP.
    int grad_evals = 0;
    int hvp_evals = 0;
    // Largest perturbation norms applied this step (0 when unused).
    double eps0_norm = 0.0;
    double eps1_norm = 0.0;
};

// Update direction plus the perturbation at which its gradient was taken.
struct Direction {
    ParamVector g;
    ParamVector perturbation;   // empty when the gradient was taken at theta
    StepStats stats;
};

ParamVector sam_perturb(const ParamVector& g, double rho, double eps_guard);

Direction sgd_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch);
Direction sam_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                        const OptimConfig& cfg);
// Combined C-Flat direction g0 + lambda * g1. `at_theta` may carry a gradient
// already computed at theta to avoid recomputation.
Direction cflat_gradient(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                         const OptimConfig& cfg, const LossGrad* at_theta = nullptr);

using StepResult = std::pair<ParamVector, StepStats>;

StepResult sgd_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                    const OptimConfig& cfg);
StepResult sam_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                    const OptimConfig& cfg);
StepResult cflat_step(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                      const OptimConfig& cfg);

struct CflatPlusPlusResult {
    ParamVector theta;
    ProxyState state;
    StepStats stats;
};

Direction cflatpp_direction(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                            const OptimConfig& cfg, ProxyState& state);
CflatPlusPlusResult cflatpp_step(const Objective& oracle, const ParamVector& theta,
                                 const Batch& batch, const OptimConfig& cfg, ProxyState state);

// Linear coupling of rho to the current learning rate.
double rho_schedule(const OptimConfig& cfg, double eta_now);

enum class HybridOrdering { cflat_first, cflat_last };

std::string to_string(HybridOrdering o);
HybridOrdering parse_hybrid_ordering(const std::string& name);

// round-half-to-even(p * total_steps) C-Flat steps as a contiguous prefix or suffix.
std::vector<bool> hybrid_step_plan(std::size_t total_steps, double p, HybridOrdering ordering);

enum class OptimizerKind { sgd, sam, cflat, cflatpp, hybrid };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

// Produces per-step update directions. Stateful optimizers (C-Flat++, hybrid)
// keep their state here; begin_task() is called at each task boundary.
class Stepper {
public:
    virtual ~Stepper() = default;
    virtual void begin_task(std::size_t total_steps) { (void)total_steps; }
    virtual Direction direction(const Objective& oracle, const ParamVector& theta,
                                const Batch& batch, const OptimConfig& cfg) = 0;
};

struct StepperOptions {
    OptimizerKind kind = OptimizerKind::sgd;
    ProxyState proxy{};
    bool reset_proxy_per_task = true;
    double hybrid_p = 0.5;
    HybridOrdering hybrid_ordering = HybridOrdering::cflat_last;
};

std::unique_ptr<Stepper> make_stepper(const StepperOptions& options);

struct TraceEntry {
    int task = 0;
    int epoch = 0;
    long step = 0;          // global step index within the run
    double eta = 0.0;
    double rho = 0.0;
    std::size_t examples = 0;
    StepStats stats;
};

struct Schedule {
    std::vector<int> milestones;   // epochs at which eta is multiplied by decay
    double decay = 0.1;

    double eta_at(const OptimConfig& cfg, int epoch) const;
};

struct TrainResult {
    ParamVector theta;
    std::vector<TraceEntry> trace;
};

// Applied to every direction before the update; the GPM projection plugs in here.
class DirectionFilter {
public:
    virtual ~DirectionFilter() = default;
    virtual ParamVector filter(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                               const Direction& direction, const OptimConfig& cfg) = 0;
};

struct TrainOptions {
    int epochs = 1;
    std::size_t batch_size = 32;
    Schedule schedule{};
    int task = 0;
    long step_offset = 0;     // global index of the first step
    DirectionFilter* filter = nullptr;
};

// Shuffled mini-batch passes over `data`. total steps are announced to the
// stepper by the caller via begin_task().
TrainResult train_epochs(const Objective& oracle, ParamVector theta, const Batch& data,
                         const OptimConfig& cfg, Stepper& stepper, const TrainOptions& options,
                         SeededRng& rng);

std::size_t steps_per_epoch(std::size_t examples, std::size_t batch_size);

}  // namespace cflat
