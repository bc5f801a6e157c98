#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cflat/metrics.hpp"
#include "cflat/numcore.hpp"
#include "cflat/objective.hpp"
#include "cflat/optim.hpp"

namespace cflat {

// ------------------------------------------------------------------ data

struct Dataset {
    Batch train;
    Batch test;
    std::size_t num_classes = 0;
};

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t dims = 16;
    std::size_t per_class = 100;
    double cluster_std = 1.0;
    std::uint64_t seed = 0;
};

// Gaussian clusters around per-class means drawn from N(0, I); stratified
// 80/20 train/test split.
Dataset synth_dataset(const SyntheticSpec& spec);
std::vector<ParamVector> synth_class_means(const SyntheticSpec& spec);

// CSV with the integer label in the first column and real features after it.
// A non-numeric first row is treated as a header. Split 80/20 per class.
Dataset load_csv_dataset(const std::string& path, std::uint64_t split_seed);

// Stratified split of labelled examples into train (fraction) and test.
Dataset stratified_split(const Batch& all, std::size_t num_classes, double train_fraction,
                         std::uint64_t seed);

enum class Protocol { B0, B50 };

std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& name);

struct Task {
    Batch train;
    Batch test;
    std::vector<int> classes;   // relabelled ids, contiguous
};

// Classes are relabelled so that the k-th class in permuted order has id k;
// task t then covers a contiguous id range.
struct TaskStream {
    std::vector<Task> tasks;
    std::vector<int> class_order;   // class_order[k] = original id of new id k
    Protocol protocol = Protocol::B0;
    std::size_t increment = 0;
    std::uint64_t perm_seed = 1993;
    std::size_t num_classes = 0;

    std::size_t classes_through(std::size_t task) const;
};

TaskStream make_stream(const Dataset& dataset, Protocol protocol, std::size_t increment,
                       std::uint64_t perm_seed = 1993);

double accuracy(const Mlp& model, const ParamVector& theta, const Batch& batch);

// ------------------------------------------------------------------ replay

inline constexpr std::size_t kUnlimitedMemory = std::numeric_limits<std::size_t>::max();

struct MemoryBuffer {
    std::size_t capacity_per_class = 20;
    Batch exemplars;

    std::map<int, std::size_t> class_counts() const;
};

// Uniformly samples up to capacity_per_class exemplars of every class in
// `task_data`; already stored exemplars are kept.
MemoryBuffer buffer_update(MemoryBuffer buffer, const Batch& task_data, SeededRng& rng);

// Mean loss over the concatenation of the two batches.
double replay_loss(const Objective& oracle, const ParamVector& theta, const Batch& new_batch,
                   const Batch& memory_batch);
Batch replay_batch(const Batch& new_batch, const Batch& memory_batch);

// ------------------------------------------------------------------ distillation

// Cross-entropy on the current labels plus KL(old || current) between the
// temperature-softened distributions over the old model's classes.
class DistillationObjective final : public Objective {
public:
    DistillationObjective(Mlp current, Mlp old_model, ParamVector old_theta, double temperature);

    std::size_t dim() const override { return current_.dim(); }
    const Mlp& current() const noexcept { return current_; }
    double temperature() const noexcept { return temperature_; }

protected:
    double do_loss(const ParamVector& theta, const Batch& batch) const override;
    LossGrad do_loss_grad(const ParamVector& theta, const Batch& batch) const override;
    ParamVector do_hvp(const ParamVector& theta, const ParamVector& v, const Batch& batch,
                       const ParamVector* base_grad) const override;

private:
    LogitLoss per_example(const Batch& batch, const std::vector<double>& old_logits) const;

    Mlp current_;
    Mlp old_model_;
    ParamVector old_theta_;
    double temperature_;
};

// Without an old model this is plain cross-entropy.
double icarl_loss(const Mlp& model, const ParamVector& theta,
                  const std::optional<std::pair<Mlp, ParamVector>>& old,
                  const Batch& batch, double temperature);

// ------------------------------------------------------------------ head growth and WA

struct GrownHead {
    ParamVector theta;
    MlpSpec spec;
};

// Appends `new_classes` output rows; existing weights are copied bit-exactly.
GrownHead grow_head(const ParamVector& theta, const MlpSpec& spec, std::size_t new_classes,
                    SeededRng& rng);

// Mean row norm of the old-class head weights over that of the new classes.
// Both spans hold row-major (classes x row_width) weights.
double wa_align(std::span<const double> old_weights, std::span<const double> new_weights,
                std::size_t row_width);

// Scales the head rows (weights and biases) of classes >= old_classes by the
// alignment ratio; returns the ratio.
double apply_weight_alignment(ParamVector& theta, const MlpSpec& spec, std::size_t old_classes);

// ------------------------------------------------------------------ GPM

struct GpmState {
    std::size_t layer = 0;
    Eigen::MatrixXd basis;            // repr_dim x rank, orthonormal columns
    Eigen::VectorXd significance;     // rank entries in [0, 1]
    double energy_threshold = 0.97;

    std::size_t rank() const noexcept { return static_cast<std::size_t>(basis.cols()); }
    bool empty() const noexcept { return basis.cols() == 0; }
};

// Columns-as-examples representation matrix (repr_dim x n) of the inputs to `layer`.
Eigen::MatrixXd representation_matrix(const Mlp& model, const ParamVector& theta,
                                      const Batch& batch, std::size_t layer);

GpmState gpm_extract_basis(const Mlp& model, const ParamVector& theta, const Batch& sample_batch,
                           double energy_threshold, std::size_t layer = 0);
// Adds the residual directions of a new task, keeping old columns and their significance.
void gpm_extend_basis(GpmState& state, const Mlp& model, const ParamVector& theta,
                      const Batch& sample_batch);

// Replaces the layer's weight-gradient block W by W (I - M diag(Lambda) M^T).
ParamVector gpm_project(const GpmState& state, const MlpSpec& spec, const ParamVector& g);

struct GpmStepResult {
    ParamVector theta;
    GpmState state;
    StepStats stats;
    ParamVector projected;   // the projected direction that was applied
};

// Significance update by forward-difference sensitivity of the loss after the
// projected update, then the projected descent step.
void gpm_update_significance(GpmState& state, const Objective& oracle, const MlpSpec& spec,
                             const ParamVector& theta, const Batch& batch,
                             const Direction& direction, double eta1, double eta2);

GpmStepResult gpm_cflat_step(const Objective& oracle, const MlpSpec& spec, const ParamVector& theta,
                             const Batch& batch, const OptimConfig& cfg, GpmState state,
                             double eta1, double eta2);

class GpmFilter final : public DirectionFilter {
public:
    GpmFilter(GpmState& state, MlpSpec spec, double eta1) : state_(state), spec_(std::move(spec)), eta1_(eta1) {}

    ParamVector filter(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                       const Direction& direction, const OptimConfig& cfg) override;

    // Largest |M^T g_block| / |g| seen with every significance entry equal to 1.
    double worst_leak() const noexcept { return worst_leak_; }
    std::size_t full_significance_steps() const noexcept { return full_steps_; }

private:
    GpmState& state_;
    MlpSpec spec_;
    double eta1_;
    double worst_leak_ = 0.0;
    std::size_t full_steps_ = 0;
};

// ------------------------------------------------------------------ experiments

enum class Method { finetune, replay, icarl, wa, gpm };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct ExperimentConfig {
    Method method = Method::finetune;
    StepperOptions optimizer{};
    OptimConfig optim{};
    Schedule schedule{};
    std::vector<std::size_t> hidden{64};
    Activation activation = Activation::tanh;
    double l2 = 0.0;
    int epochs = 10;
    std::size_t batch_size = 32;
    std::size_t memory_per_class = 20;
    double temperature = 2.0;
    double gpm_threshold = 0.97;
    std::size_t gpm_layer = 0;
    double gpm_eta_lambda = 0.01;
    std::size_t gpm_samples = 200;
};

struct SeedResult {
    std::uint64_t seed = 0;
    AccuracyMatrix accuracy;
    std::vector<double> pre_task_accuracy;     // before training task i (i = 0 unused)
    std::vector<double> random_init_accuracy;  // untrained model, per task
    std::vector<TraceEntry> trace;
    std::size_t examples = 0;
    double train_seconds = 0.0;
    MlpSpec spec;
    ParamVector theta;
    Batch final_train;                          // training set of the last task
    double gpm_worst_leak = 0.0;
    std::size_t gpm_checked_steps = 0;
};

struct ExperimentResult {
    std::vector<SeedResult> seeds;
    AccuracyMatrix mean_accuracy;
};

SeedResult run_cl_seed(const TaskStream& stream, const ExperimentConfig& cfg, std::uint64_t seed);

// Seeds may run on `jobs` threads; results keep the order of `seeds`.
ExperimentResult run_cl_experiment(const TaskStream& stream, const ExperimentConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds, int jobs = 1);

}  // namespace cflat
