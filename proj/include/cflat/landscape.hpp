#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cflat/numcore.hpp"
#include "cflat/objective.hpp"
#include "cflat/optim.hpp"

namespace cflat {

struct EigenEstimate {
    double value = 0.0;   // signed Rayleigh quotient
    ParamVector vector;   // unit-norm; zero when the Hessian vanishes
    int iterations = 0;
    bool converged = false;
};

// Power iteration on v -> Hv. `deflate` lists (value, unit vector) pairs whose
// components are subtracted, i.e. iteration on H - sum lambda_j u_j u_j^T.
EigenEstimate power_iteration(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                              int iters, double tol, SeededRng& rng,
                              std::span<const EigenEstimate> deflate = {});

double power_iter_lambda_max(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                             int iters, double tol, SeededRng& rng);

// Mean of z^T H z over Rademacher probes.
double hutchinson_trace(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                        int probes, SeededRng& rng);

// Draws `n` points uniformly from the radius-`rho` ball around the origin.
std::vector<ParamVector> sample_ball(std::size_t dim, double rho, std::size_t n, SeededRng& rng);

// max over sampled theta' in B(theta, rho) of L(theta') - L(theta); never below 0.
double r0_bruteforce(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                     double rho, std::size_t n_samples, SeededRng& rng);
// rho * max over sampled theta' in B(theta, rho) of |grad L(theta')|.
double r1_bruteforce(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                     double rho, std::size_t n_samples, SeededRng& rng);

struct LossGrid {
    std::vector<double> coords;   // shared by both axes
    std::vector<double> losses;   // row-major: losses[i * n + j] at (coords[i], coords[j])

    std::size_t n() const noexcept { return coords.size(); }
    double at(std::size_t i, std::size_t j) const noexcept { return losses[i * coords.size() + j]; }
};

LossGrid landscape_slice_2d(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                            const ParamVector& dir1, const ParamVector& dir2, double extent,
                            std::size_t grid_n);

// Per-(task, epoch) mean of the per-step squared gradient norm, in trace order.
std::vector<double> track_sq_grad_norm(std::span<const TraceEntry> trace);

struct FlatnessReport {
    double loss = 0.0;
    double sq_grad_norm = 0.0;
    double lambda_max = 0.0;
    double lambda_second = 0.0;
    double trace = 0.0;
    double r0_sample = 0.0;
    double r1_sample = 0.0;
    double rho_used = 0.0;
    bool r0_le_r1 = false;
    int power_iters = 0;
    int trace_probes = 0;
    std::size_t ball_samples = 0;
    std::uint64_t probe_seed = 0;
};

struct FlatnessOptions {
    int power_iters = 200;
    double power_tol = 1e-8;
    int trace_probes = 100;
    double rho = 0.05;
    std::size_t ball_samples = 2000;
    std::uint64_t probe_seed = 0;
    // Relative slack on the r0 <= r1 check for sampling noise.
    double ordering_slack = 0.02;
};

// Every estimator draws from its own (probe_seed, stream) generator.
FlatnessReport flatness_report(const Objective& oracle, const ParamVector& theta,
                               const Batch& batch, const FlatnessOptions& options,
                               EigenEstimate* top = nullptr, EigenEstimate* second = nullptr);

}  // namespace cflat
