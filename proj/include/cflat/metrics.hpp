#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cflat/optim.hpp"

namespace cflat {

// Lower-triangular accuracy table: at(t, i) is the accuracy on task i's test
// split after training task t, defined for i <= t. Indices are 0-based.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::size_t tasks);
    // Builds from ragged rows; row t must hold t + 1 entries in [0, 1].
    static AccuracyMatrix from_rows(std::vector<std::vector<double>> rows);

    std::size_t tasks() const noexcept { return rows_.size(); }
    bool empty() const noexcept { return rows_.empty(); }
    double at(std::size_t t, std::size_t i) const;
    void set(std::size_t t, std::size_t i, double value);
    const std::vector<std::vector<double>>& rows() const noexcept { return rows_; }

    // Element-wise mean of equally sized matrices.
    static AccuracyMatrix mean(std::span<const AccuracyMatrix> matrices);

private:
    std::vector<std::vector<double>> rows_;
};

double last_accuracy(const AccuracyMatrix& a);
double average_accuracy(const AccuracyMatrix& a);
// GEM backward transfer: mean over i < T of a[T][i] - a[i][i]. Needs T >= 2.
double bwt(const AccuracyMatrix& a);
// GEM forward transfer. pre_task[i] is the accuracy on task i measured just
// before training it (entry 0 unused); random_init[i] is the accuracy of an
// untrained model on task i. Needs T >= 2.
double fwt(const AccuracyMatrix& a, std::span<const double> pre_task,
           std::span<const double> random_init);

double cflat_proportion(std::span<const TraceEntry> trace);
double cflat_proportion(std::span<const StepStats> stats);
// Total examples over total seconds; rejects non-positive elapsed time.
double throughput(std::span<const std::size_t> example_counts, std::span<const double> wall_seconds);

// (x - baseline) / baseline.
double relative_return(double x, double baseline);

}  // namespace cflat
