#include "cflat/metrics.hpp"

#include "cflat/error.hpp"

namespace cflat {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) {
    rows_.resize(tasks);
    for (std::size_t t = 0; t < tasks; ++t) rows_[t].assign(t + 1, 0.0);
}

AccuracyMatrix AccuracyMatrix::from_rows(std::vector<std::vector<double>> rows) {
    AccuracyMatrix m;
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t].size() != t + 1) throw DimensionError("accuracy matrix row", t + 1, rows[t].size());
        for (double v : rows[t])
            if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("accuracy entries must lie in [0, 1]");
    }
    m.rows_ = std::move(rows);
    return m;
}

double AccuracyMatrix::at(std::size_t t, std::size_t i) const {
    if (t >= rows_.size() || i > t) throw InvalidArgument("accuracy matrix index out of range");
    return rows_[t][i];
}

void AccuracyMatrix::set(std::size_t t, std::size_t i, double value) {
    if (t >= rows_.size() || i > t) throw InvalidArgument("accuracy matrix index out of range");
    if (!(value >= 0.0 && value <= 1.0)) throw InvalidArgument("accuracy entries must lie in [0, 1]");
    rows_[t][i] = value;
}

AccuracyMatrix AccuracyMatrix::mean(std::span<const AccuracyMatrix> matrices) {
    if (matrices.empty()) throw InvalidArgument("mean of zero accuracy matrices");
    AccuracyMatrix out(matrices.front().tasks());
    for (const auto& m : matrices) {
        if (m.tasks() != out.tasks()) throw DimensionError("accuracy matrix mean", out.tasks(), m.tasks());
        for (std::size_t t = 0; t < m.tasks(); ++t)
            for (std::size_t i = 0; i <= t; ++i) out.rows_[t][i] += m.rows_[t][i];
    }
    const double inv = 1.0 / static_cast<double>(matrices.size());
    for (auto& row : out.rows_)
        for (auto& v : row) v *= inv;
    return out;
}

namespace {

double row_mean(const std::vector<double>& row) {
    double acc = 0.0;
    for (double v : row) acc += v;
    return acc / static_cast<double>(row.size());
}

}  // namespace

double last_accuracy(const AccuracyMatrix& a) {
    if (a.empty()) throw InvalidArgument("last_accuracy of an empty matrix");
    return row_mean(a.rows().back());
}

double average_accuracy(const AccuracyMatrix& a) {
    if (a.empty()) throw InvalidArgument("average_accuracy of an empty matrix");
    double acc = 0.0;
    for (const auto& row : a.rows()) acc += row_mean(row);
    return acc / static_cast<double>(a.tasks());
}

double bwt(const AccuracyMatrix& a) {
    const std::size_t T = a.tasks();
    if (T < 2) throw InvalidArgument("bwt is undefined for fewer than 2 tasks");
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < T; ++i) acc += a.at(T - 1, i) - a.at(i, i);
    return acc / static_cast<double>(T - 1);
}

double fwt(const AccuracyMatrix& a, std::span<const double> pre_task,
           std::span<const double> random_init) {
    const std::size_t T = a.tasks();
    if (T < 2) throw InvalidArgument("fwt is undefined for fewer than 2 tasks");
    if (pre_task.size() < T || random_init.size() < T)
        throw InvalidArgument("fwt needs a pre-training evaluation for every task");
    double acc = 0.0;
    for (std::size_t i = 1; i < T; ++i) acc += pre_task[i] - random_init[i];
    return acc / static_cast<double>(T - 1);
}

double cflat_proportion(std::span<const StepStats> stats) {
    if (stats.empty()) throw InvalidArgument("cflat_proportion of an empty trace");
    std::size_t used = 0;
    for (const auto& s : stats) used += s.used_cflat ? 1 : 0;
    return static_cast<double>(used) / static_cast<double>(stats.size());
}

double cflat_proportion(std::span<const TraceEntry> trace) {
    if (trace.empty()) throw InvalidArgument("cflat_proportion of an empty trace");
    std::size_t used = 0;
    for (const auto& e : trace) used += e.stats.used_cflat ? 1 : 0;
    return static_cast<double>(used) / static_cast<double>(trace.size());
}

double throughput(std::span<const std::size_t> example_counts, std::span<const double> wall_seconds) {
    double examples = 0.0, seconds = 0.0;
    for (auto n : example_counts) examples += static_cast<double>(n);
    for (double s : wall_seconds) {
        if (!(s >= 0.0)) throw InvalidArgument("wall-clock times must be non-negative");
        seconds += s;
    }
    if (!(seconds > 0.0)) throw InvalidArgument("throughput needs positive elapsed time");
    return examples / seconds;
}

double relative_return(double x, double baseline) {
    if (baseline == 0.0) throw InvalidArgument("relative return against a zero baseline");
    return (x - baseline) / baseline;
}

}  // namespace cflat
