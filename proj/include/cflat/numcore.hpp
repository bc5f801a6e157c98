#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cflat {

// Named slice of a flat parameter vector, e.g. "layer1.weight" with shape {64, 16}.
struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;

    std::size_t size() const noexcept;
    bool operator==(const Segment&) const = default;
};

using Manifest = std::vector<Segment>;

std::size_t manifest_size(const Manifest& manifest) noexcept;

// Flat real-valued parameter vector. The manifest, when present, maps
// contiguous segments onto model tensors; its sizes always sum to size().
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::size_t d, double fill = 0.0);
    explicit ParamVector(std::vector<double> data);
    ParamVector(std::initializer_list<double> values);
    ParamVector(std::vector<double> data, Manifest manifest);

    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& raw() const noexcept { return data_; }

    const Manifest& manifest() const noexcept { return manifest_; }
    void set_manifest(Manifest manifest);

    // Segment lookup by name; throws InvalidArgument if absent.
    const Segment& segment(const std::string& name) const;
    std::span<double> segment_values(const std::string& name);
    std::span<const double> segment_values(const std::string& name) const;

    bool all_finite() const noexcept;

    bool operator==(const ParamVector& other) const noexcept { return data_ == other.data_; }

private:
    std::vector<double> data_;
    Manifest manifest_;
};

double dot(const ParamVector& a, const ParamVector& b);
double norm2(const ParamVector& v) noexcept;
double sq_norm(const ParamVector& v) noexcept;

// y + alpha * x; the result keeps y's manifest.
ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y);
ParamVector scaled(double alpha, const ParamVector& x);
ParamVector operator+(const ParamVector& a, const ParamVector& b);
ParamVector operator-(const ParamVector& a, const ParamVector& b);

// Throws DimensionError when sizes differ.
void require_same_dim(const ParamVector& a, const ParamVector& b, const char* what);

// splitmix64-seeded xoshiro256**. Integer and uniform draws depend only on
// (seed, stream) and reproduce bit-exactly everywhere; normal() additionally
// goes through std::log/std::cos.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }

    std::uint64_t next_u64() noexcept;
    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept;
    // Uniform integer on [0, n); n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) noexcept;
    // Standard normal via Box-Muller; the spare draw is cached.
    double normal() noexcept;
    double rademacher() noexcept;

    template <class T>
    void shuffle(std::vector<T>& items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

ParamVector gaussian_fill(SeededRng& rng, std::size_t d, double mean, double stddev);
ParamVector rademacher_fill(SeededRng& rng, std::size_t d);

}  // namespace cflat
