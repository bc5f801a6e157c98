#include "cflat/numcore.hpp"

#include <cmath>
#include <numbers>

#include "cflat/error.hpp"

namespace cflat {

std::size_t Segment::size() const noexcept {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::size_t manifest_size(const Manifest& manifest) noexcept {
    std::size_t n = 0;
    for (const auto& seg : manifest) n += seg.size();
    return n;
}

ParamVector::ParamVector(std::size_t d, double fill) : data_(d, fill) {}

ParamVector::ParamVector(std::vector<double> data) : data_(std::move(data)) {}

ParamVector::ParamVector(std::initializer_list<double> values) : data_(values) {}

ParamVector::ParamVector(std::vector<double> data, Manifest manifest) : data_(std::move(data)) {
    set_manifest(std::move(manifest));
}

void ParamVector::set_manifest(Manifest manifest) {
    if (manifest.empty()) {   // unsegmented vector
        manifest_.clear();
        return;
    }
    std::size_t expected_offset = 0;
    for (const auto& seg : manifest) {
        if (seg.offset != expected_offset)
            throw InvalidArgument("manifest segment '" + seg.name + "' is not contiguous");
        expected_offset += seg.size();
    }
    if (expected_offset != data_.size())
        throw DimensionError("manifest size", data_.size(), expected_offset);
    manifest_ = std::move(manifest);
}

const Segment& ParamVector::segment(const std::string& name) const {
    for (const auto& seg : manifest_)
        if (seg.name == name) return seg;
    throw InvalidArgument("no manifest segment named '" + name + "'");
}

std::span<double> ParamVector::segment_values(const std::string& name) {
    const auto& seg = segment(name);
    return std::span<double>(data_).subspan(seg.offset, seg.size());
}

std::span<const double> ParamVector::segment_values(const std::string& name) const {
    const auto& seg = segment(name);
    return std::span<const double>(data_).subspan(seg.offset, seg.size());
}

bool ParamVector::all_finite() const noexcept {
    for (double x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

void require_same_dim(const ParamVector& a, const ParamVector& b, const char* what) {
    if (a.size() != b.size()) throw DimensionError(what, a.size(), b.size());
}

double dot(const ParamVector& a, const ParamVector& b) {
    require_same_dim(a, b, "dot");
    double acc = 0.0;
    // Sum in a fixed order; dot(a, b) == dot(b, a) because each product commutes.
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double sq_norm(const ParamVector& v) noexcept {
    double acc = 0.0;
    for (double x : v.raw()) acc += x * x;
    return acc;
}

double norm2(const ParamVector& v) noexcept { return std::sqrt(sq_norm(v)); }

ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
    require_same_dim(x, y, "axpy");
    ParamVector out = y;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * x[i];
    return out;
}

ParamVector scaled(double alpha, const ParamVector& x) {
    ParamVector out = x;
    for (auto& v : out.values()) v *= alpha;
    return out;
}

ParamVector operator+(const ParamVector& a, const ParamVector& b) {
    require_same_dim(a, b, "operator+");
    ParamVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

ParamVector operator-(const ParamVector& a, const ParamVector& b) {
    require_same_dim(a, b, "operator-");
    ParamVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream) noexcept
    : seed_(seed), stream_(stream) {
    // Mix the stream id through its own splitmix round so (seed, stream) and
    // (seed + 1, stream - 1) do not collide.
    std::uint64_t stream_state = stream ^ 0xD1B54A32D192ED03ULL;
    std::uint64_t state = seed ^ splitmix64(stream_state);
    for (auto& word : s_) word = splitmix64(state);
}

std::uint64_t SeededRng::next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double SeededRng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_index(std::uint64_t n) noexcept {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double SeededRng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

double SeededRng::rademacher() noexcept { return (next_u64() >> 63) ? 1.0 : -1.0; }

ParamVector gaussian_fill(SeededRng& rng, std::size_t d, double mean, double stddev) {
    if (!(stddev >= 0.0)) throw InvalidArgument("gaussian_fill: stddev must be >= 0");
    ParamVector out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = mean + stddev * rng.normal();
    return out;
}

ParamVector rademacher_fill(SeededRng& rng, std::size_t d) {
    ParamVector out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = rng.rademacher();
    return out;
}

}  // namespace cflat
