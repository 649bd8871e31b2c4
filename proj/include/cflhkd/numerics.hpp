#pragma once

// Dense vector arithmetic, histogram divergences, and the seeded RNG used
// everywhere else. Everything is 64-bit and accumulates left to right so
// repeated runs are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cflhkd {

struct dimension_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct degenerate_vector_error : std::domain_error {
    using std::domain_error::domain_error;
};

struct nonfinite_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat vector of 64-bit reals. Length is fixed at construction; there is no
// resize on purpose.
class Vec64 {
public:
    Vec64() = default;
    explicit Vec64(std::size_t n) : v_(n, 0.0) {}
    explicit Vec64(std::vector<double> values) : v_(std::move(values)) {
        ensure_finite("Vec64(values)");
    }

    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }
    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::span<const double> span() const { return {v_.data(), v_.size()}; }
    std::span<double> span() { return {v_.data(), v_.size()}; }
    auto begin() { return v_.begin(); }
    auto end() { return v_.end(); }
    auto begin() const { return v_.begin(); }
    auto end() const { return v_.end(); }
    const std::vector<double>& values() const { return v_; }

    bool operator==(const Vec64& o) const { return v_ == o.v_; }

    Vec64& operator+=(const Vec64& o) {
        check_same_size(o, "operator+=");
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
        return *this;
    }
    Vec64& operator-=(const Vec64& o) {
        check_same_size(o, "operator-=");
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
        return *this;
    }
    Vec64& operator*=(double c) {
        for (double& x : v_) x *= c;
        return *this;
    }

    void ensure_finite(const char* context) const {
        for (double x : v_)
            if (!std::isfinite(x))
                throw nonfinite_error(std::string(context) + ": non-finite entry");
    }

private:
    void check_same_size(const Vec64& o, const char* context) const {
        if (v_.size() != o.v_.size())
            throw dimension_error(std::string(context) + ": length mismatch");
    }

    std::vector<double> v_;
};

inline double dot(const Vec64& a, const Vec64& b) {
    if (a.size() != b.size()) throw dimension_error("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double l2_norm(const Vec64& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * a[i];
    return std::sqrt(acc);
}

inline double l2_distance(const Vec64& a, const Vec64& b) {
    if (a.size() != b.size()) throw dimension_error("l2_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    const double r = std::sqrt(acc);
    if (!std::isfinite(r)) throw nonfinite_error("l2_distance: non-finite result");
    return r;
}

inline double squared_l2_distance(const Vec64& a, const Vec64& b) {
    if (a.size() != b.size()) throw dimension_error("squared_l2_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double cosine_similarity(const Vec64& a, const Vec64& b) {
    if (a.size() != b.size()) throw dimension_error("cosine_similarity: length mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0)
        throw degenerate_vector_error("cosine_similarity: zero-norm input");
    double c = dot(a, b) / (na * nb);
    // rounding can push |c| a hair past 1
    return std::clamp(c, -1.0, 1.0);
}

// Weighted sum of equally sized vectors, accumulated in input order.
inline Vec64 weighted_mean(std::span<const Vec64* const> vs, std::span<const double> weights) {
    if (vs.empty()) throw dimension_error("weighted_mean: empty input");
    if (vs.size() != weights.size())
        throw dimension_error("weighted_mean: weight count mismatch");
    Vec64 out(vs[0]->size());
    for (std::size_t k = 0; k < vs.size(); ++k) {
        if (vs[k]->size() != out.size())
            throw dimension_error("weighted_mean: length mismatch");
        const double w = weights[k];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * (*vs[k])[i];
    }
    out.ensure_finite("weighted_mean");
    return out;
}

// ---------------------------------------------------------------------------
// Histograms and divergences

class Histogram {
public:
    Histogram() : bins_(1, 0) {}
    explicit Histogram(std::size_t num_classes) : bins_(num_classes, 0) {
        if (num_classes == 0) throw dimension_error("Histogram: num_classes must be >= 1");
    }
    explicit Histogram(std::vector<std::int64_t> bins) : bins_(std::move(bins)) {
        if (bins_.empty()) throw dimension_error("Histogram: num_classes must be >= 1");
        for (auto c : bins_)
            if (c < 0) throw std::invalid_argument("Histogram: negative count");
    }

    std::size_t num_classes() const { return bins_.size(); }
    std::int64_t count(std::size_t cls) const { return bins_.at(cls); }
    const std::vector<std::int64_t>& bins() const { return bins_; }

    void add(std::size_t cls, std::int64_t n = 1) {
        if (cls >= bins_.size()) throw std::out_of_range("Histogram::add: class out of range");
        if (n < 0) throw std::invalid_argument("Histogram::add: negative count");
        bins_[cls] += n;
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : bins_) t += c;
        return t;
    }

    bool operator==(const Histogram& o) const { return bins_ == o.bins_; }

private:
    std::vector<std::int64_t> bins_;
};

inline constexpr double kHistogramSmoothingEps = 1e-10;

// Add eps to every bin, then normalize. Keeps KL finite on disjoint supports.
inline std::vector<double> smoothed_distribution(const Histogram& h,
                                                 double eps = kHistogramSmoothingEps) {
    const std::size_t c = h.num_classes();
    const double denom = static_cast<double>(h.total()) + eps * static_cast<double>(c);
    std::vector<double> p(c);
    for (std::size_t i = 0; i < c; ++i)
        p[i] = (static_cast<double>(h.count(i)) + eps) / denom;
    return p;
}

// KL divergence of the smoothed normalized distributions, log base 2.
inline double kl_divergence(const Histogram& p, const Histogram& q) {
    if (p.num_classes() != q.num_classes())
        throw dimension_error("kl_divergence: class count mismatch");
    if (p.total() <= 0 || q.total() <= 0)
        throw std::domain_error("kl_divergence: empty histogram");
    const auto dp = smoothed_distribution(p);
    const auto dq = smoothed_distribution(q);
    double acc = 0.0;
    for (std::size_t i = 0; i < dp.size(); ++i) acc += dp[i] * std::log2(dp[i] / dq[i]);
    return acc;
}

// Jensen-Shannon divergence, base 2, range [0, 1].
inline double jsd(const Histogram& p, const Histogram& q) {
    if (p.num_classes() != q.num_classes())
        throw dimension_error("jsd: class count mismatch");
    if (p.total() <= 0 || q.total() <= 0)
        throw std::domain_error("jsd: empty histogram");
    const auto dp = smoothed_distribution(p);
    const auto dq = smoothed_distribution(q);
    double acc_p = 0.0;
    double acc_q = 0.0;
    for (std::size_t i = 0; i < dp.size(); ++i) {
        const double m = 0.5 * (dp[i] + dq[i]);
        acc_p += dp[i] * std::log2(dp[i] / m);
        acc_q += dq[i] * std::log2(dq[i] / m);
    }
    return 0.5 * acc_p + 0.5 * acc_q;
}

// ---------------------------------------------------------------------------
// Seeded RNG
//
// xoshiro256** (Blackman & Vigna) seeded through SplitMix64. Identical seed
// and call sequence give identical draws on every platform. A generator is
// single-owner; concurrent paths derive keyed child streams instead of
// sharing one.

namespace detail {

inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : s_) s = detail::splitmix64_next(x);
    }

    std::uint64_t seed() const { return seed_; }

    // Deterministic child stream keyed by up to three ids. Derivation only
    // reads the parent's seed, never its draw position.
    SeededRng derive(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        std::uint64_t h = detail::mix64(seed_ + 0xA0761D6478BD642Full);
        h = detail::mix64(h ^ (a + 0xE7037ED1A0B428DBull));
        h = detail::mix64(h ^ (b + 0x8EBC6AF09C88C6E3ull));
        h = detail::mix64(h ^ (c + 0x589965CC75374CC3ull));
        return SeededRng(h);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // [0, 1), 53-bit resolution
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Unbiased integer in [0, bound)
    std::uint64_t uniform_below(std::uint64_t bound) {
        if (bound == 0) throw std::invalid_argument("uniform_below: bound must be > 0");
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal() {
        const double u1 = 1.0 - uniform01();  // (0, 1]
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Marsaglia-Tsang gamma(alpha, 1)
    double gamma(double alpha) {
        if (!(alpha > 0.0)) throw std::invalid_argument("gamma: alpha must be > 0");
        if (alpha < 1.0) {
            const double u = 1.0 - uniform01();
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            const double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = uniform01();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    std::vector<double> dirichlet(double alpha, std::size_t k) {
        std::vector<double> draws(k);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            draws[i] = gamma(alpha);
            sum += draws[i];
        }
        if (!(sum > 0.0) || !std::isfinite(sum)) {
            std::fill(draws.begin(), draws.end(), 1.0 / static_cast<double>(k));
            return draws;
        }
        for (double& d : draws) d /= sum;
        return draws;
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(xs[i - 1], xs[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t s_[4] = {};
};

}  // namespace cflhkd
