#pragma once

// Multinomial logistic regression with an optional tanh hidden layer, its
// cross-entropy loss and gradient, and SGD with momentum. Parameters live in
// one flat Vec64 (layer by layer, weights then biases) so aggregation and
// distance math can treat every model as a plain vector.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "cflhkd/dataset.hpp"
#include "cflhkd/numerics.hpp"

namespace cflhkd {

struct ModelSpec {
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
    std::size_t hidden_dim = 0;  // 0 = plain multinomial logistic regression

    void validate() const {
        if (input_dim < 1) throw std::invalid_argument("ModelSpec: input_dim must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("ModelSpec: num_classes must be >= 2");
    }

    std::size_t param_count() const {
        if (hidden_dim == 0) return num_classes * input_dim + num_classes;
        return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes;
    }

    bool operator==(const ModelSpec&) const = default;
};

struct SgdConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lr_decay = 0.99;  // multiplied in every decay_every rounds
    int decay_every = 20;

    void validate() const {
        if (!(learning_rate > 0)) throw std::invalid_argument("SgdConfig: learning_rate must be > 0");
        if (momentum < 0 || momentum >= 1) throw std::invalid_argument("SgdConfig: momentum must be in [0,1)");
        if (weight_decay < 0) throw std::invalid_argument("SgdConfig: weight_decay must be >= 0");
        if (!(lr_decay > 0) || lr_decay > 1) throw std::invalid_argument("SgdConfig: lr_decay must be in (0,1]");
        if (decay_every < 1) throw std::invalid_argument("SgdConfig: decay_every must be >= 1");
    }

    // Effective learning rate at a 1-based round.
    double lr_at_round(int round) const {
        const int steps = (round - 1) / decay_every;
        return learning_rate * std::pow(lr_decay, steps);
    }
};

struct Model {
    ModelSpec spec;
    Vec64 params;

    static Model zeros(const ModelSpec& spec) {
        spec.validate();
        return Model{spec, Vec64(spec.param_count())};
    }

    // Uniform init in [-0.05, 0.05].
    static Model init(const ModelSpec& spec, SeededRng& rng) {
        spec.validate();
        Vec64 p(spec.param_count());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform(-0.05, 0.05);
        return Model{spec, std::move(p)};
    }

    bool operator==(const Model& o) const { return spec == o.spec && params == o.params; }
};

namespace detail {

// Flat layout offsets. hidden == 0: [W (C x D), b (C)].
// hidden  > 0: [W1 (H x D), b1 (H), W2 (C x H), b2 (C)].
struct Layout {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    explicit Layout(const ModelSpec& s) {
        if (s.hidden_dim == 0) {
            w1 = 0;
            b1 = s.num_classes * s.input_dim;
        } else {
            w1 = 0;
            b1 = s.hidden_dim * s.input_dim;
            w2 = b1 + s.hidden_dim;
            b2 = w2 + s.num_classes * s.hidden_dim;
        }
    }
};

inline void softmax_inplace(std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : logits) v /= sum;
}

inline std::vector<double> class_logits(const Model& m, std::span<const double> x,
                                        std::vector<double>* hidden_out = nullptr) {
    const auto& s = m.spec;
    if (x.size() != s.input_dim) throw dimension_error("forward: feature length mismatch");
    const Layout L(s);
    const Vec64& p = m.params;
    if (s.hidden_dim == 0) {
        std::vector<double> logits(s.num_classes);
        for (std::size_t c = 0; c < s.num_classes; ++c) {
            double acc = p[L.b1 + c];
            const std::size_t off = L.w1 + c * s.input_dim;
            for (std::size_t d = 0; d < s.input_dim; ++d) acc += p[off + d] * x[d];
            logits[c] = acc;
        }
        return logits;
    }
    std::vector<double> h(s.hidden_dim);
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
        double acc = p[L.b1 + j];
        const std::size_t off = L.w1 + j * s.input_dim;
        for (std::size_t d = 0; d < s.input_dim; ++d) acc += p[off + d] * x[d];
        h[j] = std::tanh(acc);
    }
    std::vector<double> logits(s.num_classes);
    for (std::size_t c = 0; c < s.num_classes; ++c) {
        double acc = p[L.b2 + c];
        const std::size_t off = L.w2 + c * s.hidden_dim;
        for (std::size_t j = 0; j < s.hidden_dim; ++j) acc += p[off + j] * h[j];
        logits[c] = acc;
    }
    if (hidden_out) *hidden_out = std::move(h);
    return logits;
}

inline void check_batch(const Model& m, const LabeledDataset& data,
                        std::span<const std::size_t> idx) {
    if (data.input_dim != m.spec.input_dim)
        throw dimension_error("batch: feature length mismatch");
    if (idx.empty()) throw std::invalid_argument("batch: empty batch");
    for (std::size_t i : idx) {
        if (i >= data.size()) throw std::out_of_range("batch: row index out of range");
        const auto y = data.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= m.spec.num_classes)
            throw std::out_of_range("batch: label out of range");
    }
}

inline std::vector<std::size_t> all_rows(const LabeledDataset& data) {
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

}  // namespace detail

// Class probabilities for one input; sums to 1.
inline std::vector<double> forward(const Model& m, std::span<const double> x) {
    auto logits = detail::class_logits(m, x);
    detail::softmax_inplace(logits);
    return logits;
}

inline std::size_t argmax_class(std::span<const double> probs) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
        if (probs[c] > probs[best]) best = c;
    return best;
}

// Mean cross-entropy (natural log) over the batch.
inline double loss(const Model& m, const LabeledDataset& data,
                   std::span<const std::size_t> idx) {
    detail::check_batch(m, data, idx);
    double acc = 0.0;
    for (std::size_t i : idx) {
        const auto probs = forward(m, data.row(i));
        const double p = std::max(probs[static_cast<std::size_t>(data.labels[i])], 1e-300);
        acc += -std::log(p);
    }
    return acc / static_cast<double>(idx.size());
}

inline double loss(const Model& m, const LabeledDataset& data) {
    const auto idx = detail::all_rows(data);
    return loss(m, data, idx);
}

// Gradient of the mean cross-entropy w.r.t. the flat parameter vector.
inline Vec64 grad(const Model& m, const LabeledDataset& data,
                  std::span<const std::size_t> idx) {
    detail::check_batch(m, data, idx);
    const auto& s = m.spec;
    const detail::Layout L(s);
    const Vec64& p = m.params;
    Vec64 g(s.param_count());
    for (std::size_t i : idx) {
        const auto x = data.row(i);
        const auto y = static_cast<std::size_t>(data.labels[i]);
        if (s.hidden_dim == 0) {
            auto probs = detail::class_logits(m, x);
            detail::softmax_inplace(probs);
            for (std::size_t c = 0; c < s.num_classes; ++c) {
                const double dlogit = probs[c] - (c == y ? 1.0 : 0.0);
                const std::size_t off = L.w1 + c * s.input_dim;
                for (std::size_t d = 0; d < s.input_dim; ++d) g[off + d] += dlogit * x[d];
                g[L.b1 + c] += dlogit;
            }
        } else {
            std::vector<double> h;
            auto probs = detail::class_logits(m, x, &h);
            detail::softmax_inplace(probs);
            std::vector<double> dh(s.hidden_dim, 0.0);
            for (std::size_t c = 0; c < s.num_classes; ++c) {
                const double dlogit = probs[c] - (c == y ? 1.0 : 0.0);
                const std::size_t off = L.w2 + c * s.hidden_dim;
                for (std::size_t j = 0; j < s.hidden_dim; ++j) {
                    g[off + j] += dlogit * h[j];
                    dh[j] += dlogit * p[off + j];
                }
                g[L.b2 + c] += dlogit;
            }
            for (std::size_t j = 0; j < s.hidden_dim; ++j) {
                const double dpre = dh[j] * (1.0 - h[j] * h[j]);
                const std::size_t off = L.w1 + j * s.input_dim;
                for (std::size_t d = 0; d < s.input_dim; ++d) g[off + d] += dpre * x[d];
                g[L.b1 + j] += dpre;
            }
        }
    }
    g *= 1.0 / static_cast<double>(idx.size());
    g.ensure_finite("grad");
    return g;
}

inline Vec64 grad(const Model& m, const LabeledDataset& data) {
    const auto idx = detail::all_rows(data);
    return grad(m, data, idx);
}

// velocity <- momentum * velocity - lr * (g + weight_decay * params)
// params   <- params + velocity
inline void sgd_step(Model& m, const Vec64& g, const SgdConfig& cfg, Vec64& velocity) {
    if (g.size() != m.params.size() || velocity.size() != m.params.size())
        throw dimension_error("sgd_step: layout mismatch");
    Vec64& p = m.params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] -
                      cfg.learning_rate * (g[i] + cfg.weight_decay * p[i]);
        p[i] += velocity[i];
    }
    p.ensure_finite("sgd_step");
}

// ---------------------------------------------------------------------------
// Serialization: little-endian header + raw 64-bit reals. Used for
// checkpoints and for communication-size accounting.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("deserialize: truncated input");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos + i]) << (8 * i);
    pos += 4;
    return v;
}
inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw std::runtime_error("deserialize: truncated input");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    pos += 8;
    return v;
}

inline constexpr std::uint32_t kModelMagic = 0x4D4C4643u;  // "CFLM"
inline constexpr std::uint32_t kModelVersion = 1;

}  // namespace detail

inline std::size_t serialized_model_bytes(const ModelSpec& spec) {
    return 4 + 4 + 3 * 4 + 8 + 8 * spec.param_count();
}

inline std::vector<std::uint8_t> serialize_model(const Model& m) {
    std::vector<std::uint8_t> out;
    out.reserve(serialized_model_bytes(m.spec));
    detail::put_u32(out, detail::kModelMagic);
    detail::put_u32(out, detail::kModelVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(m.spec.input_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(m.spec.num_classes));
    detail::put_u32(out, static_cast<std::uint32_t>(m.spec.hidden_dim));
    detail::put_u64(out, m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i)
        detail::put_u64(out, std::bit_cast<std::uint64_t>(m.params[i]));
    return out;
}

inline Model deserialize_model(std::span<const std::uint8_t> in, std::size_t* consumed = nullptr) {
    std::size_t pos = 0;
    if (detail::get_u32(in, pos) != detail::kModelMagic)
        throw std::runtime_error("deserialize_model: bad magic");
    if (detail::get_u32(in, pos) != detail::kModelVersion)
        throw std::runtime_error("deserialize_model: unsupported version");
    ModelSpec spec;
    spec.input_dim = detail::get_u32(in, pos);
    spec.num_classes = detail::get_u32(in, pos);
    spec.hidden_dim = detail::get_u32(in, pos);
    const std::uint64_t count = detail::get_u64(in, pos);
    if (count != spec.param_count())
        throw std::runtime_error("deserialize_model: parameter count mismatch");
    std::vector<double> params(count);
    for (std::uint64_t i = 0; i < count; ++i)
        params[i] = std::bit_cast<double>(detail::get_u64(in, pos));
    if (consumed) *consumed = pos;
    return Model{spec, Vec64(std::move(params))};
}

}  // namespace cflhkd
