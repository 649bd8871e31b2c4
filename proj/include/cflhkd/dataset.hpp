#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace cflhkd {

// Row-major feature matrix plus integer class labels.
struct LabeledDataset {
    std::size_t input_dim = 0;
    std::vector<double> features;
    std::vector<std::int32_t> labels;

    LabeledDataset() = default;
    explicit LabeledDataset(std::size_t dim) : input_dim(dim) {}

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    std::span<const double> row(std::size_t i) const {
        return {features.data() + i * input_dim, input_dim};
    }
    std::span<double> row(std::size_t i) {
        return {features.data() + i * input_dim, input_dim};
    }

    void add_row(std::span<const double> x, std::int32_t label) {
        if (x.size() != input_dim)
            throw std::invalid_argument("LabeledDataset::add_row: feature length mismatch");
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
    }

    void reserve(std::size_t rows) {
        features.reserve(rows * input_dim);
        labels.reserve(rows);
    }

    void append(const LabeledDataset& other) {
        if (other.input_dim != input_dim)
            throw std::invalid_argument("LabeledDataset::append: input_dim mismatch");
        features.insert(features.end(), other.features.begin(), other.features.end());
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    }

    bool operator==(const LabeledDataset& o) const {
        return input_dim == o.input_dim && features == o.features && labels == o.labels;
    }
};

}  // namespace cflhkd
