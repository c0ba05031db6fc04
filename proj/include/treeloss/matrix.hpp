#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "errors.hpp"

namespace treeloss {

// Dense row-major matrix. Used for distance matrices and for per-pixel fields
// (one row per pixel, one column per class or node).
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_) throw ShapeError("matrix data size does not match shape");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept
    {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    double operator()(std::size_t r, std::size_t c) const noexcept
    {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Per-pixel leaf probabilities (p), logits, and gradients share this layout.
using LeafField = Matrix;
using GradField = Matrix;
using DistanceMatrix = Matrix;

using Label = std::int32_t;

// Leaf ids are 0..C-1 in memory. Unannotated pixels carry kUnlabeled.
inline constexpr Label kUnlabeled = -1;

// Per-pixel optional leaf label for positive-only supervision.
class SparseMask {
public:
    SparseMask() = default;
    explicit SparseMask(std::vector<Label> labels) : labels_(std::move(labels)) {}

    std::size_t size() const noexcept { return labels_.size(); }
    Label operator[](std::size_t i) const noexcept { return labels_[i]; }
    bool annotated(std::size_t i) const noexcept { return labels_[i] != kUnlabeled; }

    std::size_t annotated_count() const noexcept
    {
        std::size_t n = 0;
        for (Label l : labels_) n += (l != kUnlabeled);
        return n;
    }
    bool dense() const noexcept { return annotated_count() == labels_.size(); }

    const std::vector<Label>& labels() const noexcept { return labels_; }

    friend bool operator==(const SparseMask&, const SparseMask&) = default;

private:
    std::vector<Label> labels_;
};

} // namespace treeloss
