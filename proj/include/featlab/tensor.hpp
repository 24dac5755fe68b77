#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "featlab/errors.hpp"

namespace featlab {

// Row-major float matrix with owning storage. Rows are contiguous, so a
// row can be handed to anything that takes std::span<const float>.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill)
    {
        if (rows < 0 || cols < 0) throw ShapeError("negative matrix dimension");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    float operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    std::span<float> row(int r) { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const float> row(int r) const
    {
        return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
    }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    void append_row(std::span<const float> values)
    {
        if (rows_ == 0 && cols_ == 0) cols_ = static_cast<int>(values.size());
        if (static_cast<int>(values.size()) != cols_) throw ShapeError("append_row: width mismatch");
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    bool operator==(const Matrix&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<float> data_;
};

inline void require_length(std::span<const float> v, std::size_t n, const char* what)
{
    if (v.size() != n) {
        throw ShapeError(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                         std::to_string(v.size()));
    }
}

} // namespace featlab
