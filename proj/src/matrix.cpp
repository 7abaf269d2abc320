#include "hfl/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "hfl/errors.hpp"

namespace hfl {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw ShapeError("matrix data size " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("matrix add: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("matrix subtract: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

bool Matrix::bit_equal(const Matrix& other) const {
    return same_shape(other) &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.values()) acc += v * v;
    return std::sqrt(acc);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double best = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        best = std::max(best, std::abs(a.values()[i] - b.values()[i]));
    return best;
}

Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.rows()) throw ShapeError("slice_rows out of range");
    Matrix out(count, m.cols());
    std::copy_n(m.data() + first * m.cols(), count * m.cols(), out.data());
    return out;
}

Matrix slice_cols(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.cols()) throw ShapeError("slice_cols out of range");
    Matrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        std::copy_n(m.data() + r * m.cols() + first, count, out.data() + r * count);
    return out;
}

Matrix vstack(std::span<const Matrix> blocks) {
    if (blocks.empty()) return {};
    const std::size_t cols = blocks.front().cols();
    std::size_t rows = 0;
    for (const auto& b : blocks) {
        if (b.cols() != cols) throw ShapeError("vstack: column count mismatch");
        rows += b.rows();
    }
    Matrix out(rows, cols);
    double* dst = out.data();
    for (const auto& b : blocks) dst = std::copy_n(b.data(), b.size(), dst);
    return out;
}

Matrix hstack(std::span<const Matrix> blocks) {
    if (blocks.empty()) return {};
    const std::size_t rows = blocks.front().rows();
    std::size_t cols = 0;
    for (const auto& b : blocks) {
        if (b.rows() != rows) throw ShapeError("hstack: row count mismatch");
        cols += b.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const auto& b : blocks) {
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(b.data() + r * b.cols(), b.cols(), out.data() + r * cols + offset);
        offset += b.cols();
    }
    return out;
}

}  // namespace hfl
