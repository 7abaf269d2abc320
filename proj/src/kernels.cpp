#include "hfl/kernels.hpp"

#include <string>

#include "hfl/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hfl::kernels {

namespace {

constexpr std::size_t kParallelWork = 1u << 16;  // multiply-adds

void check_inner(std::size_t lhs, std::size_t rhs, const char* op) {
    if (lhs != rhs)
        throw ShapeError(std::string(op) + ": inner dimensions " + std::to_string(lhs) +
                         " and " + std::to_string(rhs) + " differ");
}

// Row kernels shared by both variants so the arithmetic is literally the same
// code path.
inline void row_ab(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    double* out = c.data() + i * c.cols();
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = a(i, k);
        const double* brow = b.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
}

inline void row_atb(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    double* out = c.data() + i * c.cols();
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double aki = a(k, i);
        const double* brow = b.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += aki * brow[j];
    }
}

inline void row_abt(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const double* arow = a.data() + i * a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
        const double* brow = b.data() + j * b.cols();
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
        c(i, j) = acc;
    }
}

}  // namespace

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) row_ab(a, b, c, i);
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_inner(a.rows(), b.rows(), "matmul_tn");
    Matrix c(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) row_atb(a, b, c, i);
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.cols(), "matmul_nt");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) row_abt(a, b, c, i);
    return c;
}

}  // namespace serial

namespace parallel {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    const auto rows = static_cast<long long>(a.rows());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) row_ab(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_inner(a.rows(), b.rows(), "matmul_tn");
    Matrix c(a.cols(), b.cols());
    const auto rows = static_cast<long long>(a.cols());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) row_atb(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.cols(), "matmul_nt");
    Matrix c(a.rows(), b.rows());
    const auto rows = static_cast<long long>(a.rows());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) row_abt(a, b, c, static_cast<std::size_t>(i));
    return c;
}

}  // namespace parallel

Matrix matmul(const Matrix& a, const Matrix& b) {
    return a.rows() * a.cols() * b.cols() >= kParallelWork ? parallel::matmul(a, b)
                                                           : serial::matmul(a, b);
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    return a.rows() * a.cols() * b.cols() >= kParallelWork ? parallel::matmul_tn(a, b)
                                                           : serial::matmul_tn(a, b);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    return a.rows() * a.cols() * b.rows() >= kParallelWork ? parallel::matmul_nt(a, b)
                                                           : serial::matmul_nt(a, b);
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols()) throw ShapeError("bias shape mismatch");
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias(0, c);
    }
}

Matrix column_sums(const Matrix& m) {
    Matrix out(1, m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += m(r, c);
    return out;
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace hfl::kernels
