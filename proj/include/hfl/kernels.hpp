#pragma once

#include "hfl/matrix.hpp"

// Dense products used by the network and the aggregators.
//
// Two implementations of each product exist. `serial` is the reference and
// is what the tests compare against; `parallel` splits output rows across
// OpenMP threads. Both accumulate every output element over the inner index
// in ascending order, so they agree bit-for-bit regardless of thread count.
namespace hfl::kernels {

namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
}  // namespace serial

namespace parallel {
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
}  // namespace parallel

// Picks the parallel kernel once the output is large enough to amortize the
// fork, otherwise the serial one. Results do not depend on the choice.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Row-wise broadcast add of a 1 x n bias.
void add_row_bias(Matrix& m, const Matrix& bias);
// Column sums as a 1 x n matrix.
Matrix column_sums(const Matrix& m);

int max_threads();
void set_threads(int n);

}  // namespace hfl::kernels
