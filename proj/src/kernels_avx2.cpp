#include "mdsq/kernels.hpp"

#include <immintrin.h>

namespace mdsq::kernels {
namespace {

inline double hsum(__m256d v)
{
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n)
{
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i)
        s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n)
{
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i)
        y[i] += alpha * x[i];
}

// 4 rows x 8 columns register tile; edges fall back to axpy rows.
void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc)
{
    std::size_t i = 0;
    const std::size_t n8 = n - n % 8;
    for (; i + 4 <= m; i += 4) {
        for (std::size_t j = 0; j < n8; j += 8) {
            __m256d c00 = _mm256_loadu_pd(c + (i + 0) * ldc + j);
            __m256d c01 = _mm256_loadu_pd(c + (i + 0) * ldc + j + 4);
            __m256d c10 = _mm256_loadu_pd(c + (i + 1) * ldc + j);
            __m256d c11 = _mm256_loadu_pd(c + (i + 1) * ldc + j + 4);
            __m256d c20 = _mm256_loadu_pd(c + (i + 2) * ldc + j);
            __m256d c21 = _mm256_loadu_pd(c + (i + 2) * ldc + j + 4);
            __m256d c30 = _mm256_loadu_pd(c + (i + 3) * ldc + j);
            __m256d c31 = _mm256_loadu_pd(c + (i + 3) * ldc + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
                const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
                __m256d av = _mm256_broadcast_sd(a + (i + 0) * lda + p);
                c00 = _mm256_fmadd_pd(av, b0, c00);
                c01 = _mm256_fmadd_pd(av, b1, c01);
                av = _mm256_broadcast_sd(a + (i + 1) * lda + p);
                c10 = _mm256_fmadd_pd(av, b0, c10);
                c11 = _mm256_fmadd_pd(av, b1, c11);
                av = _mm256_broadcast_sd(a + (i + 2) * lda + p);
                c20 = _mm256_fmadd_pd(av, b0, c20);
                c21 = _mm256_fmadd_pd(av, b1, c21);
                av = _mm256_broadcast_sd(a + (i + 3) * lda + p);
                c30 = _mm256_fmadd_pd(av, b0, c30);
                c31 = _mm256_fmadd_pd(av, b1, c31);
            }
            _mm256_storeu_pd(c + (i + 0) * ldc + j, c00);
            _mm256_storeu_pd(c + (i + 0) * ldc + j + 4, c01);
            _mm256_storeu_pd(c + (i + 1) * ldc + j, c10);
            _mm256_storeu_pd(c + (i + 1) * ldc + j + 4, c11);
            _mm256_storeu_pd(c + (i + 2) * ldc + j, c20);
            _mm256_storeu_pd(c + (i + 2) * ldc + j + 4, c21);
            _mm256_storeu_pd(c + (i + 3) * ldc + j, c30);
            _mm256_storeu_pd(c + (i + 3) * ldc + j + 4, c31);
        }
        if (n8 < n) {
            for (std::size_t r = i; r < i + 4; ++r)
                for (std::size_t p = 0; p < k; ++p)
                    axpy_avx2(a[r * lda + p], b + p * ldb + n8, c + r * ldc + n8, n - n8);
        }
    }
    for (; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p)
            axpy_avx2(a[i * lda + p], b + p * ldb, c + i * ldc, n);
}

} // namespace

namespace detail {
const KernelSet* avx2_kernels_if_compiled()
{
    static const KernelSet set{"avx2", &dot_avx2, &axpy_avx2, &gemm_nn_avx2};
    return &set;
}
} // namespace detail

} // namespace mdsq::kernels
