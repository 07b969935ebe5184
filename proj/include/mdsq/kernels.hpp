#pragma once
// Dense double-precision inner loops used by the tensor ops and the attention
// kernel. Each entry point has a scalar reference implementation and, on x86-64,
// an AVX2+FMA variant; the active set is chosen once at first use.

#include <cstddef>
#include <string_view>

namespace mdsq::kernels {

struct KernelSet {
    std::string_view name;

    // returns sum_i a[i] * b[i]
    double (*dot)(const double* a, const double* b, std::size_t n);

    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

    // C[m,n] += A[m,k] * B[k,n], all row-major with leading dimensions
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k,
                    const double* a, std::size_t lda,
                    const double* b, std::size_t ldb,
                    double* c, std::size_t ldc);
};

const KernelSet& scalar_kernels();

// nullptr when the build has no AVX2 translation unit or the CPU lacks AVX2/FMA.
const KernelSet* avx2_kernels();

// Selected on first call: AVX2 when available, unless MDSQ_KERNELS=scalar.
const KernelSet& active();

// Pins the active set; intended for tests and benchmarks.
void set_active(const KernelSet& set);

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc)
{
    active().gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}

namespace detail {
const KernelSet* avx2_kernels_if_compiled();
}

} // namespace mdsq::kernels
