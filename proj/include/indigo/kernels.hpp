#pragma once

#include <cmath>
#include <cstddef>

// Hot data-parallel loops used by the tape ops. Each function exists twice:
// the primary version carries OpenMP pragmas, kernels::ref is the plain
// serial implementation kept for testing (test_kernels asserts bitwise
// equality) and for the bench_kernels comparison target.
//
// Parallel loops only split output rows; the per-element summation order is
// identical in both versions, so results are bit-exact for any thread count.

namespace indigo::kernels {

// Parallelizing tiny matrices costs more than it saves; only fork when a
// row's worth of work is nontrivial and there are enough rows.
constexpr int kParRows = 32;
constexpr long kParWork = 1 << 15;

namespace ref {

// c [MxN] = a [MxK] * b [KxN]   (+= when accumulate)
template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = T(0);
        const T* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c [MxN] = a [KxM]^T * b [KxN]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = T(0);
        for (int p = 0; p < k; ++p) {
            const T av = a[static_cast<std::size_t>(p) * m + i];
            const T* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c [MxN] = a [MxK] * b [NxK]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<std::size_t>(i) * k;
        T* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* bj = b + static_cast<std::size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// Row-wise softmax with max subtraction, in place.
template <typename T>
void softmax_rows(T* x, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        T* xi = x + static_cast<std::size_t>(i) * cols;
        T mx = xi[0];
        for (int j = 1; j < cols; ++j) mx = xi[j] > mx ? xi[j] : mx;
        T sum = T(0);
        for (int j = 0; j < cols; ++j) {
            xi[j] = std::exp(xi[j] - mx);
            sum += xi[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < cols; ++j) xi[j] *= inv;
    }
}

// Row-wise layer norm: out = (x - mean) / sqrt(var + eps) * scale + shift.
// xhat / inv_sigma are stashed for the backward pass (may be null).
template <typename T>
void layernorm_rows(const T* x, const T* scale, const T* shift, T* out, T* xhat, T* inv_sigma,
                    int rows, int cols, T eps) {
    for (int i = 0; i < rows; ++i) {
        const T* xi = x + static_cast<std::size_t>(i) * cols;
        T* oi = out + static_cast<std::size_t>(i) * cols;
        T mean = T(0);
        for (int j = 0; j < cols; ++j) mean += xi[j];
        mean /= T(cols);
        T var = T(0);
        for (int j = 0; j < cols; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
        }
        var /= T(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        if (inv_sigma) inv_sigma[i] = inv;
        for (int j = 0; j < cols; ++j) {
            const T h = (xi[j] - mean) * inv;
            if (xhat) xhat[static_cast<std::size_t>(i) * cols + j] = h;
            oi[j] = h * scale[j] + shift[j];
        }
    }
}

// Exact (erf-based) GELU.
template <typename T>
void gelu(const T* x, T* out, long n) {
    for (long i = 0; i < n; ++i)
        out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
}

template <typename T>
void gelu_backward(const T* x, const T* g, T* dx, long n, bool accumulate = false) {
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    for (long i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        const T d = g[i] * (cdf + x[i] * pdf);
        dx[i] = accumulate ? dx[i] + d : d;
    }
}

} // namespace ref

template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m >= kParRows && static_cast<long>(m) * k * n >= kParWork)
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = T(0);
        const T* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m >= kParRows && static_cast<long>(m) * k * n >= kParWork)
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = T(0);
        for (int p = 0; p < k; ++p) {
            const T av = a[static_cast<std::size_t>(p) * m + i];
            const T* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m >= kParRows && static_cast<long>(m) * k * n >= kParWork)
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<std::size_t>(i) * k;
        T* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* bj = b + static_cast<std::size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

template <typename T>
void softmax_rows(T* x, int rows, int cols) {
#pragma omp parallel for schedule(static) if (rows >= kParRows && static_cast<long>(rows) * cols >= kParWork)
    for (int i = 0; i < rows; ++i)
        ref::softmax_rows(x + static_cast<std::size_t>(i) * cols, 1, cols);
}

template <typename T>
void layernorm_rows(const T* x, const T* scale, const T* shift, T* out, T* xhat, T* inv_sigma,
                    int rows, int cols, T eps) {
#pragma omp parallel for schedule(static) if (rows >= kParRows && static_cast<long>(rows) * cols >= kParWork)
    for (int i = 0; i < rows; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * cols;
        ref::layernorm_rows(x + off, scale, shift, out + off, xhat ? xhat + off : nullptr,
                            inv_sigma ? inv_sigma + i : nullptr, 1, cols, eps);
    }
}

template <typename T>
void gelu(const T* x, T* out, long n) {
#pragma omp parallel for schedule(static) if (n >= kParWork)
    for (long i = 0; i < n; ++i)
        out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
}

template <typename T>
void gelu_backward(const T* x, const T* g, T* dx, long n, bool accumulate = false) {
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
#pragma omp parallel for schedule(static) if (n >= kParWork)
    for (long i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        const T d = g[i] * (cdf + x[i] * pdf);
        dx[i] = accumulate ? dx[i] + d : d;
    }
}

} // namespace indigo::kernels
