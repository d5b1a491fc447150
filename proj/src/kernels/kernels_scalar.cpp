// Scalar reference kernels. These define the semantics the AVX2 variants
// are tested against; keep them simple and obviously correct.

#include "vtbr/kernels.hpp"

#include <cmath>

namespace vtbr::kernels {

namespace {

template <typename T>
T dot_ref(const T* x, const T* y, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <typename T>
void axpy_ref(T a, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale_ref(T* x, T a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

template <typename T>
T sum_ref(const T* x, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <typename T>
T sq_l2_ref(const T* x, const T* y, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = x[i] - y[i];
        acc += d * d;
    }
    return acc;
}

template <typename T>
void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k,
                 const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        }
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k,
                 const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T v = dot_ref(arow, b + j * k, k);
            c[i * n + j] = accumulate ? c[i * n + j] + v : v;
        }
    }
}

template <typename T>
void gemm_tn_ref(std::size_t m, std::size_t n, std::size_t k,
                 const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) {
        for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
    }
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void softmax_rows_ref(T* x, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x + r * cols;
        T mx = row[0];
        for (std::size_t j = 1; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
        T total = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
    }
}

template <typename T>
void sgd_momentum_ref(T* p, T* v, const T* g, std::size_t n,
                      T lr, T momentum, T wd) {
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = momentum * v[i] + (g[i] + wd * p[i]);
        p[i] -= lr * v[i];
    }
}

template <typename T>
void lookahead_sync_ref(T* slow, T* fast, std::size_t n, T alpha) {
    if (alpha == T(1)) {  // exact: the slow weights shadow the fast ones
        for (std::size_t i = 0; i < n; ++i) slow[i] = fast[i];
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        slow[i] += alpha * (fast[i] - slow[i]);
        fast[i] = slow[i];
    }
}

template <typename T>
void adam_update_ref(T* p, T* m, T* v, const T* g, std::size_t n,
                     T lr, T beta1, T beta2, T eps, T wd, T c1, T c2) {
    for (std::size_t i = 0; i < n; ++i) {
        const T gi = g[i] + wd * p[i];
        m[i] = beta1 * m[i] + (T(1) - beta1) * gi;
        v[i] = beta2 * v[i] + (T(1) - beta2) * gi * gi;
        const T mhat = m[i] * c1;
        const T vhat = v[i] * c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

namespace scalar {

float dot(const float* x, const float* y, std::size_t n) { return dot_ref(x, y, n); }
void axpy(float a, const float* x, float* y, std::size_t n) { axpy_ref(a, x, y, n); }
void scale(float* x, float a, std::size_t n) { scale_ref(x, a, n); }
float sum(const float* x, std::size_t n) { return sum_ref(x, n); }
float sq_l2(const float* x, const float* y, std::size_t n) { return sq_l2_ref(x, y, n); }
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    gemm_nn_ref(m, n, k, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    gemm_nt_ref(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    gemm_tn_ref(m, n, k, a, b, c, accumulate);
}
void softmax_rows(float* x, std::size_t rows, std::size_t cols) {
    softmax_rows_ref(x, rows, cols);
}
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd) {
    sgd_momentum_ref(p, v, g, n, lr, momentum, wd);
}
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha) {
    lookahead_sync_ref(slow, fast, n, alpha);
}
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2) {
    adam_update_ref(p, m, v, g, n, lr, beta1, beta2, eps, wd, c1, c2);
}

}  // namespace scalar

// double entry points: scalar reference, no dispatch.
double dot(const double* x, const double* y, std::size_t n) { return dot_ref(x, y, n); }
void axpy(double a, const double* x, double* y, std::size_t n) { axpy_ref(a, x, y, n); }
void scale(double* x, double a, std::size_t n) { scale_ref(x, a, n); }
double sum(const double* x, std::size_t n) { return sum_ref(x, n); }
double sq_l2(const double* x, const double* y, std::size_t n) { return sq_l2_ref(x, y, n); }
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
    gemm_nn_ref(m, n, k, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
    gemm_nt_ref(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
    gemm_tn_ref(m, n, k, a, b, c, accumulate);
}
void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
    softmax_rows_ref(x, rows, cols);
}
void sgd_momentum(double* p, double* v, const double* g, std::size_t n,
                  double lr, double momentum, double wd) {
    sgd_momentum_ref(p, v, g, n, lr, momentum, wd);
}
void lookahead_sync(double* slow, double* fast, std::size_t n, double alpha) {
    lookahead_sync_ref(slow, fast, n, alpha);
}
void adam_update(double* p, double* m, double* v, const double* g,
                 std::size_t n, double lr, double beta1, double beta2,
                 double eps, double wd, double c1, double c2) {
    adam_update_ref(p, m, v, g, n, lr, beta1, beta2, eps, wd, c1, c2);
}

}  // namespace vtbr::kernels
