// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; nothing here may run unless avx2::supported() is true,
// which the dispatcher checks once at startup.

#include "vtbr/kernels.hpp"

#include <cmath>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define VTBR_HAVE_AVX2_BUILD 1
#else
#define VTBR_HAVE_AVX2_BUILD 0
#endif

namespace vtbr::kernels::avx2 {

#if VTBR_HAVE_AVX2_BUILD

namespace {

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x55));
    return _mm_cvtss_f32(lo);
}

inline float hmax8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_max_ps(lo, hi);
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 0x55));
    return _mm_cvtss_f32(lo);
}

}  // namespace

bool supported() {
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

float dot(const float* x, const float* y, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    }
    float acc = hsum8(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy(float a, const float* x, float* y, std::size_t n) {
    const __m256 av = _mm256_set1_ps(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 yv = _mm256_loadu_ps(y + i);
        yv = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), yv);
        _mm256_storeu_ps(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void scale(float* x, float a, std::size_t n) {
    const __m256 av = _mm256_set1_ps(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), av));
    }
    for (; i < n; ++i) x[i] *= a;
}

float sum(const float* x, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
    float total = hsum8(acc);
    for (; i < n; ++i) total += x[i];
    return total;
}

float sq_l2(const float* x, const float* y, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i));
        acc = _mm256_fmadd_ps(d, d, acc);
    }
    float total = hsum8(acc);
    for (; i < n; ++i) {
        const float d = x[i] - y[i];
        total += d * d;
    }
    return total;
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        if (!accumulate) {
            std::size_t j = 0;
            const __m256 z = _mm256_setzero_ps();
            for (; j + 8 <= n; j += 8) _mm256_storeu_ps(crow + j, z);
            for (; j < n; ++j) crow[j] = 0.0f;
        }
        for (std::size_t p = 0; p < k; ++p) {
            const __m256 av = _mm256_set1_ps(a[i * k + p]);
            const float* brow = b + p * n;
            std::size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            const float as = a[i * k + p];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const float v = dot(arow, b + j * k, k);
            c[i * n + j] = accumulate ? c[i * n + j] + v : v;
        }
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    if (!accumulate) {
        std::size_t i = 0;
        const __m256 z = _mm256_setzero_ps();
        for (; i + 8 <= m * n; i += 8) _mm256_storeu_ps(c + i, z);
        for (; i < m * n; ++i) c[i] = 0.0f;
    }
    for (std::size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        const float* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const __m256 av = _mm256_set1_ps(arow[i]);
            float* crow = c + i * n;
            std::size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            for (; j < n; ++j) crow[j] += arow[i] * brow[j];
        }
    }
}

void softmax_rows(float* x, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        float* row = x + r * cols;
        __m256 mv = _mm256_set1_ps(row[0]);
        std::size_t j = 0;
        for (; j + 8 <= cols; j += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(row + j));
        float mx = hmax8(mv);
        for (; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
        // exp + running sum stay scalar: bitwise identical to the reference.
        float total = 0.0f;
        for (j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        const float inv = 1.0f / total;
        const __m256 iv = _mm256_set1_ps(inv);
        for (j = 0; j + 8 <= cols; j += 8) {
            _mm256_storeu_ps(row + j, _mm256_mul_ps(_mm256_loadu_ps(row + j), iv));
        }
        for (; j < cols; ++j) row[j] *= inv;
    }
}

void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd) {
    const __m256 mv = _mm256_set1_ps(momentum);
    const __m256 wv = _mm256_set1_ps(wd);
    const __m256 lv = _mm256_set1_ps(-lr);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 pv = _mm256_loadu_ps(p + i);
        const __m256 gv = _mm256_fmadd_ps(wv, pv, _mm256_loadu_ps(g + i));
        const __m256 vv = _mm256_fmadd_ps(mv, _mm256_loadu_ps(v + i), gv);
        _mm256_storeu_ps(v + i, vv);
        _mm256_storeu_ps(p + i, _mm256_fmadd_ps(lv, vv, pv));
    }
    for (; i < n; ++i) {
        v[i] = momentum * v[i] + (g[i] + wd * p[i]);
        p[i] -= lr * v[i];
    }
}

void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha) {
    if (alpha == 1.0f) {
        for (std::size_t i = 0; i < n; ++i) slow[i] = fast[i];
        return;
    }
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 sv = _mm256_loadu_ps(slow + i);
        const __m256 fv = _mm256_loadu_ps(fast + i);
        const __m256 nv = _mm256_fmadd_ps(av, _mm256_sub_ps(fv, sv), sv);
        _mm256_storeu_ps(slow + i, nv);
        _mm256_storeu_ps(fast + i, nv);
    }
    for (; i < n; ++i) {
        slow[i] += alpha * (fast[i] - slow[i]);
        fast[i] = slow[i];
    }
}

void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2) {
    const __m256 b1 = _mm256_set1_ps(beta1);
    const __m256 b2 = _mm256_set1_ps(beta2);
    const __m256 ob1 = _mm256_set1_ps(1.0f - beta1);
    const __m256 ob2 = _mm256_set1_ps(1.0f - beta2);
    const __m256 wv = _mm256_set1_ps(wd);
    const __m256 ev = _mm256_set1_ps(eps);
    const __m256 lv = _mm256_set1_ps(lr);
    const __m256 c1v = _mm256_set1_ps(c1);
    const __m256 c2v = _mm256_set1_ps(c2);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 pv = _mm256_loadu_ps(p + i);
        const __m256 gv = _mm256_fmadd_ps(wv, pv, _mm256_loadu_ps(g + i));
        const __m256 mv = _mm256_fmadd_ps(ob1, gv, _mm256_mul_ps(b1, _mm256_loadu_ps(m + i)));
        const __m256 vv = _mm256_fmadd_ps(ob2, _mm256_mul_ps(gv, gv),
                                          _mm256_mul_ps(b2, _mm256_loadu_ps(v + i)));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        const __m256 mhat = _mm256_mul_ps(mv, c1v);
        const __m256 vhat = _mm256_mul_ps(vv, c2v);
        const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), ev);
        const __m256 step = _mm256_div_ps(_mm256_mul_ps(lv, mhat), denom);
        _mm256_storeu_ps(p + i, _mm256_sub_ps(pv, step));
    }
    for (; i < n; ++i) {
        const float gi = g[i] + wd * p[i];
        m[i] = beta1 * m[i] + (1.0f - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0f - beta2) * gi * gi;
        p[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
}

#else  // !VTBR_HAVE_AVX2_BUILD — builds without AVX2 forward to scalar.

bool supported() { return false; }

float dot(const float* x, const float* y, std::size_t n) { return scalar::dot(x, y, n); }
void axpy(float a, const float* x, float* y, std::size_t n) { scalar::axpy(a, x, y, n); }
void scale(float* x, float a, std::size_t n) { scalar::scale(x, a, n); }
float sum(const float* x, std::size_t n) { return scalar::sum(x, n); }
float sq_l2(const float* x, const float* y, std::size_t n) { return scalar::sq_l2(x, y, n); }
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    scalar::gemm_nn(m, n, k, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    scalar::gemm_nt(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    scalar::gemm_tn(m, n, k, a, b, c, accumulate);
}
void softmax_rows(float* x, std::size_t rows, std::size_t cols) {
    scalar::softmax_rows(x, rows, cols);
}
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd) {
    scalar::sgd_momentum(p, v, g, n, lr, momentum, wd);
}
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha) {
    scalar::lookahead_sync(slow, fast, n, alpha);
}
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2) {
    scalar::adam_update(p, m, v, g, n, lr, beta1, beta2, eps, wd, c1, c2);
}

#endif

}  // namespace vtbr::kernels::avx2
