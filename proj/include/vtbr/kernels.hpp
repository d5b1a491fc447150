#pragma once

// Arithmetic inner loops shared by the model, the optimizers and the
// evaluator. Every float kernel exists twice: a scalar reference in
// kernels::scalar and an AVX2+FMA variant in kernels::avx2, compiled into
// every build and selected once at startup based on what the CPU supports.
// The dispatched entry points below forward to the active backend.
//
// double overloads are provided for the 64-bit gradient-checking path and
// always run the scalar reference.
//
// Environment override: VTBR_KERNELS=scalar|avx2 (avx2 silently falls back
// to scalar when the CPU cannot run it).
//
// Matrix conventions: row-major, C is m x n.
//   gemm_nn: C (+)= A[m x k] * B[k x n]
//   gemm_nt: C (+)= A[m x k] * B[n x k]^T
//   gemm_tn: C (+)= A[k x m]^T * B[k x n]

#include <cstddef>

namespace vtbr::kernels {

enum class Backend { scalar, avx2 };

Backend active_backend();
const char* backend_name();

// ---- dispatched float API ----
float dot(const float* x, const float* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void scale(float* x, float a, std::size_t n);
float sum(const float* x, std::size_t n);
float sq_l2(const float* x, const float* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
// Row-wise softmax in place. exp() stays scalar in both backends so the
// two variants agree bit for bit.
void softmax_rows(float* x, std::size_t rows, std::size_t cols);
// v = momentum*v + (g + wd*p); p -= lr*v
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd);
// slow += alpha*(fast - slow); fast = slow
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha);
// Adam with L2-style decay folded into the gradient. c1 = 1/(1-b1^t),
// c2 = 1/(1-b2^t) are the caller-supplied bias corrections.
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2);

// ---- double API (scalar reference only) ----
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void scale(double* x, double a, std::size_t n);
double sum(const double* x, std::size_t n);
double sq_l2(const double* x, const double* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void softmax_rows(double* x, std::size_t rows, std::size_t cols);
void sgd_momentum(double* p, double* v, const double* g, std::size_t n,
                  double lr, double momentum, double wd);
void lookahead_sync(double* slow, double* fast, std::size_t n, double alpha);
void adam_update(double* p, double* m, double* v, const double* g,
                 std::size_t n, double lr, double beta1, double beta2,
                 double eps, double wd, double c1, double c2);

namespace scalar {
float dot(const float* x, const float* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void scale(float* x, float a, std::size_t n);
float sum(const float* x, std::size_t n);
float sq_l2(const float* x, const float* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void softmax_rows(float* x, std::size_t rows, std::size_t cols);
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd);
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha);
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2);
}  // namespace scalar

namespace avx2 {
// True when this binary carries AVX2 variants and the CPU can run them.
bool supported();
float dot(const float* x, const float* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void scale(float* x, float a, std::size_t n);
float sum(const float* x, std::size_t n);
float sq_l2(const float* x, const float* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate);
void softmax_rows(float* x, std::size_t rows, std::size_t cols);
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd);
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha);
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2);
}  // namespace avx2

}  // namespace vtbr::kernels
