// Backend selection. Decided once, at first use; every dispatched entry
// point below forwards to the chosen namespace.

#include "vtbr/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace vtbr::kernels {

namespace {

Backend pick_backend() {
    const char* env = std::getenv("VTBR_KERNELS");
    if (env != nullptr) {
        if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
        if (std::strcmp(env, "avx2") == 0) {
            return avx2::supported() ? Backend::avx2 : Backend::scalar;
        }
    }
    return avx2::supported() ? Backend::avx2 : Backend::scalar;
}

}  // namespace

Backend active_backend() {
    static const Backend b = pick_backend();
    return b;
}

const char* backend_name() {
    return active_backend() == Backend::avx2 ? "avx2" : "scalar";
}

#define VTBR_DISPATCH(call) \
    (active_backend() == Backend::avx2 ? avx2::call : scalar::call)

float dot(const float* x, const float* y, std::size_t n) {
    return VTBR_DISPATCH(dot(x, y, n));
}
void axpy(float a, const float* x, float* y, std::size_t n) {
    VTBR_DISPATCH(axpy(a, x, y, n));
}
void scale(float* x, float a, std::size_t n) {
    VTBR_DISPATCH(scale(x, a, n));
}
float sum(const float* x, std::size_t n) {
    return VTBR_DISPATCH(sum(x, n));
}
float sq_l2(const float* x, const float* y, std::size_t n) {
    return VTBR_DISPATCH(sq_l2(x, y, n));
}
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    VTBR_DISPATCH(gemm_nn(m, n, k, a, b, c, accumulate));
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    VTBR_DISPATCH(gemm_nt(m, n, k, a, b, c, accumulate));
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c, bool accumulate) {
    VTBR_DISPATCH(gemm_tn(m, n, k, a, b, c, accumulate));
}
void softmax_rows(float* x, std::size_t rows, std::size_t cols) {
    VTBR_DISPATCH(softmax_rows(x, rows, cols));
}
void sgd_momentum(float* p, float* v, const float* g, std::size_t n,
                  float lr, float momentum, float wd) {
    VTBR_DISPATCH(sgd_momentum(p, v, g, n, lr, momentum, wd));
}
void lookahead_sync(float* slow, float* fast, std::size_t n, float alpha) {
    VTBR_DISPATCH(lookahead_sync(slow, fast, n, alpha));
}
void adam_update(float* p, float* m, float* v, const float* g, std::size_t n,
                 float lr, float beta1, float beta2, float eps, float wd,
                 float c1, float c2) {
    VTBR_DISPATCH(adam_update(p, m, v, g, n, lr, beta1, beta2, eps, wd, c1, c2));
}

#undef VTBR_DISPATCH

}  // namespace vtbr::kernels
