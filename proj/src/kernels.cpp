#include "vlmadapt/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlmadapt::kernels {

namespace {

std::atomic<Mode> g_mode{Mode::openmp};

// work below this many flops is not worth a parallel region
constexpr std::size_t kParallelGrain = 8192;

inline bool use_openmp(std::size_t work) {
#ifdef _OPENMP
    return mode() == Mode::openmp && work >= kParallelGrain;
#else
    (void)work;
    return false;
#endif
}

// shared inner expressions; both modes call these so outputs match bitwise

inline double dot_strided(const double* a, std::size_t stride_a,
                          const double* b, std::size_t stride_b, std::size_t k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += a[i * stride_a] * b[i * stride_b];
    return acc;
}

inline void matmul_row(const double* a, const double* b, double* c_row,
                       std::size_t i, std::size_t m, std::size_t k, std::size_t n,
                       bool trans_a, bool trans_b) {
    // element (i, j) of op_a(a) * op_b(b)
    const double* a_base = trans_a ? a + i : a + i * k;
    const std::size_t a_stride = trans_a ? m : 1;
    for (std::size_t j = 0; j < n; ++j) {
        const double* b_base = trans_b ? b + j * k : b + j;
        const std::size_t b_stride = trans_b ? 1 : n;
        c_row[j] = dot_strided(a_base, a_stride, b_base, b_stride, k);
    }
}

inline double apply_unary(UnaryOp op, double x) {
    switch (op) {
        case UnaryOp::tanh_fn: return std::tanh(x);
        case UnaryOp::relu: return x > 0.0 ? x : 0.0;
        case UnaryOp::exp_fn: return std::exp(x);
        case UnaryOp::log_fn: return std::log(x);
    }
    return 0.0;
}

inline void normalize_row(const double* a_row, double* out_row, double* norm,
                          std::size_t cols, double floor) {
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sq += a_row[j] * a_row[j];
    const double raw = std::sqrt(sq);
    *norm = raw;
    const double inv = 1.0 / (raw + floor);
    for (std::size_t j = 0; j < cols; ++j) out_row[j] = a_row[j] * inv;
}

inline void softmax_row(const double* a_row, double* out_row, std::size_t cols) {
    double mx = a_row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = a_row[j] > mx ? a_row[j] : mx;
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        out_row[j] = std::exp(a_row[j] - mx);
        denom += out_row[j];
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < cols; ++j) out_row[j] *= inv;
}

}  // namespace

Mode mode() { return g_mode.load(std::memory_order_relaxed); }
void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }

bool openmp_compiled() {
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b) {
    for (std::size_t i = 0; i < m; ++i)
        matmul_row(a, b, c + i * n, i, m, k, n, trans_a, trans_b);
}

void matmul_openmp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i)
        matmul_row(a, b, c + i * n, static_cast<std::size_t>(i), m, k, n, trans_a, trans_b);
#else
    matmul_serial(a, b, c, m, k, n, trans_a, trans_b);
#endif
}

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n,
            bool trans_a, bool trans_b) {
    if (use_openmp(m * k * n))
        matmul_openmp(a, b, c, m, k, n, trans_a, trans_b);
    else
        matmul_serial(a, b, c, m, k, n, trans_a, trans_b);
}

void add_serial(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void add_openmp(const double* a, const double* b, double* out, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) out[i] = a[i] + b[i];
#else
    add_serial(a, b, out, n);
#endif
}

void add(const double* a, const double* b, double* out, std::size_t n) {
    if (use_openmp(n)) add_openmp(a, b, out, n);
    else add_serial(a, b, out, n);
}

void bias_add_serial(const double* a, const double* bias, double* out,
                     std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = a[i * cols + j] + bias[j];
}

void bias_add_openmp(const double* a, const double* bias, double* out,
                     std::size_t rows, std::size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows); ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = a[i * cols + j] + bias[j];
#else
    bias_add_serial(a, bias, out, rows, cols);
#endif
}

void bias_add(const double* a, const double* bias, double* out,
              std::size_t rows, std::size_t cols) {
    if (use_openmp(rows * cols)) bias_add_openmp(a, bias, out, rows, cols);
    else bias_add_serial(a, bias, out, rows, cols);
}

void mul_serial(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_openmp(const double* a, const double* b, double* out, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) out[i] = a[i] * b[i];
#else
    mul_serial(a, b, out, n);
#endif
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
    if (use_openmp(n)) mul_openmp(a, b, out, n);
    else mul_serial(a, b, out, n);
}

void scale_serial(const double* a, double factor, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * factor;
}

void scale_openmp(const double* a, double factor, double* out, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) out[i] = a[i] * factor;
#else
    scale_serial(a, factor, out, n);
#endif
}

void scale(const double* a, double factor, double* out, std::size_t n) {
    if (use_openmp(n)) scale_openmp(a, factor, out, n);
    else scale_serial(a, factor, out, n);
}

void map_unary_serial(UnaryOp op, const double* a, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = apply_unary(op, a[i]);
}

void map_unary_openmp(UnaryOp op, const double* a, double* out, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) out[i] = apply_unary(op, a[i]);
#else
    map_unary_serial(op, a, out, n);
#endif
}

void map_unary(UnaryOp op, const double* a, double* out, std::size_t n) {
    if (use_openmp(n * 8)) map_unary_openmp(op, a, out, n);
    else map_unary_serial(op, a, out, n);
}

void row_l2_normalize_serial(const double* a, double* out, double* norms,
                             std::size_t rows, std::size_t cols, double floor) {
    for (std::size_t i = 0; i < rows; ++i)
        normalize_row(a + i * cols, out + i * cols, norms + i, cols, floor);
}

void row_l2_normalize_openmp(const double* a, double* out, double* norms,
                             std::size_t rows, std::size_t cols, double floor) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows); ++i)
        normalize_row(a + i * cols, out + i * cols, norms + i, cols, floor);
#else
    row_l2_normalize_serial(a, out, norms, rows, cols, floor);
#endif
}

void row_l2_normalize(const double* a, double* out, double* norms,
                      std::size_t rows, std::size_t cols, double floor) {
    if (use_openmp(rows * cols * 4)) row_l2_normalize_openmp(a, out, norms, rows, cols, floor);
    else row_l2_normalize_serial(a, out, norms, rows, cols, floor);
}

void row_softmax_serial(const double* a, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) softmax_row(a + i * cols, out + i * cols, cols);
}

void row_softmax_openmp(const double* a, double* out, std::size_t rows, std::size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows); ++i)
        softmax_row(a + i * cols, out + i * cols, cols);
#else
    row_softmax_serial(a, out, rows, cols);
#endif
}

void row_softmax(const double* a, double* out, std::size_t rows, std::size_t cols) {
    if (use_openmp(rows * cols * 8)) row_softmax_openmp(a, out, rows, cols);
    else row_softmax_serial(a, out, rows, cols);
}

double sum(const double* a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

double dot(const double* a, const double* b, std::size_t n) {
    return dot_strided(a, 1, b, 1, n);
}

}  // namespace vlmadapt::kernels
