#pragma once

#include <cstddef>

namespace vlmadapt::kernels {

// Every kernel has a serial reference implementation and an OpenMP one.
// Parallel loops split only across independent output elements and reuse
// the serial inner expressions, so results are bitwise identical in both
// modes and for any thread count. Full-tensor reductions (sum) are always
// serial for the same reason.
enum class Mode { serial, openmp };

Mode mode();
void set_mode(Mode m);
bool openmp_compiled();
int max_threads();

// c[m x n] = op_a(a) * op_b(b); transpose flags give the stored operand's
// transpose, a is m x k after op_a, b is k x n after op_b
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b);
void matmul_openmp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b);
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n,
            bool trans_a, bool trans_b);

void add_serial(const double* a, const double* b, double* out, std::size_t n);
void add_openmp(const double* a, const double* b, double* out, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);

// out[r, c] = a[r, c] + bias[c]
void bias_add_serial(const double* a, const double* bias, double* out,
                     std::size_t rows, std::size_t cols);
void bias_add_openmp(const double* a, const double* bias, double* out,
                     std::size_t rows, std::size_t cols);
void bias_add(const double* a, const double* bias, double* out,
              std::size_t rows, std::size_t cols);

void mul_serial(const double* a, const double* b, double* out, std::size_t n);
void mul_openmp(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);

void scale_serial(const double* a, double factor, double* out, std::size_t n);
void scale_openmp(const double* a, double factor, double* out, std::size_t n);
void scale(const double* a, double factor, double* out, std::size_t n);

enum class UnaryOp { tanh_fn, relu, exp_fn, log_fn };
void map_unary_serial(UnaryOp op, const double* a, double* out, std::size_t n);
void map_unary_openmp(UnaryOp op, const double* a, double* out, std::size_t n);
void map_unary(UnaryOp op, const double* a, double* out, std::size_t n);

// out[r,:] = a[r,:] / (||a[r,:]|| + floor); raw row norms written to norms
void row_l2_normalize_serial(const double* a, double* out, double* norms,
                             std::size_t rows, std::size_t cols, double floor);
void row_l2_normalize_openmp(const double* a, double* out, double* norms,
                             std::size_t rows, std::size_t cols, double floor);
void row_l2_normalize(const double* a, double* out, double* norms,
                      std::size_t rows, std::size_t cols, double floor);

void row_softmax_serial(const double* a, double* out, std::size_t rows, std::size_t cols);
void row_softmax_openmp(const double* a, double* out, std::size_t rows, std::size_t cols);
void row_softmax(const double* a, double* out, std::size_t rows, std::size_t cols);

// serial on purpose; see Mode note
double sum(const double* a, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);

}  // namespace vlmadapt::kernels
