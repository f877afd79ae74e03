// Times the serial reference kernels against the OpenMP ones and checks the
// results stay bitwise identical while doing so.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "vlmadapt/encoder.hpp"
#include "vlmadapt/kernels.hpp"
#include "vlmadapt/pretrain.hpp"
#include "vlmadapt/rng.hpp"
#include "vlmadapt/synth.hpp"

using namespace vlmadapt;
namespace k = vlmadapt::kernels;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<double> random_values(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

void bench_matmul(std::size_t n, std::size_t reps) {
    Rng rng(n);
    const std::vector<double> a = random_values(rng, n * n);
    const std::vector<double> b = random_values(rng, n * n);
    std::vector<double> c_serial(n * n), c_omp(n * n);

    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r)
        k::matmul_serial(a.data(), b.data(), c_serial.data(), n, n, n, false, false);
    const double serial_s = seconds_since(t0) / static_cast<double>(reps);

    t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r)
        k::matmul_openmp(a.data(), b.data(), c_omp.data(), n, n, n, false, false);
    const double omp_s = seconds_since(t0) / static_cast<double>(reps);

    const bool identical =
        std::memcmp(c_serial.data(), c_omp.data(), n * n * sizeof(double)) == 0;
    std::printf("matmul %4zux%-4zu  serial %8.3f ms  openmp %8.3f ms  speedup %5.2fx  %s\n", n,
                n, serial_s * 1e3, omp_s * 1e3, serial_s / omp_s,
                identical ? "bitwise-equal" : "MISMATCH");
}

void bench_unary(std::size_t n, std::size_t reps) {
    Rng rng(n);
    const std::vector<double> a = random_values(rng, n);
    std::vector<double> out_serial(n), out_omp(n);

    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r)
        k::map_unary_serial(k::UnaryOp::tanh_fn, a.data(), out_serial.data(), n);
    const double serial_s = seconds_since(t0) / static_cast<double>(reps);

    t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r)
        k::map_unary_openmp(k::UnaryOp::tanh_fn, a.data(), out_omp.data(), n);
    const double omp_s = seconds_since(t0) / static_cast<double>(reps);

    const bool identical =
        std::memcmp(out_serial.data(), out_omp.data(), n * sizeof(double)) == 0;
    std::printf("tanh   %9zu  serial %8.3f ms  openmp %8.3f ms  speedup %5.2fx  %s\n", n,
                serial_s * 1e3, omp_s * 1e3, serial_s / omp_s,
                identical ? "bitwise-equal" : "MISMATCH");
}

double bench_training(k::Mode mode, std::uint64_t* param_hash) {
    k::set_mode(mode);
    SynthTaskSpec spec = SynthTaskSpec::default_spec();
    GeneratedCorpus gen = generate_corpus(spec, "coral", 256, {0.5, 0.25, 0.25, 0.0}, 7);
    std::vector<std::string> words = spec.word_list();
    EncoderConfig cfg;
    DualEncoderModel model = DualEncoderModel::init(cfg, Vocabulary::build(words));
    std::vector<std::string> ids;
    for (const CaptionRecord& rec : gen.corpus.records()) ids.push_back(rec.id);
    const std::vector<TrainingPair> pairs = make_training_pairs(ids, gen.corpus, model);
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 0;

    auto t0 = std::chrono::steady_clock::now();
    TrainResult result = train_adapt(model, pairs, tc);
    const double elapsed = seconds_since(t0);
    *param_hash = result.model.param_hash();
    return elapsed;
}

}  // namespace

int main() {
    std::printf("OpenMP compiled: %s, max threads: %d\n", k::openmp_compiled() ? "yes" : "no",
                k::max_threads());

    bench_matmul(64, 50);
    bench_matmul(128, 20);
    bench_matmul(256, 5);
    bench_unary(1 << 20, 20);

    std::uint64_t hash_serial = 0, hash_omp = 0;
    const double train_serial = bench_training(k::Mode::serial, &hash_serial);
    const double train_omp = bench_training(k::Mode::openmp, &hash_omp);
    std::printf("train  3 epochs    serial %8.3f ms  openmp %8.3f ms  speedup %5.2fx  %s\n",
                train_serial * 1e3, train_omp * 1e3, train_serial / train_omp,
                hash_serial == hash_omp ? "same-params" : "PARAM MISMATCH");
    k::set_mode(k::Mode::openmp);
    return hash_serial == hash_omp ? 0 : 1;
}
