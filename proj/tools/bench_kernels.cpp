// times the OpenMP lane against the serial reference lane and checks that
// both produce bit-identical output on the way
#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

#include "remem/kernels.hpp"
#include "remem/rng.hpp"

using namespace remem;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<float> randn(std::size_t n, std::mt19937_64& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(truncated_normal(rng, 1.0));
  return v;
}

template <class Par, class Ref>
void bench(const char* name, int reps, std::size_t out_elems, const float* par_out,
           const float* ref_out, Par&& par, Ref&& ref) {
  par();  // warm both lanes before timing
  ref();
  auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) par();
  double par_ms = ms_since(t0) / reps;
  t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) ref();
  double ref_ms = ms_since(t0) / reps;
  bool same = std::memcmp(par_out, ref_out, out_elems * sizeof(float)) == 0;
  std::printf("%-14s %4d threads  omp %8.3f ms  ref %8.3f ms  speedup %5.2fx  %s\n", name,
              kernels::max_threads(), par_ms, ref_ms, ref_ms / par_ms,
              same ? "bit-equal" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) kernels::set_max_threads(std::atoi(argv[1]));
  auto rng = make_rng(7);

  {
    std::size_t m = 256, n = 256, k = 256;
    auto a = randn(m * k, rng), b = randn(k * n, rng);
    std::vector<float> cp(m * n), cr(m * n);
    bench(
        "gemm_nn", 20, m * n, cp.data(), cr.data(),
        [&] { kernels::gemm_nn(m, n, k, a.data(), b.data(), cp.data(), false); },
        [&] { kernels::ref::gemm_nn(m, n, k, a.data(), b.data(), cr.data(), false); });
  }
  {
    std::size_t b = 8, heads = 4, t = 64, dh = 16;
    auto q = randn(b * t * heads * dh, rng), k = randn(b * t * heads * dh, rng);
    std::vector<float> sp(b * heads * t * t), sr(b * heads * t * t);
    bench(
        "attn_scores", 50, sp.size(), sp.data(), sr.data(),
        [&] { kernels::attn_scores(b, heads, t, dh, q.data(), k.data(), sp.data(), 0.25f); },
        [&] { kernels::ref::attn_scores(b, heads, t, dh, q.data(), k.data(), sr.data(), 0.25f); });
  }
  {
    std::size_t rows = 4096, n = 128;
    auto x = randn(rows * n, rng);
    std::vector<float> yp(rows * n), yr(rows * n);
    bench(
        "softmax_rows", 50, yp.size(), yp.data(), yr.data(),
        [&] { kernels::softmax_rows(rows, n, x.data(), yp.data(), 1.0f); },
        [&] { kernels::ref::softmax_rows(rows, n, x.data(), yr.data(), 1.0f); });
  }
  {
    std::size_t rows = 4096, d = 128;
    auto x = randn(rows * d, rng), g = randn(d, rng), bi = randn(d, rng);
    std::vector<float> yp(rows * d), yr(rows * d), mp(rows), mr(rows), rp(rows), rr(rows);
    bench(
        "layernorm_rows", 50, yp.size(), yp.data(), yr.data(),
        [&] {
          kernels::layernorm_rows(rows, d, x.data(), g.data(), bi.data(), 1e-5f, yp.data(),
                                  mp.data(), rp.data());
        },
        [&] {
          kernels::ref::layernorm_rows(rows, d, x.data(), g.data(), bi.data(), 1e-5f, yr.data(),
                                       mr.data(), rr.data());
        });
  }
  return 0;
}
