#include "tcl/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "tcl/fastmath.hpp"

namespace tcl::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};

// One (sequence, head) slice of attention. Shared by both backends: the
// parallel version only distributes slices over threads. `scratch` holds the
// slice's keys (forward) or values (backward) transposed to dh x k_len so the
// score loops vectorize over keys.
void gather_transposed(const double* src, const AttentionShape& s, std::size_t b, std::size_t off,
                       std::size_t dh, std::vector<double>& out) {
  out.resize(dh * s.k_len);
  for (std::size_t j = 0; j < s.k_len; ++j) {
    const double* row = src + (b * s.k_len + j) * s.dim + off;
    for (std::size_t d = 0; d < dh; ++d) out[d * s.k_len + j] = row[d];
  }
}

void attention_slice_forward(const double* q, const double* k, const double* v, double* out,
                             double* probs, std::span<const std::uint8_t> key_valid,
                             const AttentionShape& s, std::size_t b, std::size_t h,
                             std::vector<double>& kt) {
  const std::size_t dh = s.dim / s.heads, kl = s.k_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t off = h * dh;
  const std::uint8_t* valid = key_valid.empty() ? nullptr : key_valid.data() + b * kl;
  gather_transposed(k, s, b, off, dh, kt);
  double* p = probs + ((b * s.heads + h) * s.q_len) * kl;
  for (std::size_t i = 0; i < s.q_len; ++i) {
    const double* qi = q + (b * s.q_len + i) * s.dim + off;
    double* pi = p + i * kl;
    std::fill(pi, pi + kl, 0.0);
    for (std::size_t d = 0; d < dh; ++d) {
      const double qd = qi[d];
      const double* kd = kt.data() + d * kl;
      for (std::size_t j = 0; j < kl; ++j) pi[j] += qd * kd[j];
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < kl; ++j) {
      pi[j] = (valid && !valid[j]) ? -std::numeric_limits<double>::infinity() : pi[j] * scale;
      mx = std::max(mx, pi[j]);
    }
    double* oi = out + (b * s.q_len + i) * s.dim + off;
    std::fill(oi, oi + dh, 0.0);
    if (mx == -std::numeric_limits<double>::infinity()) {
      std::fill(pi, pi + kl, 0.0);
      continue;
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < kl; ++j) pi[j] = fastmath::exp(pi[j] - mx);
    if (valid) {
      for (std::size_t j = 0; j < kl; ++j)
        if (!valid[j]) pi[j] = 0.0;
    }
    for (std::size_t j = 0; j < kl; ++j) denom += pi[j];
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < kl; ++j) {
      pi[j] *= inv;
      if (pi[j] == 0.0) continue;
      const double* vj = v + (b * kl + j) * s.dim + off;
      for (std::size_t d = 0; d < dh; ++d) oi[d] += pi[j] * vj[d];
    }
  }
}

void attention_slice_backward(const double* q, const double* k, const double* v,
                              const double* probs, const double* dout, double* dq, double* dk,
                              double* dv, const AttentionShape& s, std::size_t b, std::size_t h,
                              std::vector<double>& dp, std::vector<double>& vt) {
  const std::size_t dh = s.dim / s.heads, kl = s.k_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t off = h * dh;
  const double* p = probs + ((b * s.heads + h) * s.q_len) * kl;
  gather_transposed(v, s, b, off, dh, vt);
  dp.resize(kl);
  for (std::size_t i = 0; i < s.q_len; ++i) {
    const double* pi = p + i * kl;
    const double* doi = dout + (b * s.q_len + i) * s.dim + off;
    std::fill(dp.begin(), dp.end(), 0.0);
    for (std::size_t d = 0; d < dh; ++d) {
      const double g = doi[d];
      const double* vd = vt.data() + d * kl;
      for (std::size_t j = 0; j < kl; ++j) dp[j] += g * vd[j];
    }
    double weighted = 0.0;
    for (std::size_t j = 0; j < kl; ++j) weighted += pi[j] * dp[j];
    const double* qi = q + (b * s.q_len + i) * s.dim + off;
    double* dqi = dq ? dq + (b * s.q_len + i) * s.dim + off : nullptr;
    for (std::size_t j = 0; j < kl; ++j) {
      if (pi[j] == 0.0) continue;
      if (dv) {
        double* dvj = dv + (b * kl + j) * s.dim + off;
        for (std::size_t d = 0; d < dh; ++d) dvj[d] += pi[j] * doi[d];
      }
      const double ds = pi[j] * (dp[j] - weighted) * scale;
      const double* kj = k + (b * kl + j) * s.dim + off;
      if (dqi)
        for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
      if (dk) {
        double* dkj = dk + (b * kl + j) * s.dim + off;
        for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
      }
    }
  }
}

using v8d = double __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

// C tile (+)= A rows * B columns with MR x (8 * NV) accumulators held in
// registers. Every element is summed over k in index order, as in the serial
// loops.
template <std::size_t MR, std::size_t NV>
inline void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
                      bool accumulate) {
  v8d acc[MR][NV] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* bk = b + kk * n;
    v8d bv[NV];
    for (std::size_t j = 0; j < NV; ++j) bv[j] = load8(bk + 8 * j);
    for (std::size_t r = 0; r < MR; ++r) {
      const double av = a[r * k + kk];
      for (std::size_t j = 0; j < NV; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NV; ++j) {
      double* cp = c + r * n + 8 * j;
      store8(cp, accumulate ? load8(cp) + acc[r][j] : acc[r][j]);
    }
}

inline void gemm_edge(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
                      std::size_t mr, std::size_t nr, bool accumulate) {
  for (std::size_t r = 0; r < mr; ++r)
    for (std::size_t j = 0; j < nr; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc = std::fma(a[r * k + kk], b[kk * n + j], acc);
      c[r * n + j] = accumulate ? c[r * n + j] + acc : acc;
    }
}

constexpr std::size_t kTileRows = 12, kTileVecs = 1, kTileCols = 8 * kTileVecs;

template <std::size_t MR>
inline void gemm_rows(const double* ar, const double* b, double* cr, std::size_t k, std::size_t n,
                      bool accumulate) {
  std::size_t j = 0;
  for (; j + kTileCols <= n; j += kTileCols)
    gemm_tile<MR, kTileVecs>(ar, b + j, cr + j, k, n, accumulate);
  if (j < n) gemm_edge(ar, b + j, cr + j, k, n, MR, n - j, accumulate);
}

// Rows [r0, r0 + mr) of C, mr <= kTileRows.
inline void gemm_panel(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
                       std::size_t r0, std::size_t mr, bool accumulate) {
  std::size_t r = r0;
  const std::size_t end = r0 + mr;
  if (end - r == kTileRows) {
    gemm_rows<kTileRows>(a + r * k, b, c + r * n, k, n, accumulate);
    return;
  }
  for (; end - r >= 4; r += 4) gemm_rows<4>(a + r * k, b, c + r * n, k, n, accumulate);
  for (; r < end; ++r) gemm_rows<1>(a + r * k, b, c + r * n, k, n, accumulate);
}

std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void configure_threads(int threads) {
  if (threads <= 0) {
    if (const char* env = std::getenv("TCL_THREADS")) threads = std::atoi(env);
  }
  if (threads > 0) omp_set_num_threads(threads);
}

namespace serial {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc = std::fma(a[i * k + kk], b[kk * n + j], acc);
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc = std::fma(a[i * k + kk], b[j * k + kk], acc);
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc = std::fma(a[kk * m + i], b[kk * n + j], acc);
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, std::span<const std::uint8_t> key_valid,
                       const AttentionShape& s) {
  std::vector<double> kt;
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      attention_slice_forward(q, k, v, out, probs, key_valid, s, b, h, kt);
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionShape& s) {
  std::vector<double> dp, vt;
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      attention_slice_backward(q, k, v, probs, dout, dq, dk, dv, s, b, h, dp, vt);
}

}  // namespace serial

namespace parallel {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto panels = static_cast<std::ptrdiff_t>((m + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::ptrdiff_t p = 0; p < panels; ++p) {
    const std::size_t r0 = static_cast<std::size_t>(p) * kTileRows;
    gemm_panel(a, b, c, k, n, r0, std::min(kTileRows, m - r0), accumulate);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const std::vector<double> bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const std::vector<double> at = transpose(a, k, m);
  gemm_nn(at.data(), b, c, m, k, n, accumulate);
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, std::span<const std::uint8_t> key_valid,
                       const AttentionShape& s) {
  const auto slices = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel if (slices > 1)
  {
    std::vector<double> kt;
#pragma omp for schedule(static)
    for (std::ptrdiff_t t = 0; t < slices; ++t)
      attention_slice_forward(q, k, v, out, probs, key_valid, s, t / s.heads, t % s.heads, kt);
  }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionShape& s) {
  const auto slices = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel if (slices > 1)
  {
    std::vector<double> dp, vt;
#pragma omp for schedule(static)
    for (std::ptrdiff_t t = 0; t < slices; ++t)
      attention_slice_backward(q, k, v, probs, dout, dq, dk, dv, s, t / s.heads, t % s.heads,
                               dp, vt);
  }
}

}  // namespace parallel

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (backend() == Backend::serial) return serial::gemm_nn(a, b, c, m, k, n, accumulate);
  parallel::gemm_nn(a, b, c, m, k, n, accumulate);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (backend() == Backend::serial) return serial::gemm_nt(a, b, c, m, k, n, accumulate);
  parallel::gemm_nt(a, b, c, m, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (backend() == Backend::serial) return serial::gemm_tn(a, b, c, m, k, n, accumulate);
  parallel::gemm_tn(a, b, c, m, k, n, accumulate);
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, std::span<const std::uint8_t> key_valid,
                       const AttentionShape& s) {
  if (backend() == Backend::serial)
    return serial::attention_forward(q, k, v, out, probs, key_valid, s);
  parallel::attention_forward(q, k, v, out, probs, key_valid, s);
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionShape& s) {
  if (backend() == Backend::serial)
    return serial::attention_backward(q, k, v, probs, dout, dq, dk, dv, s);
  parallel::attention_backward(q, k, v, probs, dout, dq, dk, dv, s);
}

}  // namespace tcl::kernels
