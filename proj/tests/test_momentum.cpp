#include <cmath>
#include <deque>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "tcl/errors.hpp"
#include "tcl/momentum.hpp"

using namespace tcl;
using namespace tcl::momentum;

namespace {

struct Pair {
  model::ParamSet online, shadow;
};

Pair scalar_pair(double online_value, double shadow_value, std::size_t n = 1) {
  Pair p;
  p.online.add("w", ag::parameter(Matrix(1, n, online_value)));
  p.shadow.add("w", ag::parameter(Matrix(1, n, shadow_value), false));
  return p;
}

Matrix unit_row(std::size_t dim, std::size_t hot) {
  Matrix m(1, dim, 0.0);
  m(0, hot) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("ema: m = 1 keeps the shadow, m = 0 copies the online values") {
  auto p = scalar_pair(1.0, 0.25);
  ema_update(MomentumPair(p.online, p.shadow, 1.0));
  CHECK(p.shadow[0].var->value[0] == 0.25);
  ema_update(MomentumPair(p.online, p.shadow, 0.0));
  CHECK(p.shadow[0].var->value[0] == 1.0);
}

TEST_CASE("ema: m = 0.995 from 0 towards 1 gives 0.005") {
  auto p = scalar_pair(1.0, 0.0);
  ema_update(MomentumPair(p.online, p.shadow, 0.995));
  CHECK(p.shadow[0].var->value[0] == doctest::Approx(0.005).epsilon(1e-12));
}

TEST_CASE("ema: geometric contraction towards a constant target") {
  Rng rng(1);
  for (double m : {0.5, 0.9, 0.995}) {
    Pair p;
    const Matrix target = test::random_matrix(3, 4, rng);
    const Matrix start = test::random_matrix(3, 4, rng);
    p.online.add("w", ag::parameter(target));
    p.shadow.add("w", ag::parameter(start, false));
    const MomentumPair pair(p.online, p.shadow, m);
    Matrix diff0 = start;
    for (std::size_t i = 0; i < diff0.size(); ++i) diff0[i] -= target[i];
    const double d0 = diff0.frobenius_norm();
    for (int n = 1; n <= 50; ++n) {
      ema_update(pair);
      Matrix d = p.shadow[0].var->value;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= target[i];
      const double expected = std::pow(m, n) * d0;
      // Below this the distance is at the rounding level of the target entries.
      if (expected < 1e-6 * d0) break;
      REQUIRE(std::abs(d.frobenius_norm() - expected) <= 1e-6 * expected);
    }
  }
}

TEST_CASE("ema: mismatched shapes and bad coefficients are rejected") {
  model::ParamSet a, b;
  a.add("w", ag::parameter(Matrix(1, 2)));
  b.add("w", ag::parameter(Matrix(2, 1), false));
  CHECK_THROWS_AS(ema_update(MomentumPair(a, b, 0.5)), ContractViolation);
  auto p = scalar_pair(1.0, 0.0);
  CHECK_THROWS_AS(ema_update(MomentumPair(p.online, p.shadow, 1.5)), ConfigError);
}

TEST_CASE("queue: FIFO eviction order") {
  NegativeQueue q(4, 6, QueueKind::text);
  Matrix ab(2, 6, 0.0), cd(2, 6, 0.0), ef(2, 6, 0.0);
  ab(0, 0) = ab(1, 1) = cd(0, 2) = cd(1, 3) = ef(0, 4) = ef(1, 5) = 1.0;
  q.enqueue(ab);
  q.enqueue(cd);
  CHECK(q.filled() == 4);
  CHECK(q.evicted() == 0);
  q.enqueue(ef);
  const Matrix neg = q.negatives();
  REQUIRE(neg.rows() == 4);
  for (std::size_t r = 0; r < 4; ++r) CHECK(neg(r, r + 2) == 1.0);
  CHECK(q.pushed() == 6);
  CHECK(q.evicted() == 2);
}

TEST_CASE("queue: exactly K pushes fill it and the next push evicts") {
  NegativeQueue q(3, 3, QueueKind::image);
  for (std::size_t i = 0; i < 3; ++i) q.enqueue(unit_row(3, i));
  CHECK(q.filled() == 3);
  CHECK(q.evicted() == 0);
  q.enqueue(unit_row(3, 0));
  CHECK(q.filled() == 3);
  CHECK(q.evicted() == 1);
}

TEST_CASE("queue: warm start gives K unit rows, snapshots contain pushed rows") {
  NegativeQueue q(16, 5, QueueKind::text);
  q.warm_start(3);
  CHECK(q.filled() == 16);
  Matrix neg = q.negatives();
  for (std::size_t r = 0; r < neg.rows(); ++r)
    CHECK(std::abs(l2_norm(neg.row(r)) - 1.0) <= 1e-5);
  const Matrix b = unit_row(5, 2);
  q.enqueue(b);
  neg = q.negatives();
  CHECK(neg(neg.rows() - 1, 2) == 1.0);
}

TEST_CASE("queue: rejects non-unit rows, oversized batches and wrong widths") {
  NegativeQueue q(2, 3, QueueKind::text);
  CHECK_THROWS_AS(q.enqueue(Matrix(1, 3, 1.0)), ContractViolation);
  CHECK_THROWS_AS(q.enqueue(Matrix(1, 4, 0.5)), ContractViolation);
  Matrix big(3, 3, 0.0);
  for (std::size_t r = 0; r < 3; ++r) big(r, r) = 1.0;
  CHECK_THROWS_AS(q.enqueue(big), ContractViolation);
}

TEST_CASE("queue: matches a list oracle over 1e4 random operations") {
  const std::size_t cap = 37, dim = 4;
  NegativeQueue q(cap, dim, QueueKind::image);
  std::deque<std::vector<double>> oracle;
  Rng rng(2024);
  for (int op = 0; op < 10000; ++op) {
    if (rng.bernoulli(0.6)) {
      const std::size_t n = 1 + rng.below(cap);
      Matrix batch = test::random_unit_rows(n, dim, rng);
      q.enqueue(batch);
      for (std::size_t r = 0; r < n; ++r) {
        oracle.emplace_back(batch.row(r).begin(), batch.row(r).end());
        if (oracle.size() > cap) oracle.pop_front();
      }
    } else {
      const Matrix neg = q.negatives();
      REQUIRE(neg.rows() == oracle.size());
      for (std::size_t r = 0; r < neg.rows(); ++r)
        REQUIRE(std::equal(oracle[r].begin(), oracle[r].end(), neg.row(r).begin()));
    }
    REQUIRE(q.filled() == oracle.size());
  }
}

TEST_CASE("queue: restore reproduces the ring state") {
  Rng rng(5);
  NegativeQueue a(8, 3, QueueKind::text);
  a.enqueue(test::random_unit_rows(5, 3, rng));
  a.enqueue(test::random_unit_rows(6, 3, rng));
  NegativeQueue b(8, 3, QueueKind::text);
  b.restore(a.buffer(), a.head(), a.filled(), a.pushed(), a.evicted());
  CHECK(b.negatives() == a.negatives());
  const Matrix more = test::random_unit_rows(3, 3, rng);
  a.enqueue(more);
  b.enqueue(more);
  CHECK(b.negatives() == a.negatives());
}
