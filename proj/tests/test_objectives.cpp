#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "tcl/errors.hpp"
#include "tcl/objectives.hpp"

using namespace tcl;
using namespace tcl::objectives;
using test::random_unit_rows;

namespace {

// Direct evaluation without max subtraction.
double naive_infonce(const Matrix& a, const Matrix& p, const Matrix& n, double tau) {
  double total = 0.0;
  for (std::size_t b = 0; b < a.rows(); ++b) {
    const double pos = std::exp(dot(a.row(b), p.row(b)) / tau);
    double denom = pos;
    for (std::size_t k = 0; k < n.rows(); ++k) denom += std::exp(dot(a.row(b), n.row(k)) / tau);
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(a.rows());
}

Matrix basis_rows(std::size_t rows, std::size_t dim, std::size_t hot) {
  Matrix m(rows, dim, 0.0);
  for (std::size_t r = 0; r < rows; ++r) m(r, hot) = 1.0;
  return m;
}

momentum::NegativeQueue filled_queue(const Matrix& rows, momentum::QueueKind kind) {
  momentum::NegativeQueue q(rows.rows(), rows.cols(), kind);
  q.enqueue(rows);
  return q;
}

}  // namespace

TEST_CASE("infonce: no negatives gives zero, uniform logits give ln(K+1)") {
  const Matrix a = basis_rows(3, 4, 0);
  CHECK(ag::item(infonce(ag::constant(a), ag::constant(a), Matrix(0, 4), 0.07)) ==
        doctest::Approx(0.0).epsilon(1e-15));
  const Matrix orth = basis_rows(3, 4, 1);
  const Matrix negs = basis_rows(3, 4, 2);
  CHECK(ag::item(infonce(ag::constant(a), ag::constant(orth), negs, 0.07)) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("infonce: matches the unstabilised reference on random batches") {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = random_unit_rows(4, 8, rng), p = random_unit_rows(4, 8, rng),
                 n = random_unit_rows(8, 8, rng);
    const double tau = 0.05 + 0.5 * rng.uniform();
    CHECK(std::abs(ag::item(infonce(ag::constant(a), ag::constant(p), n, tau)) -
                   naive_infonce(a, p, n, tau)) < 1e-9);
  }
}

TEST_CASE("infonce: bounds on random batches") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + rng.below(20);
    const Matrix a = random_unit_rows(5, 6, rng), p = random_unit_rows(5, 6, rng),
                 n = random_unit_rows(k, 6, rng);
    const double tau = 0.07;
    const double loss = ag::item(infonce(ag::constant(a), ag::constant(p), n, tau));
    CHECK(loss >= 0.0);
    double slack = 0.0;
    for (std::size_t b = 0; b < a.rows(); ++b)
      for (std::size_t j = 0; j < k; ++j)
        slack = std::max(slack, (dot(a.row(b), n.row(j)) - dot(a.row(b), p.row(b))) / tau);
    CHECK(loss <= std::log(1.0 + static_cast<double>(k)) + slack + 1e-12);
  }
}

TEST_CASE("infonce: literal variant drops the positive from the denominator") {
  Rng rng(3);
  const Matrix a = random_unit_rows(2, 4, rng), p = random_unit_rows(2, 4, rng),
               n = random_unit_rows(5, 4, rng);
  double expect = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    double denom = 0.0;
    for (std::size_t k = 0; k < 5; ++k) denom += std::exp(dot(a.row(b), n.row(k)) / 0.1);
    expect += -(dot(a.row(b), p.row(b)) / 0.1 - std::log(denom));
  }
  CHECK(ag::item(infonce(ag::constant(a), ag::constant(p), n, 0.1, NceVariant::literal)) ==
        doctest::Approx(expect / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(infonce(ag::constant(a), ag::constant(p), Matrix(0, 4), 0.1, NceVariant::literal),
                  ContractViolation);
}

TEST_CASE("infonce: invalid temperature and empty batches") {
  const Matrix a = basis_rows(1, 2, 0);
  CHECK_THROWS_AS(infonce(ag::constant(a), ag::constant(a), a, 0.0), ConfigError);
  CHECK_THROWS_AS(infonce(ag::constant(Matrix(0, 2)), ag::constant(Matrix(0, 2)), a, 0.1),
                  ContractViolation);
}

TEST_CASE("cma: aligned pairs with orthogonal queues match the closed form") {
  const double tau = 0.07;
  const std::size_t k = 1024, d = 4;
  GlobalViews v;
  v.image_online = ag::constant(basis_rows(3, d, 0));
  v.text_momentum = ag::constant(basis_rows(3, d, 0));
  v.text_online = ag::constant(basis_rows(3, d, 1));
  v.image_momentum = ag::constant(basis_rows(3, d, 1));
  const auto tq = filled_queue(basis_rows(k, d, 2), momentum::QueueKind::text);
  const auto iq = filled_queue(basis_rows(k, d, 3), momentum::QueueKind::image);
  const double expect = -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + static_cast<double>(k)));
  CHECK(std::abs(ag::item(cma_loss(v, tq, iq, tau)) - expect) < 1e-6);
  CHECK(expect < 1e-3);
}

TEST_CASE("cma: swapping modalities and queues leaves the value unchanged") {
  Rng rng(4);
  GlobalViews v{ag::constant(random_unit_rows(4, 8, rng)), ag::constant(random_unit_rows(4, 8, rng)),
                ag::constant(random_unit_rows(4, 8, rng)), ag::constant(random_unit_rows(4, 8, rng))};
  const Matrix tn = random_unit_rows(8, 8, rng), in = random_unit_rows(8, 8, rng);
  const auto tq = filled_queue(tn, momentum::QueueKind::text);
  const auto iq = filled_queue(in, momentum::QueueKind::image);
  // Swapped roles: the text side plays the image side.
  GlobalViews s{v.text_online, v.text_momentum, v.image_online, v.image_momentum};
  const auto tq2 = filled_queue(in, momentum::QueueKind::text);
  const auto iq2 = filled_queue(tn, momentum::QueueKind::image);
  CHECK(ag::item(cma_loss(v, tq, iq, 0.07)) ==
        doctest::Approx(ag::item(cma_loss(s, tq2, iq2, 0.07))).epsilon(1e-13));
  CHECK_THROWS_AS(cma_loss(v, iq, tq, 0.07), ContractViolation);
}

TEST_CASE("imc: identical views with orthogonal queues are near zero and permutation invariant") {
  const double tau = 0.07;
  GlobalViews v;
  v.image_online = v.image_momentum = ag::constant(basis_rows(2, 4, 0));
  v.text_online = v.text_momentum = ag::constant(basis_rows(2, 4, 1));
  const auto tq = filled_queue(basis_rows(16, 4, 2), momentum::QueueKind::text);
  const auto iq = filled_queue(basis_rows(16, 4, 3), momentum::QueueKind::image);
  const double expect = std::log1p(16.0 * std::exp(-1.0 / tau));
  CHECK(std::abs(ag::item(imc_loss(v, tq, iq, tau)) - expect) < 1e-12);

  Rng rng(5);
  GlobalViews r{ag::constant(random_unit_rows(3, 6, rng)), ag::constant(random_unit_rows(3, 6, rng)),
                ag::constant(random_unit_rows(3, 6, rng)), ag::constant(random_unit_rows(3, 6, rng))};
  Matrix tn = random_unit_rows(9, 6, rng), in = random_unit_rows(9, 6, rng);
  const double base = ag::item(imc_loss(r, filled_queue(tn, momentum::QueueKind::text),
                                        filled_queue(in, momentum::QueueKind::image), tau));
  Matrix tp(9, 6), ip(9, 6);
  for (std::size_t i = 0; i < 9; ++i) {
    std::copy(tn.row(8 - i).begin(), tn.row(8 - i).end(), tp.row(i).begin());
    std::copy(in.row((i * 4) % 9).begin(), in.row((i * 4) % 9).end(), ip.row(i).begin());
  }
  CHECK(ag::item(imc_loss(r, filled_queue(tp, momentum::QueueKind::text),
                          filled_queue(ip, momentum::QueueKind::image), tau)) ==
        doctest::Approx(base).epsilon(1e-13));
}

TEST_CASE("pooling: 256 to 16, identity target, constant fields") {
  const Matrix p = pooling_matrix(256, 16);
  CHECK(p.rows() == 16);
  CHECK(p.cols() == 256);
  Rng rng(6);
  const Matrix x = test::random_matrix(64, 5, rng);
  CHECK(pool_patches(x, 64) == x);
  const Matrix c(64, 3, 0.37);
  const Matrix pooled = pool_patches(c, 16);
  for (double v : pooled.storage()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  CHECK_THROWS_AS(pooling_matrix(60, 4), ConfigError);
  CHECK_THROWS_AS(pooling_matrix(64, 9), ConfigError);
}

TEST_CASE("pooling: block average over the patch grid") {
  Matrix x(16, 1);
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const Matrix pooled = pool_patches(x, 4);
  // 4x4 grid, 2x2 blocks.
  CHECK(pooled[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(pooled[1] == doctest::Approx((2 + 3 + 6 + 7) / 4.0));
  CHECK(pooled[2] == doctest::Approx((8 + 9 + 12 + 13) / 4.0));
  CHECK(pooled[3] == doctest::Approx((10 + 11 + 14 + 15) / 4.0));
}

TEST_CASE("lmi: single sample has no negatives") {
  Rng rng(7);
  LmiInputs in{ag::constant(random_unit_rows(1, 4, rng)), ag::constant(random_unit_rows(4, 4, rng)),
               ag::constant(random_unit_rows(1, 4, rng)), ag::constant(random_unit_rows(5, 4, rng)),
               {}};
  bool degenerate = false;
  CHECK(ag::item(lmi_loss(in, 0.07, &degenerate)) == 0.0);
  CHECK(degenerate);
}

TEST_CASE("lmi: two samples with aligned own locals match the closed form") {
  const std::size_t m = 4;
  Matrix anchors(2, 3, 0.0), locals(2 * m, 3, 0.0);
  anchors(0, 0) = anchors(1, 1) = 1.0;
  for (std::size_t i = 0; i < m; ++i) locals(i, 0) = locals(m + i, 1) = 1.0;
  const double e = std::exp(1.0);
  const double expect = -std::log(e / (e + static_cast<double>(m)));
  CHECK(ag::item(local_infonce(ag::constant(anchors), ag::constant(locals), {}, 1.0)) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("lmi: padded text positions are excluded") {
  Rng rng(8);
  const std::size_t n = 6;
  const Matrix anchors = random_unit_rows(2, 4, rng), locals = random_unit_rows(2 * n, 4, rng);
  std::vector<std::uint8_t> valid(2 * n, 0);
  valid[0] = valid[1] = 1;             // sample 0: [CLS] + 2 tokens
  valid[n] = valid[n + 1] = valid[n + 2] = 1;
  Matrix compact(4, 4);
  // Same data with padding removed; both samples then have 2 locals each,
  // except that sample 1 has 3, so compare against a direct computation.
  double total = 0.0;
  const std::vector<std::vector<std::size_t>> own{{0, 1}, {n, n + 1, n + 2}};
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& other = own[1 - b];
    double neg = 0.0;
    for (std::size_t r : other) neg += std::exp(dot(anchors.row(b), locals.row(r)) / 0.2);
    double per = 0.0;
    for (std::size_t r : own[b]) {
      const double pos = std::exp(dot(anchors.row(b), locals.row(r)) / 0.2);
      per += -std::log(pos / (pos + neg));
    }
    total += per / static_cast<double>(own[b].size());
  }
  CHECK(ag::item(local_infonce(ag::constant(anchors), ag::constant(locals), valid, 0.2)) ==
        doctest::Approx(total / 2.0).epsilon(1e-12));
}

TEST_CASE("itm: perfect and uniform classifiers") {
  Matrix perfect(4, 2);
  const std::vector<int> labels{1, 1, 0, 0};
  for (std::size_t r = 0; r < 4; ++r) {
    perfect(r, 0) = labels[r] ? -30.0 : 30.0;
    perfect(r, 1) = -perfect(r, 0);
  }
  CHECK(ag::item(itm_loss(ag::constant(perfect), labels)) < 1e-12);
  CHECK(ag::item(itm_loss(ag::constant(Matrix(4, 2, 0.3)), labels)) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<int> bad{1, 2, 0, 0};
  CHECK_THROWS_AS(itm_loss(ag::constant(perfect), bad), ContractViolation);
}

TEST_CASE("itm: hard sampler never returns the matching partner over 1e5 draws") {
  Rng rng(9);
  const Matrix img = random_unit_rows(4, 4, rng), txt = random_unit_rows(4, 4, rng);
  Matrix sim(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) sim(i, j) = dot(img.row(i), txt.row(j));
  sim(0, 0) = 50.0;  // a dominant match must still be excluded
  std::size_t draws = 0;
  for (int t = 0; draws < 100000; ++t) {
    const auto neg = sample_itm_negatives(sim, 0.07, t % 2 ? ItmSampling::hard : ItmSampling::uniform, rng);
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(neg.text_for_image[i] != i);
      REQUIRE(neg.image_for_text[i] != i);
      REQUIRE(neg.text_for_image[i] < 4);
      REQUIRE(neg.image_for_text[i] < 4);
    }
    draws += 8;
  }
  Rng r2(1);
  const auto single = sample_itm_negatives(Matrix(1, 1, 0.0), 0.07, ItmSampling::hard, r2);
  CHECK(single.text_for_image.empty());
}

TEST_CASE("itm: hard sampling favours similar candidates") {
  Matrix sim(3, 3, 0.0);
  sim(0, 1) = 0.5;  // text 1 is far more similar to image 0 than text 2 at tau 0.07
  Rng rng(10);
  std::size_t picked1 = 0;
  for (int t = 0; t < 2000; ++t)
    picked1 += sample_itm_negatives(sim, 0.07, ItmSampling::hard, rng).text_for_image[0] == 1;
  const double p1 = std::exp(0.5 / 0.07) / (std::exp(0.5 / 0.07) + 1.0);
  CHECK(std::abs(static_cast<double>(picked1) / 2000.0 - p1) < 0.03);
}

TEST_CASE("mlm: one-hot, uniform and empty cases") {
  const std::size_t v = 40;
  const std::vector<int> labels{3, 17, 39};
  Matrix onehot(3, v, 0.0);
  for (std::size_t r = 0; r < 3; ++r) onehot(r, static_cast<std::size_t>(labels[r])) = 20.0;
  CHECK(ag::item(mlm_loss(ag::constant(onehot), labels)) <= 1e-6);
  CHECK(ag::item(mlm_loss(ag::constant(Matrix(3, v, 1.5)), labels)) ==
        doctest::Approx(std::log(40.0)).epsilon(1e-12));
  CHECK(ag::item(mlm_loss(ag::constant(Matrix(0, v)), {})) == 0.0);
  const std::vector<int> oob{3, 17, 40};
  CHECK_THROWS_AS(mlm_loss(ag::constant(onehot), oob), ContractViolation);
}

TEST_CASE("total loss: sums present terms and rejects non-finite ones") {
  LossTerms t{ag::scalar(1), ag::scalar(1), ag::scalar(1), ag::scalar(1), ag::scalar(1)};
  CHECK(ag::item(total_loss(t).total) == 5.0);
  LossTerms albef{ag::scalar(0.5), nullptr, nullptr, ag::scalar(0.25), ag::scalar(2.0)};
  const auto r = total_loss(albef);
  CHECK(r.report.total == 2.75);
  CHECK(r.report.imc == 0.0);
  LossTerms only_mlm{nullptr, nullptr, nullptr, nullptr, ag::scalar(3.0)};
  CHECK(ag::item(total_loss(only_mlm).total) == 3.0);
  LossTerms bad{ag::scalar(1), ag::scalar(std::nan("")), nullptr, nullptr, nullptr};
  CHECK_THROWS_AS(total_loss(bad), TrainingAborted);
}
