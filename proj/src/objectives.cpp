#include "tcl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tcl/errors.hpp"

namespace tcl::objectives {

namespace {

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

void check_tau(double tau) {
  require_config(tau > 0.0 && std::isfinite(tau),
                 "temperature tau must be positive (got " + std::to_string(tau) + ")");
}

}  // namespace

ag::Var infonce(const ag::Var& anchors, const ag::Var& positives, const Matrix& negatives,
                double tau, NceVariant variant) {
  check_tau(tau);
  const std::size_t batch = anchors->rows(), dim = anchors->cols(), k = negatives.rows();
  require(batch >= 1, "infonce: empty anchor set");
  require(positives->rows() == batch && positives->cols() == dim,
          "infonce: positives must match anchors");
  require(k == 0 || negatives.cols() == dim, "infonce: negative dimension mismatch");
  require(variant == NceVariant::standard || k > 0,
          "infonce: the literal variant needs at least one negative");

  const double inv_tau = 1.0 / tau;
  Matrix neg_logits(batch, k);
  if (k > 0)
    kernels::gemm_nt(anchors->value.data(), negatives.data(), neg_logits.data(), batch, dim, k,
                     false);
  // Softmax weights: column 0 is the positive, 1..k the negatives.
  Matrix weights(batch, k + 1);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double pos = dot(anchors->value.row(b), positives->value.row(b)) * inv_tau;
    double mx = variant == NceVariant::standard ? pos : -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      neg_logits(b, j) *= inv_tau;
      mx = std::max(mx, neg_logits(b, j));
    }
    double z = 0.0;
    if (variant == NceVariant::standard) {
      weights(b, 0) = std::exp(pos - mx);
      z += weights(b, 0);
    }
    for (std::size_t j = 0; j < k; ++j) {
      weights(b, j + 1) = std::exp(neg_logits(b, j) - mx);
      z += weights(b, j + 1);
    }
    for (double& w : weights.row(b)) w /= z;
    total += -pos + mx + std::log(z);
  }
  const double loss = total / static_cast<double>(batch);

  return ag::make_op(Matrix(1, 1, loss), {anchors, positives},
                     [anchors, positives, negatives, weights = std::move(weights), inv_tau, batch,
                      dim, k](ag::Node& self) {
                       const double g = self.grad[0] / static_cast<double>(batch);
                       // d loss / d s+ = w+ - 1 ; d loss / d s_k = w_k   (w+ = 0 for literal)
                       Matrix dneg(batch, k);
                       std::vector<double> dpos(batch);
                       for (std::size_t b = 0; b < batch; ++b) {
                         dpos[b] = (weights(b, 0) - 1.0) * g * inv_tau;
                         for (std::size_t j = 0; j < k; ++j)
                           dneg(b, j) = weights(b, j + 1) * g * inv_tau;
                       }
                       if (anchors->requires_grad) {
                         Matrix& ga = anchors->grad_buffer();
                         if (k > 0)
                           kernels::gemm_nn(dneg.data(), negatives.data(), ga.data(), batch, k,
                                            dim, true);
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t d = 0; d < dim; ++d)
                             ga(b, d) += dpos[b] * positives->value(b, d);
                       }
                       if (positives->requires_grad) {
                         Matrix& gp = positives->grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t d = 0; d < dim; ++d)
                             gp(b, d) += dpos[b] * anchors->value(b, d);
                       }
                     });
}

namespace {

void check_queue(const momentum::NegativeQueue& q, momentum::QueueKind expected,
                 const char* role) {
  require(q.kind() == expected, std::string(role) + " must be the " +
                                    momentum::to_string(expected) + " queue, got the " +
                                    momentum::to_string(q.kind()) + " queue");
}

}  // namespace

ag::Var cma_loss(const GlobalViews& v, const momentum::NegativeQueue& text_queue,
                 const momentum::NegativeQueue& image_queue, double tau, NceVariant variant) {
  check_queue(text_queue, momentum::QueueKind::text, "cma_loss: text_queue");
  check_queue(image_queue, momentum::QueueKind::image, "cma_loss: image_queue");
  const ag::Var i2t = infonce(v.image_online, v.text_momentum, text_queue.negatives(), tau, variant);
  const ag::Var t2i = infonce(v.text_online, v.image_momentum, image_queue.negatives(), tau, variant);
  return ag::scale(ag::add(i2t, t2i), 0.5);
}

ag::Var imc_loss(const GlobalViews& v, const momentum::NegativeQueue& text_queue,
                 const momentum::NegativeQueue& image_queue, double tau, NceVariant variant) {
  check_queue(text_queue, momentum::QueueKind::text, "imc_loss: text_queue");
  check_queue(image_queue, momentum::QueueKind::image, "imc_loss: image_queue");
  const ag::Var t2t = infonce(v.text_online, v.text_momentum, text_queue.negatives(), tau, variant);
  const ag::Var i2i = infonce(v.image_online, v.image_momentum, image_queue.negatives(), tau, variant);
  return ag::scale(ag::add(t2t, i2i), 0.5);
}

Matrix pooling_matrix(std::size_t patches, std::size_t target) {
  const std::size_t side = exact_sqrt(patches), tside = exact_sqrt(target);
  require_config(side > 0, "pool_patches: patch count " + std::to_string(patches) +
                               " is not a perfect square");
  require_config(tside > 0 && side % tside == 0,
                 "pool_patches: target " + std::to_string(target) +
                     " must be a perfect square whose side divides " + std::to_string(side));
  const std::size_t block = side / tside;
  const double w = 1.0 / static_cast<double>(block * block);
  Matrix p(target, patches);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) p((y / block) * tside + x / block, y * side + x) = w;
  return p;
}

Matrix pool_patches(const Matrix& locals, std::size_t target) {
  const Matrix p = pooling_matrix(locals.rows(), target);
  Matrix out(target, locals.cols());
  kernels::gemm_nn(p.data(), locals.data(), out.data(), target, locals.rows(), locals.cols(), false);
  return out;
}

ag::Var pool_patches(const ag::Var& locals, std::size_t batch, std::size_t patches,
                     std::size_t target) {
  require(locals->rows() == batch * patches, "pool_patches: row count mismatch");
  const Matrix p = pooling_matrix(patches, target);
  if (target == patches) return locals;
  const std::size_t dim = locals->cols();
  Matrix out(batch * target, dim);
  for (std::size_t b = 0; b < batch; ++b)
    kernels::gemm_nn(p.data(), locals->value.data() + b * patches * dim,
                     out.data() + b * target * dim, target, patches, dim, false);
  return ag::make_op(std::move(out), {locals}, [locals, p, batch, patches, target, dim](ag::Node& self) {
    Matrix& g = locals->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      kernels::gemm_tn(p.data(), self.grad.data() + b * target * dim,
                       g.data() + b * patches * dim, patches, target, dim, true);
  });
}

ag::Var local_infonce(const ag::Var& anchors, const ag::Var& locals,
                      std::span<const std::uint8_t> valid, double tau) {
  check_tau(tau);
  const std::size_t batch = anchors->rows(), dim = anchors->cols();
  require(batch >= 1, "local_infonce: empty anchor set");
  require(locals->cols() == dim && locals->rows() % batch == 0,
          "local_infonce: locals must hold the same number of rows per sample");
  const std::size_t per = locals->rows() / batch, total_rows = locals->rows();
  require(valid.empty() || valid.size() == total_rows, "local_infonce: mask size mismatch");
  auto is_valid = [&](std::size_t r) { return valid.empty() || valid[r] != 0; };

  const double inv_tau = 1.0 / tau;
  Matrix logits(batch, total_rows);
  kernels::gemm_nt(anchors->value.data(), locals->value.data(), logits.data(), batch, dim,
                   total_rows, false);
  for (double& v : logits.storage()) v *= inv_tau;

  // dlogits holds d loss / d logit (before the 1/tau chain factor).
  Matrix dlogits(batch, total_rows);
  std::vector<std::size_t> pos_count(batch, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < per; ++i) pos_count[b] += is_valid(b * per + i) ? 1 : 0;
  const auto anchors_used = static_cast<double>(
      std::count_if(pos_count.begin(), pos_count.end(), [](std::size_t c) { return c > 0; }));

  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (pos_count[b] == 0) continue;
    auto row = logits.row(b);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < total_rows; ++r)
      if (is_valid(r)) mx = std::max(mx, row[r]);
    double neg_sum = 0.0;
    for (std::size_t r = 0; r < total_rows; ++r)
      if (r / per != b && is_valid(r)) neg_sum += std::exp(row[r] - mx);
    const double weight = 1.0 / (static_cast<double>(pos_count[b]) * anchors_used);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = b * per + i;
      if (!is_valid(r)) continue;
      const double e = std::exp(row[r] - mx);
      const double z = e + neg_sum;
      total += weight * (-(row[r] - mx) + std::log(z));
      dlogits(b, r) += weight * (e / z - 1.0);
      const double scale_neg = weight / z;
      for (std::size_t q = 0; q < total_rows; ++q)
        if (q / per != b && is_valid(q)) dlogits(b, q) += scale_neg * std::exp(row[q] - mx);
    }
  }

  return ag::make_op(Matrix(1, 1, anchors_used > 0 ? total : 0.0), {anchors, locals},
                     [anchors, locals, dlogits = std::move(dlogits), inv_tau, batch, dim,
                      total_rows](ag::Node& self) {
                       Matrix g = dlogits;
                       const double s = self.grad[0] * inv_tau;
                       for (double& v : g.storage()) v *= s;
                       if (anchors->requires_grad)
                         kernels::gemm_nn(g.data(), locals->value.data(),
                                          anchors->grad_buffer().data(), batch, total_rows, dim,
                                          true);
                       if (locals->requires_grad)
                         kernels::gemm_tn(g.data(), anchors->value.data(),
                                          locals->grad_buffer().data(), total_rows, batch, dim,
                                          true);
                     });
}

ag::Var lmi_loss(const LmiInputs& in, double tau, bool* degenerate) {
  if (degenerate) *degenerate = in.image_anchor->rows() < 2;
  const ag::Var image = local_infonce(in.image_anchor, in.image_locals, {}, tau);
  const ag::Var text = local_infonce(in.text_anchor, in.text_locals, in.text_valid, tau);
  return ag::scale(ag::add(image, text), 0.5);
}

ItmNegatives sample_itm_negatives(const Matrix& sim_i2t, double tau, ItmSampling mode, Rng& rng) {
  check_tau(tau);
  const std::size_t n = sim_i2t.rows();
  require(sim_i2t.cols() == n, "sample_itm_negatives: similarity matrix must be square");
  ItmNegatives out;
  if (n < 2) return out;

  auto draw = [&](auto weight_of, std::size_t self_index) {
    std::vector<double> w(n, 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != self_index) mx = std::max(mx, weight_of(j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self_index) continue;
      w[j] = mode == ItmSampling::hard ? std::exp((weight_of(j) - mx) / tau) : 1.0;
      z += w[j];
    }
    double u = rng.uniform() * z;
    std::size_t last = self_index == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self_index || w[j] <= 0.0) continue;
      last = j;
      if (u < w[j]) return j;
      u -= w[j];
    }
    return last;
  };

  out.text_for_image.resize(n);
  out.image_for_text.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.text_for_image[i] = draw([&](std::size_t j) { return sim_i2t(i, j); }, i);
  for (std::size_t t = 0; t < n; ++t)
    out.image_for_text[t] = draw([&](std::size_t j) { return sim_i2t(j, t); }, t);
  return out;
}

ag::Var itm_loss(const ag::Var& logits, std::span<const int> labels) {
  require(logits->cols() == 2 || logits->rows() == 0, "itm_loss: expected 2-way logits");
  for (int l : labels) require(l == 0 || l == 1, "itm_loss: labels must be 0 or 1");
  return ag::cross_entropy(logits, labels);
}

ag::Var mlm_loss(const ag::Var& logits, std::span<const int> labels) {
  require(logits->rows() == labels.size(), "mlm_loss: one label per masked position");
  if (labels.empty()) return ag::scalar(0.0);
  for (int l : labels)
    require(l >= 0 && static_cast<std::size_t>(l) < logits->cols(),
            "mlm_loss: label id " + std::to_string(l) + " >= vocabulary size");
  return ag::cross_entropy(logits, labels);
}

TotalLoss total_loss(const LossTerms& terms) {
  TotalLoss out;
  const std::pair<const char*, const ag::Var*> named[] = {{"cma", &terms.cma},
                                                           {"imc", &terms.imc},
                                                           {"lmi", &terms.lmi},
                                                           {"itm", &terms.itm},
                                                           {"mlm", &terms.mlm}};
  double* slots[] = {&out.report.cma, &out.report.imc, &out.report.lmi, &out.report.itm,
                     &out.report.mlm};
  ag::Var total = ag::scalar(0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const ag::Var& term = *named[i].second;
    if (!term) continue;
    const double v = ag::item(term);
    if (!std::isfinite(v))
      throw TrainingAborted(std::string("loss term ") + named[i].first + " is not finite (" +
                            std::to_string(v) + ")");
    *slots[i] = v;
    total = ag::add(total, term);
    sum += v;
  }
  out.total = total;
  out.report.total = sum;
  return out;
}

}  // namespace tcl::objectives
