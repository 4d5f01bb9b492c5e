#include "tcl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcl/encoders.hpp"
#include "tcl/errors.hpp"
#include "tcl/rng.hpp"
#include "tcl/step.hpp"

namespace tcl::evaluation {

// --- retrieval ----------------------------------------------------------------

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  require(target < scores.size(), "rank_of: target out of range");
  const double s = scores[target];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < target)) ++rank;
  return rank;
}

namespace {

void add_hit(Recall& r, std::size_t rank) {
  if (rank < 1) r.r1 += 1;
  if (rank < 5) r.r5 += 1;
  if (rank < 10) r.r10 += 1;
}

}  // namespace

RetrievalResult retrieval_from_similarity(const Matrix& sim) {
  const std::size_t n = sim.rows();
  require(n >= 1 && sim.cols() == n, "retrieval: similarity matrix must be square and non-empty");
  RetrievalResult res;
  res.n_queries = n;
  std::vector<double> column(n);
  for (std::size_t i = 0; i < n; ++i) {
    add_hit(res.tr, rank_of(sim.row(i), i));
    for (std::size_t j = 0; j < n; ++j) column[j] = sim(j, i);
    add_hit(res.ir, rank_of(column, i));
  }
  for (Recall* r : {&res.tr, &res.ir}) {
    r->r1 /= static_cast<double>(n);
    r->r5 /= static_cast<double>(n);
    r->r10 /= static_cast<double>(n);
  }
  res.mean_recall = (res.tr.r1 + res.tr.r5 + res.tr.r10 + res.ir.r1 + res.ir.r5 + res.ir.r10) / 6.0;
  return res;
}

RetrievalResult retrieval_eval(const Matrix& image_embeddings, const Matrix& text_embeddings) {
  require(image_embeddings.cols() == text_embeddings.cols(),
          "retrieval_eval: embedding dimension mismatch (" + std::to_string(image_embeddings.cols()) +
              " vs " + std::to_string(text_embeddings.cols()) + ")");
  require(image_embeddings.rows() == text_embeddings.rows(),
          "retrieval_eval: one text per image expected");
  const std::size_t n = image_embeddings.rows(), d = image_embeddings.cols();
  Matrix sim(n, n);
  kernels::gemm_nt(image_embeddings.data(), text_embeddings.data(), sim.data(), n, d, n, false);
  return retrieval_from_similarity(sim);
}

// --- mutual information -------------------------------------------------------

void DiscreteJoint::validate() const {
  require(!p.empty(), "joint: empty table");
  double total = 0.0;
  for (double v : p.storage()) {
    require(std::isfinite(v) && v >= 0.0, "joint: entries must be finite and >= 0");
    total += v;
  }
  require(std::abs(total - 1.0) < 1e-9, "joint: entries must sum to 1 (got " + std::to_string(total) + ")");
}

std::vector<double> DiscreteJoint::marginal_x() const {
  std::vector<double> m(p.rows(), 0.0);
  for (std::size_t x = 0; x < p.rows(); ++x)
    for (std::size_t y = 0; y < p.cols(); ++y) m[x] += p(x, y);
  return m;
}

std::vector<double> DiscreteJoint::marginal_y() const {
  std::vector<double> m(p.cols(), 0.0);
  for (std::size_t x = 0; x < p.rows(); ++x)
    for (std::size_t y = 0; y < p.cols(); ++y) m[y] += p(x, y);
  return m;
}

double exact_mi(const DiscreteJoint& joint) {
  joint.validate();
  const auto px = joint.marginal_x(), py = joint.marginal_y();
  double mi = 0.0;
  for (std::size_t x = 0; x < joint.p.rows(); ++x)
    for (std::size_t y = 0; y < joint.p.cols(); ++y) {
      const double pxy = joint.p(x, y);
      if (pxy > 0.0) mi += pxy * std::log(pxy / (px[x] * py[y]));
    }
  return std::max(0.0, mi);
}

DiscreteJoint independent_joint(std::span<const double> px, std::span<const double> py) {
  DiscreteJoint j{Matrix(px.size(), py.size())};
  for (std::size_t x = 0; x < px.size(); ++x)
    for (std::size_t y = 0; y < py.size(); ++y) j.p(x, y) = px[x] * py[y];
  return j;
}

DiscreteJoint correlated_joint(std::size_t symbols) {
  DiscreteJoint j{Matrix(symbols, symbols)};
  for (std::size_t i = 0; i < symbols; ++i) j.p(i, i) = 1.0 / static_cast<double>(symbols);
  return j;
}

DiscreteJoint regression_joint(std::uint64_t seed, std::size_t symbols) {
  Rng rng(mix_seed(seed, 0x301a7));
  const double alpha = rng.uniform();
  std::vector<std::size_t> perm(symbols);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = symbols; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  Matrix noise(symbols, symbols);
  double z = 0.0;
  for (double& v : noise.storage()) z += (v = std::exp(rng.normal()));
  DiscreteJoint j{Matrix(symbols, symbols)};
  for (std::size_t x = 0; x < symbols; ++x)
    for (std::size_t y = 0; y < symbols; ++y)
      j.p(x, y) = (1.0 - alpha) * noise(x, y) / z +
                  (perm[x] == y ? alpha / static_cast<double>(symbols) : 0.0);
  return j;
}

namespace {

std::size_t sample_cdf(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform() * cdf.back();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::vector<double> cumulative(std::span<const double> p) {
  std::vector<double> c(p.size());
  std::partial_sum(p.begin(), p.end(), c.begin());
  return c;
}

// InfoNCE loss of one (x, y+) draw with K marginal negatives. When `grad` is
// given, accumulates d loss / d f into it.
double critic_loss(const Matrix& f, std::size_t x, std::size_t y, std::span<const std::size_t> negs,
                   Matrix* grad, double weight) {
  double mx = f(x, y);
  for (std::size_t k : negs) mx = std::max(mx, f(x, k));
  double z = std::exp(f(x, y) - mx);
  for (std::size_t k : negs) z += std::exp(f(x, k) - mx);
  if (grad) {
    (*grad)(x, y) += weight * (std::exp(f(x, y) - mx) / z - 1.0);
    for (std::size_t k : negs) (*grad)(x, k) += weight * std::exp(f(x, k) - mx) / z;
  }
  return -(f(x, y) - mx) + std::log(z);
}

}  // namespace

NceCheckResult nce_bound_check(const DiscreteJoint& joint, const NceCheckConfig& cfg) {
  joint.validate();
  require(cfg.batch >= 1 && cfg.eval_samples >= 1, "nce_bound_check: empty batch or evaluation set");
  const std::size_t nx = joint.p.rows(), ny = joint.p.cols(), k = cfg.negatives;
  const std::vector<double> joint_cdf = cumulative(joint.p.storage());
  const std::vector<double> y_cdf = cumulative(joint.marginal_y());
  Rng rng(mix_seed(cfg.seed, 0xc417));

  Matrix f(nx, ny), grad(nx, ny), m(nx, ny), v(nx, ny);
  std::vector<std::size_t> negs(k);
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  const double b1 = 0.9, b2 = 0.999;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    grad.fill(0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t cell = sample_cdf(joint_cdf, rng);
      for (auto& n : negs) n = sample_cdf(y_cdf, rng);
      loss += critic_loss(f, cell / ny, cell % ny, negs, &grad, 1.0 / static_cast<double>(cfg.batch));
    }
    losses.push_back(loss / static_cast<double>(cfg.batch));
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < f.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grad[i];
      v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
      f[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
    }
  }

  NceCheckResult res;
  double eval_loss = 0.0;
  for (std::size_t s = 0; s < cfg.eval_samples; ++s) {
    const std::size_t cell = sample_cdf(joint_cdf, rng);
    for (auto& n : negs) n = sample_cdf(y_cdf, rng);
    eval_loss += critic_loss(f, cell / ny, cell % ny, negs, nullptr, 0.0);
  }
  eval_loss /= static_cast<double>(cfg.eval_samples);

  const std::size_t w = std::min(cfg.variance_window, losses.size());
  if (w > 1) {
    const double mean = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(w), losses.end(), 0.0) /
                        static_cast<double>(w);
    double var = 0.0;
    for (auto it = losses.end() - static_cast<std::ptrdiff_t>(w); it != losses.end(); ++it)
      var += (*it - mean) * (*it - mean);
    res.loss_variance = var / static_cast<double>(w - 1);
  }
  res.inconclusive = res.loss_variance > cfg.variance_threshold;
  res.final_loss = eval_loss;
  res.bound = std::log(static_cast<double>(k + 1)) - eval_loss;
  res.exact = exact_mi(joint);
  res.margin = res.exact - res.bound;
  return res;
}

// --- gradient check -----------------------------------------------------------

std::string to_string(GradTerm t) {
  switch (t) {
    case GradTerm::cma: return "cma";
    case GradTerm::imc: return "imc";
    case GradTerm::lmi: return "lmi";
    case GradTerm::itm: return "itm";
    case GradTerm::mlm: return "mlm";
    case GradTerm::total: return "total";
  }
  return "?";
}

std::vector<GradTerm> all_grad_terms() {
  return {GradTerm::cma, GradTerm::imc, GradTerm::lmi, GradTerm::itm, GradTerm::mlm, GradTerm::total};
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

namespace {

objectives::LossGates gates_for(GradTerm t) {
  objectives::LossGates g{false, false, false, false, false};
  switch (t) {
    case GradTerm::cma: g.cma = true; break;
    case GradTerm::imc: g.imc = true; break;
    case GradTerm::lmi: g.lmi = true; break;
    case GradTerm::itm: g.itm = true; break;
    case GradTerm::mlm: g.mlm = true; break;
    case GradTerm::total: g = objectives::LossGates{}; break;
  }
  return g;
}

model::EncoderConfig micro_encoder() {
  model::EncoderConfig c;
  c.image_size = 16;
  c.patch = 4;
  c.d_model = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.vision_layers = 1;
  c.text_layers = 1;
  c.fusion_layers = 1;
  c.d_proj = 8;
  c.dropout = 0.1;
  return c;
}

}  // namespace

GradcheckReport gradcheck(const GradcheckConfig& cfg, std::span<const GradTerm> terms_in) {
  const std::vector<GradTerm> terms = terms_in.empty() ? all_grad_terms()
                                                       : std::vector<GradTerm>(terms_in.begin(), terms_in.end());
  require(cfg.batch >= 1 && cfg.batch <= 4 && cfg.queue <= 8, "gradcheck: micro config expects B <= 4, K <= 8");
  const model::EncoderConfig enc = micro_encoder();
  model::OnlineModel online(enc, mix_seed(cfg.seed, 0x6c));
  const model::ParamSet params = online.params();
  if (cfg.zero_parameters)
    for (const auto& p : params) p.var->value.fill(0.0);
  const model::ShadowModel shadow(online);

  momentum::NegativeQueue text_queue(std::max<std::size_t>(cfg.queue, 1), enc.d_proj, momentum::QueueKind::text);
  momentum::NegativeQueue image_queue(std::max<std::size_t>(cfg.queue, 1), enc.d_proj, momentum::QueueKind::image);
  if (cfg.queue > 0) {
    text_queue.warm_start(mix_seed(cfg.seed, 1));
    image_queue.warm_start(mix_seed(cfg.seed, 2));
  }

  data::DatasetOptions dopts;
  dopts.image_size = enc.image_size;
  const auto pairs = data::generate_dataset(cfg.batch, mix_seed(cfg.seed, 3), 2, dopts);
  std::vector<std::size_t> idx(cfg.batch);
  std::iota(idx.begin(), idx.end(), 0);
  training::BatchOptions bopts;
  bopts.mask_rate = 0.4;
  training::StepBatch batch = training::make_step_batch(pairs, idx, mix_seed(cfg.seed, 4), bopts);

  training::StepOptions sopts;
  sopts.tau = cfg.tau;
  sopts.lmi_pool_target = 4;
  {
    // Sample ITM negatives once and hold them fixed.
    const auto fwd = training::forward_losses(online, shadow, text_queue, image_queue, batch, sopts);
    batch.fixed_itm = fwd.itm;
  }

  auto loss_of = [&](GradTerm t) {
    training::StepOptions o = sopts;
    o.gates = gates_for(t);
    const auto fwd = training::forward_losses(online, shadow, text_queue, image_queue, batch, o);
    return objectives::total_loss(fwd.terms).total;
  };

  GradcheckReport report;
  std::vector<std::vector<Matrix>> analytic_by_term;
  for (GradTerm t : terms) {
    params.zero_grad();
    params.set_requires_grad(true);
    ag::backward(loss_of(t));
    std::vector<Matrix> analytic;
    for (const auto& p : params)
      analytic.push_back(p.var->has_grad() ? p.var->grad : Matrix(p.var->rows(), p.var->cols()));
    params.zero_grad();

    TermCheck check;
    check.term = t;
    params.set_requires_grad(false);
    Rng pick(mix_seed(cfg.seed, 0x9c));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& value = params[i].var->value;
      std::vector<std::size_t> entries(value.size());
      std::iota(entries.begin(), entries.end(), 0);
      if (cfg.max_entries > 0 && entries.size() > cfg.max_entries) {
        for (std::size_t k = 0; k < cfg.max_entries; ++k)
          std::swap(entries[k], entries[k + pick.below(entries.size() - k)]);
        entries.resize(cfg.max_entries);
      }
      for (std::size_t j : entries) {
        const double saved = value[j];
        value[j] = saved + cfg.step;
        const double up = ag::item(loss_of(t));
        value[j] = saved - cfg.step;
        const double down = ag::item(loss_of(t));
        value[j] = saved;
        const double numeric = (up - down) / (2.0 * cfg.step);
        const double a = analytic[i][j];
        const double err = relative_error(a, numeric);
        ++check.entries_checked;
        if (check.worst_param.empty() || err > check.max_rel_error) {
          check.max_rel_error = err;
          check.worst_param = params[i].name;
          check.worst_index = j;
          check.worst_analytic = a;
          check.worst_numeric = numeric;
        }
      }
    }
    params.set_requires_grad(true);
    check.passed = check.max_rel_error < cfg.tolerance;
    report.passed = report.passed && check.passed;
    report.terms.push_back(check);
    analytic_by_term.push_back(std::move(analytic));
  }

  // Linearity: grad(total) equals the sum of the five per-term gradients.
  const auto total_it = std::find(terms.begin(), terms.end(), GradTerm::total);
  if (total_it != terms.end() && terms.size() == 6) {
    const auto& total = analytic_by_term[static_cast<std::size_t>(total_it - terms.begin())];
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < total[i].size(); ++j) {
        double sum = 0.0;
        for (std::size_t t = 0; t < terms.size(); ++t)
          if (terms[t] != GradTerm::total) sum += analytic_by_term[t][i][j];
        report.linearity_error = std::max(report.linearity_error, std::abs(sum - total[i][j]));
      }
    report.passed = report.passed && report.linearity_error <= 1e-9;
  }
  return report;
}

}  // namespace tcl::evaluation
