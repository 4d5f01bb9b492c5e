#pragma once

// Zero-shot retrieval metrics, the exact-MI oracle with a trained-critic
// InfoNCE bound check, and the finite-difference gradient checker.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcl/matrix.hpp"
#include "tcl/objectives.hpp"

namespace tcl::evaluation {

// --- retrieval ------------------------------------------------------------

struct Recall {
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
};

struct RetrievalResult {
  Recall tr;  // image query, text targets
  Recall ir;  // text query, image targets
  double mean_recall = 0.0;
  std::size_t n_queries = 0;
};

// 0-based rank of `target` when `scores` is sorted descending, ties broken by
// the smaller index first.
std::size_t rank_of(std::span<const double> scores, std::size_t target);

// Image i is matched with text i. Rows must be unit vectors of equal dimension.
RetrievalResult retrieval_eval(const Matrix& image_embeddings, const Matrix& text_embeddings);

// Same, from a precomputed image x text similarity matrix.
RetrievalResult retrieval_from_similarity(const Matrix& sim);

// --- mutual information ---------------------------------------------------

struct DiscreteJoint {
  Matrix p;  // |X| x |Y|

  void validate() const;  // throws ContractViolation
  std::vector<double> marginal_x() const;
  std::vector<double> marginal_y() const;
};

double exact_mi(const DiscreteJoint& joint);

DiscreteJoint independent_joint(std::span<const double> px, std::span<const double> py);
DiscreteJoint correlated_joint(std::size_t symbols);  // uniform diagonal, MI = ln n
// Seeded 8x8 joint mixing a permuted diagonal with a random table.
DiscreteJoint regression_joint(std::uint64_t seed, std::size_t symbols = 8);

struct NceCheckConfig {
  std::size_t negatives = 63;  // K
  std::size_t steps = 3000;
  std::size_t batch = 128;
  double lr = 0.05;
  std::size_t eval_samples = 20000;
  std::size_t variance_window = 100;
  double variance_threshold = 0.05;
  std::uint64_t seed = 0;
};

struct NceCheckResult {
  double bound = 0.0;     // ln(K+1) - L_nce on fresh samples
  double exact = 0.0;
  double margin = 0.0;    // exact - bound
  double final_loss = 0.0;
  double loss_variance = 0.0;
  bool inconclusive = false;
};

// Trains a tabular critic f(x, y) with InfoNCE using negatives drawn from the
// y-marginal, then evaluates the bound on a fresh sample.
NceCheckResult nce_bound_check(const DiscreteJoint& joint, const NceCheckConfig& cfg);

// --- gradient check -------------------------------------------------------

enum class GradTerm { cma, imc, lmi, itm, mlm, total };

std::string to_string(GradTerm t);
std::vector<GradTerm> all_grad_terms();

struct GradcheckConfig {
  std::uint64_t seed = 0;
  std::size_t batch = 4;
  std::size_t queue = 8;
  double step = 1e-5;
  double tolerance = 1e-3;
  double tau = 0.07;
  bool zero_parameters = false;
  // Per tensor, number of entries compared; 0 checks every entry.
  std::size_t max_entries = 0;
};

struct TermCheck {
  GradTerm term = GradTerm::total;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<TermCheck> terms;
  double linearity_error = 0.0;  // max |grad(total) - sum of per-term grads|
  bool passed = true;
};

// |a - n| / max(|a|, |n|, 1e-6)
double relative_error(double analytic, double numeric);

GradcheckReport gradcheck(const GradcheckConfig& cfg,
                          std::span<const GradTerm> terms = {});

}  // namespace tcl::evaluation
