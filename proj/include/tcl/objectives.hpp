#pragma once

// InfoNCE and the five pre-training loss terms (CMA, IMC, LMI, ITM, MLM).

#include <span>
#include <string>
#include <vector>

#include "tcl/autograd.hpp"
#include "tcl/momentum.hpp"
#include "tcl/rng.hpp"

namespace tcl::objectives {

// `standard` keeps the positive in the softmax denominator; `literal` sums
// over the negatives only.
enum class NceVariant { standard, literal };

// Mean over anchors of -log(exp(s+/tau) / (exp(s+/tau) + sum_k exp(s_k/tau)))
// with s+ = <anchor_b, positive_b> and s_k = <anchor_b, negative_k>.
// Negatives are constants. Rows are expected to be unit norm but this is not
// enforced (a zero-initialised model projects to zero vectors).
ag::Var infonce(const ag::Var& anchors, const ag::Var& positives, const Matrix& negatives,
                double tau, NceVariant variant = NceVariant::standard);

// Projected [CLS] vectors entering CMA and IMC.
struct GlobalViews {
  ag::Var image_online;    // f_v(v_cls) of view I1
  ag::Var image_momentum;  // f^_v(v^_cls) of view I2
  ag::Var text_online;     // f_t(t_cls) of T
  ag::Var text_momentum;   // f^_t(t^_cls) of T+ (momentum pass with dropout)
};

// 1/2 [nce(I1, T+, text queue) + nce(T, I2, image queue)]
ag::Var cma_loss(const GlobalViews& v, const momentum::NegativeQueue& text_queue,
                 const momentum::NegativeQueue& image_queue, double tau,
                 NceVariant variant = NceVariant::standard);

// 1/2 [nce(T, T+, text queue) + nce(I1, I2, image queue)]
ag::Var imc_loss(const GlobalViews& v, const momentum::NegativeQueue& text_queue,
                 const momentum::NegativeQueue& image_queue, double tau,
                 NceVariant variant = NceVariant::standard);

// Block-average pooling over a sqrt(M) x sqrt(M) patch grid down to `target`
// cells. Throws ConfigError for non-square counts or non-dividing targets.
Matrix pooling_matrix(std::size_t patches, std::size_t target);
Matrix pool_patches(const Matrix& locals, std::size_t target);
ag::Var pool_patches(const ag::Var& locals, std::size_t batch, std::size_t patches,
                     std::size_t target);

// Global-to-local InfoNCE for one modality. Anchor b's positives are its own
// valid locals (rows b*P .. b*P+P-1); its negatives are every valid local of
// the other samples. Averages over each anchor's positives, then over anchors
// that have at least one positive.
ag::Var local_infonce(const ag::Var& anchors, const ag::Var& locals,
                      std::span<const std::uint8_t> valid, double tau);

struct LmiInputs {
  ag::Var image_anchor;  // f_v(v_cls), B x d
  ag::Var image_locals;  // f^_v of pooled momentum patches of I2, B*M' x d
  ag::Var text_anchor;   // f_t(t_cls), B x d
  ag::Var text_locals;   // f^_t of momentum token states of T+, B*N x d
  std::vector<std::uint8_t> text_valid;  // B*N, 0 at [PAD]
};

// Sets *degenerate when the batch has a single sample (no in-batch negatives).
ag::Var lmi_loss(const LmiInputs& in, double tau, bool* degenerate = nullptr);

enum class ItmSampling { hard, uniform };

struct ItmNegatives {
  std::vector<std::size_t> text_for_image;  // negative text index per image
  std::vector<std::size_t> image_for_text;  // negative image index per text
};

// Draws one non-matching partner per image and per text. Hard sampling uses
// weights exp(sim/tau) over the non-matching in-batch candidates. Returns
// empty lists when the batch has a single sample.
ItmNegatives sample_itm_negatives(const Matrix& sim_i2t, double tau, ItmSampling mode, Rng& rng);

// Mean cross-entropy of 2-way matching logits (column 1 = matched).
ag::Var itm_loss(const ag::Var& logits, std::span<const int> labels);

// Mean cross-entropy over masked positions; 0 when nothing was masked.
ag::Var mlm_loss(const ag::Var& logits, std::span<const int> labels);

struct LossGates {
  bool cma = true;
  bool imc = true;
  bool lmi = true;
  bool itm = true;
  bool mlm = true;
};

// Disabled or not-computed terms are null.
struct LossTerms {
  ag::Var cma, imc, lmi, itm, mlm;
};

struct LossReport {
  double cma = 0.0;
  double imc = 0.0;
  double lmi = 0.0;
  double itm = 0.0;
  double mlm = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  ag::Var total;
  LossReport report;
};

// Unweighted sum of the present terms. Throws TrainingAborted on a non-finite term.
TotalLoss total_loss(const LossTerms& terms);

}  // namespace tcl::objectives
