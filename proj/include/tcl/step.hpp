#pragma once

// Forward pass of one pre-training step: momentum and online encoders, fusion,
// and the five loss terms. Shared by the trainer and the gradient checker.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tcl/encoders.hpp"
#include "tcl/momentum.hpp"
#include "tcl/objectives.hpp"
#include "tcl/synthdata.hpp"

namespace tcl::training {

struct StepOptions {
  double tau = 0.07;
  objectives::NceVariant nce_variant = objectives::NceVariant::standard;
  objectives::LossGates gates;
  objectives::ItmSampling itm_sampling = objectives::ItmSampling::hard;
  bool lmi_pool = true;
  std::size_t lmi_pool_target = 16;
  bool lmi_from_tap = false;
};

struct BatchOptions {
  data::Strength strength = data::Strength::strong;
  data::AugmentConfig augment;
  double mask_rate = 0.15;
  data::MaskSplit mask_split;
};

struct StepBatch {
  std::vector<data::Image> view_a;  // I1, online branch
  std::vector<data::Image> view_b;  // I2, momentum branch
  std::vector<data::TokenIds> captions;
  std::vector<data::MaskedText> masked;
  std::uint64_t dropout_online = 0;    // T
  std::uint64_t dropout_momentum = 0;  // T+
  std::uint64_t dropout_masked = 0;    // T^msk
  std::uint64_t itm_seed = 0;
  // When set, ITM negatives are taken from here instead of being sampled.
  std::optional<objectives::ItmNegatives> fixed_itm;

  std::size_t size() const { return captions.size(); }
};

// Augments, masks and seeds the samples `indices` of `pairs` for one step.
StepBatch make_step_batch(std::span<const data::SyntheticPair> pairs,
                          std::span<const std::size_t> indices, std::uint64_t step_seed,
                          const BatchOptions& opts);

struct StepForward {
  objectives::LossTerms terms;
  Matrix momentum_image_cls;  // f^_v(v^_cls) of I2, to be enqueued
  Matrix momentum_text_cls;   // f^_t(t^_cls) of T+, to be enqueued
  objectives::ItmNegatives itm;
  bool lmi_degenerate = false;
};

StepForward forward_losses(const model::OnlineModel& online, const model::ShadowModel& shadow,
                           const momentum::NegativeQueue& text_queue,
                           const momentum::NegativeQueue& image_queue, const StepBatch& batch,
                           const StepOptions& opts);

}  // namespace tcl::training
