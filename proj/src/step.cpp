#include "tcl/step.hpp"

#include <numeric>

#include "tcl/errors.hpp"
#include "tcl/rng.hpp"

namespace tcl::training {

namespace {

std::vector<const data::Image*> pointers(const std::vector<data::Image>& images) {
  std::vector<const data::Image*> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(&im);
  return out;
}

Matrix value_of(const ag::Var& v) { return v->value; }

}  // namespace

StepBatch make_step_batch(std::span<const data::SyntheticPair> pairs,
                          std::span<const std::size_t> indices, std::uint64_t step_seed,
                          const BatchOptions& opts) {
  StepBatch batch;
  const std::size_t n = indices.size();
  batch.view_a.reserve(n);
  batch.view_b.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pair = pairs[indices[i]];
    auto views = data::augment(pair.image, mix_seed(step_seed, 1000 + i), opts.strength, opts.augment);
    batch.view_a.push_back(std::move(views.view_a));
    batch.view_b.push_back(std::move(views.view_b));
    batch.captions.push_back(pair.caption);
    batch.masked.push_back(
        data::mlm_mask(pair.caption, mix_seed(step_seed, 5000 + i), opts.mask_rate, opts.mask_split));
  }
  batch.dropout_online = mix_seed(step_seed, 11);
  batch.dropout_momentum = mix_seed(step_seed, 12);
  batch.dropout_masked = mix_seed(step_seed, 13);
  batch.itm_seed = mix_seed(step_seed, 14);
  return batch;
}

StepForward forward_losses(const model::OnlineModel& online, const model::ShadowModel& shadow,
                           const momentum::NegativeQueue& text_queue,
                           const momentum::NegativeQueue& image_queue, const StepBatch& batch,
                           const StepOptions& opts) {
  using model::ProjectWhich;
  const std::size_t b = batch.size();
  require(b >= 1 && batch.view_a.size() == b && batch.view_b.size() == b && batch.masked.size() == b,
          "forward_losses: inconsistent batch");
  const auto& g = opts.gates;
  StepForward out;

  // (1) momentum branch: I2 and T+ (dropout active), no graph.
  const auto view_b = pointers(batch.view_b);
  const model::EmbeddingSet img_m = shadow.vision.encode(view_b);
  const model::EmbeddingSet txt_m = shadow.text.encode(batch.captions, batch.dropout_momentum);
  const ag::Var zi_m = model::project(img_m, shadow.proj_v, ProjectWhich::cls);
  const ag::Var zt_m = model::project(txt_m, shadow.proj_t, ProjectWhich::cls);
  out.momentum_image_cls = value_of(zi_m);
  out.momentum_text_cls = value_of(zt_m);

  // (2) online branch: I1 and T.
  const auto view_a = pointers(batch.view_a);
  const model::EmbeddingSet img = online.vision.encode(view_a);
  const model::EmbeddingSet txt = online.text.encode(batch.captions, batch.dropout_online);
  const ag::Var zi = model::project(img, online.proj_v, ProjectWhich::cls);
  const ag::Var zt = model::project(txt, online.proj_t, ProjectWhich::cls);

  const objectives::GlobalViews views{zi, zi_m, zt, zt_m};
  if (g.cma)
    out.terms.cma = objectives::cma_loss(views, text_queue, image_queue, opts.tau, opts.nce_variant);
  if (g.imc)
    out.terms.imc = objectives::imc_loss(views, text_queue, image_queue, opts.tau, opts.nce_variant);

  if (g.lmi) {
    objectives::LmiInputs in;
    in.image_anchor = zi;
    in.text_anchor = zt;
    model::ProjectOptions po;
    po.pool_target = opts.lmi_pool_target;
    po.from_tap = opts.lmi_from_tap;
    in.image_locals = model::project(
        img_m, shadow.proj_v, opts.lmi_pool ? ProjectWhich::pooled_locals : ProjectWhich::locals, po);
    in.text_locals = model::project(txt_m, shadow.proj_t, ProjectWhich::locals, po);
    in.text_valid = txt_m.local_valid();
    out.terms.lmi = objectives::lmi_loss(in, opts.tau, &out.lmi_degenerate);
  }

  if (g.itm) {
    if (batch.fixed_itm) {
      out.itm = *batch.fixed_itm;
    } else {
      Matrix sim(b, b);
      kernels::gemm_nt(zi->value.data(), zt->value.data(), sim.data(), b, zi->cols(), b, false);
      Rng rng(batch.itm_seed);
      out.itm = objectives::sample_itm_negatives(sim, opts.tau, opts.itm_sampling, rng);
    }
    std::vector<std::size_t> image_index(b), text_index(b);
    std::iota(image_index.begin(), image_index.end(), 0);
    std::iota(text_index.begin(), text_index.end(), 0);
    std::vector<int> labels(b, 1);
    if (!out.itm.text_for_image.empty()) {
      for (std::size_t i = 0; i < b; ++i) {
        image_index.push_back(i);
        text_index.push_back(out.itm.text_for_image[i]);
      }
      for (std::size_t t = 0; t < b; ++t) {
        image_index.push_back(out.itm.image_for_text[t]);
        text_index.push_back(t);
      }
      labels.resize(3 * b, 0);
    }
    const model::FusionOutput fused = online.fusion.fuse(img, image_index, txt, text_index);
    out.terms.itm = objectives::itm_loss(fused.itm_logits, labels);
  }

  if (g.mlm) {
    std::vector<data::TokenIds> masked_ids(b);
    std::vector<std::size_t> positions;
    std::vector<int> labels;
    for (std::size_t i = 0; i < b; ++i) {
      masked_ids[i] = batch.masked[i].input_ids;
      for (std::size_t p : batch.masked[i].mask_positions) {
        positions.push_back(i * data::kMaxTokens + p);
        labels.push_back(batch.masked[i].labels[p]);
      }
    }
    if (positions.empty()) {
      out.terms.mlm = ag::scalar(0.0);
    } else {
      const model::EmbeddingSet txt_msk = online.text.encode(masked_ids, batch.dropout_masked);
      std::vector<std::size_t> index(b);
      std::iota(index.begin(), index.end(), 0);
      const model::FusionOutput fused = online.fusion.fuse(img, index, txt_msk, index);
      out.terms.mlm = objectives::mlm_loss(online.fusion.mlm_logits(fused, positions), labels);
    }
  }
  return out;
}

}  // namespace tcl::training
