#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "tcl/encoders.hpp"
#include "tcl/errors.hpp"

using namespace tcl;
using namespace tcl::model;

namespace {

std::vector<const data::Image*> pointers(const std::vector<data::SyntheticPair>& pairs) {
  std::vector<const data::Image*> out;
  for (const auto& p : pairs) out.push_back(&p.image);
  return out;
}

std::vector<data::TokenIds> captions(const std::vector<data::SyntheticPair>& pairs) {
  std::vector<data::TokenIds> out;
  for (const auto& p : pairs) out.push_back(p.caption);
  return out;
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.storage().begin(), m.storage().end(),
                     [](double v) { return std::isfinite(v); });
}

void zero_all(const ParamSet& ps) {
  for (const auto& p : ps) p.var->value.fill(0.0);
}

}  // namespace

TEST_CASE("patchify: patch counts") {
  data::Image big(3, 256, 256, 0.5);
  CHECK(patchify(big, 16).rows() == 256);
  data::Image img(3, 64, 64);
  CHECK(patchify(img, 8).rows() == 64);
}

TEST_CASE("patchify: a single patch is the flattened image") {
  Rng rng(1);
  data::Image img(3, 64, 64);
  for (double& v : img.pixels) v = rng.uniform();
  const Matrix p = patchify(img, 64);
  REQUIRE(p.rows() == 1);
  CHECK(p.storage() == img.pixels);
}

TEST_CASE("patchify: inverse reorder recovers the pixels") {
  Rng rng(2);
  data::Image img(3, 64, 64);
  for (double& v : img.pixels) v = rng.uniform();
  const std::size_t ps = 8, side = 8;
  const Matrix p = patchify(img, ps);
  data::Image back(3, 64, 64);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const std::size_t py = r / side, px = r % side;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          back.at(c, py * ps + y, px * ps + x) = p(r, (c * ps + y) * ps + x);
  }
  CHECK(back == img);
}

TEST_CASE("vision: zero parameters give zero states, embedding is the positional table") {
  const auto cfg = test::micro_encoder();
  Rng rng(3);
  VisionEncoder enc(cfg, rng);
  const Matrix zeros(cfg.patches(), cfg.channels * cfg.patch * cfg.patch, 0.0);
  const Matrix pos = enc.params().find("pos_embed")->var->value;
  for (const auto& p : enc.params())
    if (p.name != "pos_embed") p.var->value.fill(0.0);
  CHECK(enc.embed(zeros, 1)->value == pos);
  zero_all(enc.params());
  const auto set = enc.encode(zeros, 1);
  CHECK(set.states->value == Matrix(cfg.patches() + 1, cfg.d_model, 0.0));
}

TEST_CASE("vision: deterministic and finite") {
  const auto cfg = test::micro_encoder();
  data::DatasetOptions dopt;
  dopt.image_size = cfg.image_size;
  const auto pairs = data::generate_dataset(4, 1, 2, dopt);
  Rng ra(7), rb(7);
  VisionEncoder a(cfg, ra), b(cfg, rb);
  const auto ia = pointers(pairs);
  const auto sa = a.encode(ia), sb = b.encode(ia);
  CHECK(sa.states->value == sb.states->value);
  CHECK(all_finite(sa.states->value));
  CHECK(sa.local_count() == cfg.patches());
  CHECK(sa.locals()->rows() == 4 * cfg.patches());
}

TEST_CASE("vision: extreme but finite inputs stay finite") {
  const auto cfg = test::micro_encoder();
  Rng rng(4);
  VisionEncoder enc(cfg, rng);
  Matrix patches = test::random_matrix(2 * cfg.patches(), cfg.channels * cfg.patch * cfg.patch,
                                       rng, 1e6);
  CHECK(all_finite(enc.encode(patches, 2).states->value));
}

TEST_CASE("vision: swapping two patches swaps only their content term in layer-0 input") {
  const auto cfg = test::micro_encoder();
  Rng rng(5);
  VisionEncoder enc(cfg, rng);
  const Matrix patches =
      test::random_matrix(cfg.patches(), cfg.channels * cfg.patch * cfg.patch, rng);
  Matrix swapped = patches;
  const std::size_t i = 2, j = 9;
  for (std::size_t c = 0; c < patches.cols(); ++c) std::swap(swapped(i, c), swapped(j, c));
  const Matrix e = enc.embed(patches, 1)->value, s = enc.embed(swapped, 1)->value;
  const Matrix& pos = enc.params().find("pos_embed")->var->value;
  for (std::size_t r = 0; r < e.rows(); ++r) {
    if (r == 1 + i || r == 1 + j) continue;
    CHECK(std::equal(e.row(r).begin(), e.row(r).end(), s.row(r).begin()));
  }
  for (std::size_t c = 0; c < e.cols(); ++c) {
    // Content of patch j now sits at slot i with slot i's positional row.
    CHECK(s(1 + i, c) - pos(1 + i, c) == doctest::Approx(e(1 + j, c) - pos(1 + j, c)).epsilon(1e-12));
    CHECK(s(1 + j, c) - pos(1 + j, c) == doctest::Approx(e(1 + i, c) - pos(1 + i, c)).epsilon(1e-12));
  }
}

TEST_CASE("text: dropout seeds change the output, disabled dropout does not") {
  auto cfg = test::micro_encoder();
  const auto caps = captions(data::generate_dataset(3, 2, 2));
  Rng r1(6);
  TextEncoder enc(cfg, r1);
  const auto a = enc.encode(caps, 1), b = enc.encode(caps, 2), c = enc.encode(caps, 1);
  CHECK_FALSE(a.cls()->value == b.cls()->value);
  CHECK(a.cls()->value == c.cls()->value);
  CHECK_FALSE(a.cls()->value == enc.encode(caps).cls()->value);

  cfg.dropout = 0.0;
  Rng r2(6);
  TextEncoder plain(cfg, r2);
  CHECK(plain.encode(caps, 1).cls()->value == plain.encode(caps, 2).cls()->value);
  CHECK(plain.encode(caps, 1).cls()->value == plain.encode(caps).cls()->value);
}

TEST_CASE("text: pad positions are flagged as excluded locals") {
  const auto cfg = test::micro_encoder();
  Rng rng(7);
  TextEncoder enc(cfg, rng);
  data::TokenIds ids{};
  ids[0] = data::kCls;
  ids[1] = static_cast<std::uint16_t>(data::token_id("a"));
  ids[2] = static_cast<std::uint16_t>(data::token_id("red"));
  const std::vector<data::TokenIds> batch{ids};
  const auto set = enc.encode(batch);
  const auto valid = set.local_valid();
  REQUIRE(valid.size() == data::kMaxTokens - 1);
  CHECK(valid[0] == 1);
  CHECK(valid[1] == 1);
  for (std::size_t i = 2; i < valid.size(); ++i) CHECK(valid[i] == 0);
  CHECK(all_finite(set.states->value));
}

TEST_CASE("text: out-of-vocabulary ids are contract violations") {
  const auto cfg = test::micro_encoder();
  Rng rng(8);
  TextEncoder enc(cfg, rng);
  data::TokenIds ids{};
  ids[0] = 999;
  const std::vector<data::TokenIds> batch{ids};
  CHECK_THROWS_AS(enc.encode(batch), ContractViolation);
}

TEST_CASE("fusion: zero image states with zero cross-attention biases equal the text-only path") {
  const auto cfg = test::micro_encoder();
  OnlineModel model(cfg, 9);
  data::DatasetOptions dopt;
  dopt.image_size = cfg.image_size;
  const auto pairs = data::generate_dataset(3, 3, 2, dopt);
  auto image = model.vision.encode(pointers(pairs));
  image.states = ag::constant(Matrix(image.states->rows(), image.states->cols(), 0.0));
  const auto text = model.text.encode(captions(pairs));
  for (auto& block : model.fusion.blocks()) {
    block.cross.value.bias->value.fill(0.0);
    block.cross.out.bias->value.fill(0.0);
  }
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto with_cross = model.fusion.fuse(image, idx, text, idx);
  FusionOptions skip;
  skip.skip_cross_attention = true;
  const auto text_only = model.fusion.fuse(image, idx, text, idx, skip);
  CHECK(with_cross.token_states->value == text_only.token_states->value);
  CHECK(with_cross.itm_logits->value == text_only.itm_logits->value);
}

TEST_CASE("fusion: deterministic, ITM softmax normalised, momentum sets rejected") {
  const auto cfg = test::micro_encoder();
  OnlineModel model(cfg, 10);
  data::DatasetOptions dopt;
  dopt.image_size = cfg.image_size;
  const auto pairs = data::generate_dataset(4, 4, 2, dopt);
  const auto image = model.vision.encode(pointers(pairs));
  const auto text = model.text.encode(captions(pairs));
  const std::vector<std::size_t> ii{0, 1, 2, 3}, ti{1, 0, 3, 2};
  const auto a = model.fusion.fuse(image, ii, text, ti);
  const auto b = model.fusion.fuse(image, ii, text, ti);
  CHECK(a.itm_logits->value == b.itm_logits->value);
  for (std::size_t r = 0; r < a.count; ++r) {
    const double l0 = a.itm_logits->value(r, 0), l1 = a.itm_logits->value(r, 1);
    const double m = std::max(l0, l1);
    const double p0 = std::exp(l0 - m) / (std::exp(l0 - m) + std::exp(l1 - m));
    const double p1 = std::exp(l1 - m) / (std::exp(l0 - m) + std::exp(l1 - m));
    CHECK(p0 + p1 == doctest::Approx(1.0).epsilon(1e-6));
  }
  const std::vector<std::size_t> pos{0 * data::kMaxTokens + 2, 3 * data::kMaxTokens + 4};
  CHECK(model.fusion.mlm_logits(a, pos)->cols() == cfg.vocab);

  ShadowModel shadow(model);
  const auto mom = shadow.vision.encode(pointers(pairs));
  CHECK_THROWS_AS(model.fusion.fuse(mom, ii, text, ti), ContractViolation);
}

TEST_CASE("projection: unit norm, identity weight, scale invariance") {
  auto cfg = test::micro_encoder();
  cfg.d_proj = cfg.d_model;
  Rng rng(11);
  ProjectionHead head(cfg, ProjectionRole::f_v, rng, true);
  const Matrix x = test::random_matrix(5, cfg.d_model, rng);
  const Matrix y = head(ag::constant(x))->value;
  for (std::size_t r = 0; r < y.rows(); ++r) CHECK(l2_norm(y.row(r)) == doctest::Approx(1.0).epsilon(1e-6));

  Matrix x3 = x;
  for (double& v : x3.storage()) v *= 3.0;
  CHECK(test::max_abs_diff(head(ag::constant(x3))->value, y) < 1e-12);

  Matrix eye(cfg.d_model, cfg.d_model, 0.0);
  for (std::size_t i = 0; i < cfg.d_model; ++i) eye(i, i) = 1.0;
  head.weight->value = eye;
  const Matrix unit = test::random_unit_rows(5, cfg.d_model, rng);
  CHECK(test::max_abs_diff(head(ag::constant(unit))->value, unit) < 1e-12);
}

TEST_CASE("projection: role must match the embedding set") {
  const auto cfg = test::micro_encoder();
  OnlineModel model(cfg, 12);
  const auto caps = captions(data::generate_dataset(2, 1, 2));
  const auto text = model.text.encode(caps);
  CHECK_NOTHROW(project(text, model.proj_t, ProjectWhich::cls));
  CHECK_THROWS_AS(project(text, model.proj_v, ProjectWhich::cls), ContractViolation);
  CHECK_THROWS_AS(project(text, model.proj_t, ProjectWhich::pooled_locals), ContractViolation);
}

TEST_CASE("shadow model mirrors the tracked online parameters") {
  const auto cfg = test::micro_encoder();
  OnlineModel model(cfg, 13);
  ShadowModel shadow(model);
  const auto tracked = momentum_tracked_params(model);
  const auto sp = shadow.params();
  REQUIRE(tracked.size() == sp.size());
  for (std::size_t i = 0; i < sp.size(); ++i) {
    CHECK(tracked[i].name == sp[i].name);
    CHECK(tracked[i].var->value == sp[i].var->value);
    CHECK_FALSE(sp[i].var->requires_grad);
    CHECK(tracked[i].var != sp[i].var);
  }
}

TEST_CASE("encoder config validation") {
  auto cfg = test::micro_encoder();
  cfg.patch = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = test::micro_encoder();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = test::micro_encoder();
  cfg.vision_layers = 4;
  CHECK(cfg.resolved_vision_tap() == 3);
  cfg.vision_layers = 1;
  CHECK(cfg.resolved_vision_tap() == 1);
}
