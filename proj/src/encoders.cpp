#include "tcl/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "tcl/errors.hpp"
#include "tcl/objectives.hpp"

namespace tcl::model {

namespace {

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.storage()) v = stddev * rng.normal();
  return m;
}

std::size_t default_tap(std::size_t layers, std::size_t requested) {
  if (requested > 0) return std::min(requested, layers);
  std::size_t tap = (3 * layers + 3) / 4;
  if (layers > 1) tap = std::min(tap, layers - 1);
  return std::max<std::size_t>(tap, 1);
}

// Runs one pre-norm block over `batch` sequences of length `len`.
ag::Var run_block(const TransformerBlock& block, const ag::Var& x, std::size_t len,
                  const std::vector<std::uint8_t>& key_valid, Dropout* dropout,
                  const ag::Var& context = nullptr, std::size_t context_len = 0,
                  std::span<const std::size_t> context_index = {}) {
  auto maybe_drop = [&](const ag::Var& v) { return dropout ? (*dropout)(v) : v; };
  const ag::Var h = block.ln_attn(x);
  ag::Var y = ag::add(x, maybe_drop(block.attn(h, h, len, len, key_valid)));
  if (block.has_cross && context) {
    const ag::Var hc = block.ln_cross(y);
    y = ag::add(y, maybe_drop(block.cross(hc, context, len, context_len, {}, context_index)));
  }
  const ag::Var hm = block.ln_mlp(y);
  return ag::add(y, maybe_drop(block.fc2(ag::gelu(block.fc1(hm)))));
}

}  // namespace

std::size_t EncoderConfig::resolved_vision_tap() const {
  return default_tap(vision_layers, vision_tap);
}
std::size_t EncoderConfig::resolved_text_tap() const { return default_tap(text_layers, text_tap); }

void EncoderConfig::validate() const {
  require_config(patch > 0 && image_size % patch == 0,
                 "image_size " + std::to_string(image_size) + " is not divisible by patch " +
                     std::to_string(patch));
  require_config(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
  require_config(vision_layers > 0 && text_layers > 0 && fusion_layers > 0,
                 "layer counts must be positive");
  require_config(d_proj > 0 && mlp_ratio > 0, "d_proj and mlp_ratio must be positive");
  require_config(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
  require_config(max_tokens >= 2, "max_tokens must be >= 2");
}

// --- ParamSet ---------------------------------------------------------------

void ParamSet::append(const ParamSet& other, const std::string& prefix) {
  for (const auto& p : other) add(prefix + p.name, p.var);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.var->value.size();
  return n;
}

const NamedParam* ParamSet::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamSet::zero_grad() const {
  for (const auto& p : items_) p.var->grad = Matrix();
}

void ParamSet::set_requires_grad(bool on) const {
  for (const auto& p : items_) p.var->requires_grad = on;
}

void ParamSet::copy_values_from(const ParamSet& other) const {
  require(other.size() == size(), "copy_values_from: parameter count mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    require(items_[i].var->value.same_shape(other[i].var->value),
            "copy_values_from: shape mismatch at " + items_[i].name);
    items_[i].var->value = other[i].var->value;
  }
}

// --- EmbeddingSet -------------------------------------------------------------

ag::Var EmbeddingSet::cls() const {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq_len;
  return ag::gather_rows(states, rows);
}

ag::Var EmbeddingSet::locals(bool from_tap) const {
  const ag::Var& src = from_tap ? tap_states : states;
  require(src != nullptr, "EmbeddingSet: no intermediate tap recorded");
  std::vector<std::size_t> rows;
  rows.reserve(batch * (seq_len - 1));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 1; i < seq_len; ++i) rows.push_back(b * seq_len + i);
  return ag::gather_rows(src, rows);
}

std::vector<std::uint8_t> EmbeddingSet::local_valid() const {
  std::vector<std::uint8_t> out;
  out.reserve(batch * (seq_len - 1));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 1; i < seq_len; ++i)
      out.push_back(valid.empty() ? 1 : valid[b * seq_len + i]);
  return out;
}

// --- layers -------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool requires_grad, bool with_bias) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  weight = ag::parameter(random_normal(in, out, stddev, rng), requires_grad);
  if (with_bias) bias = ag::parameter(Matrix(1, out), requires_grad);
}

ag::Var Linear::operator()(const ag::Var& x) const {
  ag::Var y = ag::matmul(x, weight);
  return bias ? ag::add_row(y, bias) : y;
}

void Linear::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(prefix + ".weight", weight);
  if (bias) ps.add(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim, bool requires_grad)
    : gain(ag::parameter(Matrix(1, dim, 1.0), requires_grad)),
      bias(ag::parameter(Matrix(1, dim, 0.0), requires_grad)) {}

ag::Var LayerNorm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gain, bias); }

void LayerNorm::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(prefix + ".gain", gain);
  ps.add(prefix + ".bias", bias);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t h, Rng& rng,
                                       bool requires_grad)
    : query(dim, dim, rng, requires_grad),
      key(dim, dim, rng, requires_grad),
      value(dim, dim, rng, requires_grad),
      out(dim, dim, rng, requires_grad),
      heads(h) {}

ag::Var MultiHeadAttention::operator()(const ag::Var& xq, const ag::Var& xkv, std::size_t q_len,
                                       std::size_t k_len, std::vector<std::uint8_t> key_valid,
                                       std::span<const std::size_t> kv_index) const {
  require(q_len > 0 && xq->rows() % q_len == 0, "attention: query rows not divisible by length");
  const std::size_t batch = xq->rows() / q_len;
  ag::Var k = key(xkv);
  ag::Var v = value(xkv);
  if (!kv_index.empty()) {
    require(kv_index.size() == batch, "attention: kv_index size mismatch");
    std::vector<std::size_t> rows;
    rows.reserve(batch * k_len);
    for (std::size_t s : kv_index)
      for (std::size_t j = 0; j < k_len; ++j) rows.push_back(s * k_len + j);
    k = ag::gather_rows(k, rows);
    v = ag::gather_rows(v, rows);
  }
  kernels::AttentionShape shape{batch, q_len, k_len, xq->cols(), heads};
  return out(ag::attention(query(xq), k, v, shape, std::move(key_valid)));
}

void MultiHeadAttention::collect(ParamSet& ps, const std::string& prefix) const {
  query.collect(ps, prefix + ".query");
  key.collect(ps, prefix + ".key");
  value.collect(ps, prefix + ".value");
  out.collect(ps, prefix + ".out");
}

ag::Var Dropout::operator()(const ag::Var& x) {
  if (!active()) return x;
  Rng rng(mix_seed(*seed_, site_++));
  Matrix mask(x->rows(), x->cols());
  const double keep = 1.0 - rate_;
  for (double& m : mask.storage()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return ag::mul_const(x, mask);
}

TransformerBlock::TransformerBlock(const EncoderConfig& cfg, bool cross_attention, Rng& rng,
                                   bool requires_grad)
    : ln_attn(cfg.d_model, requires_grad),
      attn(cfg.d_model, cfg.heads, rng, requires_grad),
      has_cross(cross_attention),
      ln_mlp(cfg.d_model, requires_grad),
      fc1(cfg.d_model, cfg.d_model * cfg.mlp_ratio, rng, requires_grad),
      fc2(cfg.d_model * cfg.mlp_ratio, cfg.d_model, rng, requires_grad) {
  if (has_cross) {
    ln_cross = LayerNorm(cfg.d_model, requires_grad);
    cross = MultiHeadAttention(cfg.d_model, cfg.heads, rng, requires_grad);
  }
}

void TransformerBlock::collect(ParamSet& ps, const std::string& prefix) const {
  ln_attn.collect(ps, prefix + ".ln_attn");
  attn.collect(ps, prefix + ".attn");
  if (has_cross) {
    ln_cross.collect(ps, prefix + ".ln_cross");
    cross.collect(ps, prefix + ".cross");
  }
  ln_mlp.collect(ps, prefix + ".ln_mlp");
  fc1.collect(ps, prefix + ".fc1");
  fc2.collect(ps, prefix + ".fc2");
}

// --- vision -------------------------------------------------------------------

Matrix patchify(const data::Image& image, std::size_t patch) {
  require_config(patch > 0 && image.height % patch == 0 && image.width % patch == 0,
                 "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by patch " + std::to_string(patch));
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  Matrix out(gh * gw, image.channels * patch * patch);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      auto row = out.row(py * gw + px);
      std::size_t k = 0;
      for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            row[k++] = image.at(c, py * patch + y, px * patch + x);
    }
  return out;
}

VisionEncoder::VisionEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad)
    : cfg_(cfg),
      patch_embed_(cfg.channels * cfg.patch * cfg.patch, cfg.d_model, rng, requires_grad),
      cls_token_(ag::parameter(random_normal(1, cfg.d_model, 0.02, rng), requires_grad)),
      pos_embed_(ag::parameter(random_normal(cfg.patches() + 1, cfg.d_model, 0.02, rng),
                               requires_grad)),
      final_norm_(cfg.d_model, requires_grad) {
  cfg_.validate();
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    blocks_.emplace_back(cfg, false, rng, requires_grad);
}

ag::Var VisionEncoder::embed(const Matrix& patches, std::size_t batch) const {
  require(patches.rows() == batch * cfg_.patches() &&
              patches.cols() == cfg_.channels * cfg_.patch * cfg_.patch,
          "vision_encode: patch matrix shape does not match the encoder config");
  const ag::Var tokens = patch_embed_(ag::constant(patches));
  return ag::add_tiled(ag::prepend_row(cls_token_, tokens, batch), pos_embed_);
}

EmbeddingSet VisionEncoder::encode(const Matrix& patches, std::size_t batch) const {
  const std::size_t len = cfg_.patches() + 1;
  ag::Var x = embed(patches, batch);
  EmbeddingSet set;
  const std::size_t tap = cfg_.resolved_vision_tap();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = run_block(blocks_[l], x, len, {}, nullptr);
    if (l + 1 == tap) set.tap_states = x;
  }
  set.states = final_norm_(x);
  set.batch = batch;
  set.seq_len = len;
  set.modality = Modality::vision;
  set.source = source_;
  return set;
}

EmbeddingSet VisionEncoder::encode(std::span<const data::Image* const> images) const {
  const std::size_t m = cfg_.patches();
  Matrix all(images.size() * m, cfg_.channels * cfg_.patch * cfg_.patch);
  for (std::size_t b = 0; b < images.size(); ++b) {
    require(images[b]->height == cfg_.image_size && images[b]->width == cfg_.image_size,
            "vision_encode: image size does not match the encoder config");
    const Matrix p = patchify(*images[b], cfg_.patch);
    std::copy(p.storage().begin(), p.storage().end(), all.data() + b * m * all.cols());
  }
  return encode(all, images.size());
}

ParamSet VisionEncoder::params() const {
  ParamSet ps;
  patch_embed_.collect(ps, "patch_embed");
  ps.add("cls_token", cls_token_);
  ps.add("pos_embed", pos_embed_);
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    blocks_[l].collect(ps, "block" + std::to_string(l));
  final_norm_.collect(ps, "final_norm");
  return ps;
}

// --- text ---------------------------------------------------------------------

TextEncoder::TextEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad)
    : cfg_(cfg),
      token_embed_(ag::parameter(random_normal(cfg.vocab, cfg.d_model, 0.02, rng), requires_grad)),
      pos_embed_(ag::parameter(random_normal(cfg.max_tokens, cfg.d_model, 0.02, rng),
                               requires_grad)),
      final_norm_(cfg.d_model, requires_grad) {
  cfg_.validate();
  for (std::size_t l = 0; l < cfg.text_layers; ++l)
    blocks_.emplace_back(cfg, false, rng, requires_grad);
}

EmbeddingSet TextEncoder::encode(std::span<const data::TokenIds> ids,
                                 std::optional<std::uint64_t> dropout_seed) const {
  const std::size_t len = cfg_.max_tokens;
  require(len == data::kMaxTokens, "text_encode: max_tokens must match the token id width");
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> valid;
  rows.reserve(ids.size() * len);
  valid.reserve(ids.size() * len);
  for (const auto& seq : ids)
    for (std::size_t i = 0; i < len; ++i) {
      require(seq[i] < cfg_.vocab, "text_encode: token id " + std::to_string(seq[i]) +
                                       " >= vocabulary size");
      rows.push_back(seq[i]);
      valid.push_back(seq[i] != data::kPad ? 1 : 0);
    }
  Dropout dropout(cfg_.dropout, dropout_seed);
  ag::Var x = ag::add_tiled(ag::gather_rows(token_embed_, rows), pos_embed_);
  x = dropout(x);
  EmbeddingSet set;
  const std::size_t tap = cfg_.resolved_text_tap();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = run_block(blocks_[l], x, len, valid, &dropout);
    if (l + 1 == tap) set.tap_states = x;
  }
  set.states = final_norm_(x);
  set.batch = ids.size();
  set.seq_len = len;
  set.modality = Modality::text;
  set.source = source_;
  set.valid = std::move(valid);
  return set;
}

ParamSet TextEncoder::params() const {
  ParamSet ps;
  ps.add("token_embed", token_embed_);
  ps.add("pos_embed", pos_embed_);
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    blocks_[l].collect(ps, "block" + std::to_string(l));
  final_norm_.collect(ps, "final_norm");
  return ps;
}

// --- fusion -------------------------------------------------------------------

FusionEncoder::FusionEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad)
    : cfg_(cfg),
      final_norm_(cfg.d_model, requires_grad),
      itm_head_(cfg.d_model, 2, rng, requires_grad),
      mlm_head_(cfg.d_model, cfg.vocab, rng, requires_grad) {
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l)
    blocks_.emplace_back(cfg, true, rng, requires_grad);
}

FusionOutput FusionEncoder::fuse(const EmbeddingSet& image, std::span<const std::size_t> image_index,
                                 const EmbeddingSet& text, std::span<const std::size_t> text_index,
                                 const FusionOptions& opts) const {
  require(image.modality == Modality::vision && text.modality == Modality::text,
          "fuse: expected a vision set and a text set");
  require(image.source == Source::online && text.source == Source::online,
          "fuse: momentum embeddings never enter the fusion encoder");
  require(image_index.size() == text_index.size() && !image_index.empty(),
          "fuse: index lists must be non-empty and of equal length");
  const std::size_t n = text_index.size(), len = text.seq_len;
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> valid;
  rows.reserve(n * len);
  for (std::size_t t : text_index) {
    require(t < text.batch, "fuse: text index out of range");
    for (std::size_t i = 0; i < len; ++i) {
      rows.push_back(t * len + i);
      valid.push_back(text.valid.empty() ? 1 : text.valid[t * len + i]);
    }
  }
  for (std::size_t i : image_index) require(i < image.batch, "fuse: image index out of range");

  ag::Var x = ag::gather_rows(text.states, rows);
  for (const auto& block : blocks_) {
    x = run_block(block, x, len, valid, nullptr,
                  opts.skip_cross_attention ? nullptr : image.states, image.seq_len, image_index);
  }
  FusionOutput out;
  out.token_states = final_norm_(x);
  std::vector<std::size_t> cls_rows(n);
  for (std::size_t i = 0; i < n; ++i) cls_rows[i] = i * len;
  out.joint_cls = ag::gather_rows(out.token_states, cls_rows);
  out.itm_logits = itm_head_(out.joint_cls);
  out.count = n;
  out.seq_len = len;
  return out;
}

ag::Var FusionEncoder::mlm_logits(const FusionOutput& out,
                                  std::span<const std::size_t> flat_positions) const {
  if (flat_positions.empty()) return ag::constant(Matrix(0, cfg_.vocab));
  return mlm_head_(ag::gather_rows(out.token_states, flat_positions));
}

ParamSet FusionEncoder::params() const {
  ParamSet ps;
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    blocks_[l].collect(ps, "block" + std::to_string(l));
  final_norm_.collect(ps, "final_norm");
  itm_head_.collect(ps, "itm_head");
  mlm_head_.collect(ps, "mlm_head");
  return ps;
}

// --- projection ----------------------------------------------------------------

ProjectionHead::ProjectionHead(const EncoderConfig& cfg, ProjectionRole r, Rng& rng,
                               bool requires_grad)
    : weight(ag::parameter(
          random_normal(cfg.d_model, cfg.d_proj,
                        std::sqrt(2.0 / static_cast<double>(cfg.d_model + cfg.d_proj)), rng),
          requires_grad)),
      role(r) {}

ag::Var ProjectionHead::operator()(const ag::Var& x) const {
  return ag::l2_normalize_rows(ag::matmul(x, weight), 1e-12);
}

void ProjectionHead::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(prefix + ".weight", weight);
}

ag::Var project(const EmbeddingSet& set, const ProjectionHead& head, ProjectWhich which,
                const ProjectOptions& opts) {
  const bool momentum = set.source == Source::momentum;
  const ProjectionRole expected =
      set.modality == Modality::vision
          ? (momentum ? ProjectionRole::f_v_momentum : ProjectionRole::f_v)
          : (momentum ? ProjectionRole::f_t_momentum : ProjectionRole::f_t);
  require(head.role == expected, "project: head role does not match the embedding set");
  switch (which) {
    case ProjectWhich::cls: return head(set.cls());
    case ProjectWhich::locals: return head(set.locals(opts.from_tap));
    case ProjectWhich::pooled_locals:
      require(set.modality == Modality::vision, "project: pooling applies to image patches only");
      return head(objectives::pool_patches(set.locals(opts.from_tap), set.batch,
                                           set.local_count(), opts.pool_target));
  }
  return nullptr;
}

// --- models --------------------------------------------------------------------

OnlineModel::OnlineModel(const EncoderConfig& c, std::uint64_t seed) : OnlineModel(c, Rng(seed)) {}

OnlineModel::OnlineModel(const EncoderConfig& c, Rng&& rng)
    : cfg(c),
      vision(c, rng, true),
      text(c, rng, true),
      fusion(c, rng, true),
      proj_v(c, ProjectionRole::f_v, rng, true),
      proj_t(c, ProjectionRole::f_t, rng, true) {}

ParamSet OnlineModel::params() const {
  ParamSet ps;
  ps.append(vision.params(), "vision.");
  ps.append(text.params(), "text.");
  ps.append(fusion.params(), "fusion.");
  proj_v.collect(ps, "proj_v");
  proj_t.collect(ps, "proj_t");
  return ps;
}

ShadowModel::ShadowModel(const OnlineModel& online)
    : ShadowModel(online, Rng(0)) {}

ShadowModel::ShadowModel(const OnlineModel& online, Rng&& rng)
    : vision(online.cfg, rng, false),
      text(online.cfg, rng, false),
      proj_v(online.cfg, ProjectionRole::f_v_momentum, rng, false),
      proj_t(online.cfg, ProjectionRole::f_t_momentum, rng, false) {
  vision.set_source(Source::momentum);
  text.set_source(Source::momentum);
  params().copy_values_from(momentum_tracked_params(online));
}

ParamSet ShadowModel::params() const {
  ParamSet ps;
  ps.append(vision.params(), "vision.");
  ps.append(text.params(), "text.");
  proj_v.collect(ps, "proj_v");
  proj_t.collect(ps, "proj_t");
  return ps;
}

ParamSet momentum_tracked_params(const OnlineModel& online) {
  ParamSet ps;
  ps.append(online.vision.params(), "vision.");
  ps.append(online.text.params(), "text.");
  online.proj_v.collect(ps, "proj_v");
  online.proj_t.collect(ps, "proj_t");
  return ps;
}

}  // namespace tcl::model
