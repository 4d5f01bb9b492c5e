#pragma once

// Toy-scale vision, text and fusion transformers plus projection, ITM and MLM
// heads. All modules are pre-norm transformers; linear layers compute x W + b
// with W stored as (in x out).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcl/autograd.hpp"
#include "tcl/rng.hpp"
#include "tcl/synthdata.hpp"

namespace tcl::model {

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vision_layers = 2;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t d_proj = 32;
  std::size_t vocab = data::vocab_size();
  std::size_t max_tokens = data::kMaxTokens;
  double dropout = 0.1;
  // Layer whose patch/token states are exposed as the intermediate tap.
  // 0 selects the default ceil(3L/4), kept strictly below L when L > 1.
  std::size_t vision_tap = 0;
  std::size_t text_tap = 0;

  std::size_t patches() const { return (image_size / patch) * (image_size / patch); }
  std::size_t resolved_vision_tap() const;
  std::size_t resolved_text_tap() const;
  void validate() const;
};

struct NamedParam {
  std::string name;
  ag::Var var;
};

// Ordered, named parameter list. Ordering is fixed by construction order.
class ParamSet {
 public:
  void add(std::string name, ag::Var var) { items_.push_back({std::move(name), std::move(var)}); }
  void append(const ParamSet& other, const std::string& prefix = "");

  std::size_t size() const { return items_.size(); }
  const NamedParam& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t scalar_count() const;
  const NamedParam* find(const std::string& name) const;

  void zero_grad() const;
  void set_requires_grad(bool on) const;
  // Copies values (not nodes) from a set with the same names and shapes.
  void copy_values_from(const ParamSet& other) const;

 private:
  std::vector<NamedParam> items_;
};

enum class Modality { vision, text };
enum class Source { online, momentum };

// Batched encoder output: `batch` sequences of `seq_len` rows each, row 0 of
// every sequence being the [CLS] state.
struct EmbeddingSet {
  ag::Var states;
  ag::Var tap_states;  // intermediate-layer states (same layout), may be null
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Modality modality = Modality::vision;
  Source source = Source::online;
  std::vector<std::uint8_t> valid;  // batch*seq_len, 0 marks [PAD]

  std::size_t local_count() const { return seq_len - 1; }
  std::size_t d_model() const { return states->cols(); }
  ag::Var cls() const;
  ag::Var locals(bool from_tap = false) const;  // batch*(seq_len-1) rows
  std::vector<std::uint8_t> local_valid() const;
};

struct Linear {
  ag::Var weight;
  ag::Var bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool requires_grad, bool with_bias = true);
  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct LayerNorm {
  ag::Var gain;
  ag::Var bias;

  LayerNorm() = default;
  LayerNorm(std::size_t dim, bool requires_grad);
  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct MultiHeadAttention {
  Linear query, key, value, out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng, bool requires_grad);
  // `kv_index`, when given, selects for each query sequence which source
  // sequence it attends to (keys/values are projected once per source).
  ag::Var operator()(const ag::Var& xq, const ag::Var& xkv, std::size_t q_len, std::size_t k_len,
                     std::vector<std::uint8_t> key_valid = {},
                     std::span<const std::size_t> kv_index = {}) const;
  void collect(ParamSet& ps, const std::string& prefix) const;
};

// Inverted dropout with masks drawn from a deterministic per-site seed.
class Dropout {
 public:
  Dropout(double rate, std::optional<std::uint64_t> seed) : rate_(rate), seed_(seed) {}
  ag::Var operator()(const ag::Var& x);
  bool active() const { return seed_.has_value() && rate_ > 0.0; }

 private:
  double rate_;
  std::optional<std::uint64_t> seed_;
  std::uint64_t site_ = 0;
};

struct TransformerBlock {
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  bool has_cross = false;
  LayerNorm ln_cross;
  MultiHeadAttention cross;
  LayerNorm ln_mlp;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(const EncoderConfig& cfg, bool cross_attention, Rng& rng, bool requires_grad);
  void collect(ParamSet& ps, const std::string& prefix) const;
};

// Splits a channel-major image into (H/p)*(W/p) row-major patches, each
// flattened channel-major to channels*p*p values.
Matrix patchify(const data::Image& image, std::size_t patch);

class VisionEncoder {
 public:
  VisionEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad = true);

  // Layer-0 input: [CLS] + linearly embedded patches, plus positional embeddings.
  ag::Var embed(const Matrix& patches, std::size_t batch) const;
  EmbeddingSet encode(const Matrix& patches, std::size_t batch) const;
  EmbeddingSet encode(std::span<const data::Image* const> images) const;

  ParamSet params() const;
  const EncoderConfig& config() const { return cfg_; }
  Source source() const { return source_; }
  void set_source(Source s) { source_ = s; }

 private:
  EncoderConfig cfg_;
  Source source_ = Source::online;
  Linear patch_embed_;
  ag::Var cls_token_;
  ag::Var pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad = true);

  // With a dropout seed, dropout is active regardless of training mode.
  EmbeddingSet encode(std::span<const data::TokenIds> ids,
                      std::optional<std::uint64_t> dropout_seed = std::nullopt) const;

  ParamSet params() const;
  const EncoderConfig& config() const { return cfg_; }
  Source source() const { return source_; }
  void set_source(Source s) { source_ = s; }

 private:
  EncoderConfig cfg_;
  Source source_ = Source::online;
  ag::Var token_embed_;
  ag::Var pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
};

struct FusionOutput {
  ag::Var joint_cls;     // n x d
  ag::Var token_states;  // n*max_tokens x d
  ag::Var itm_logits;    // n x 2
  std::size_t count = 0;
  std::size_t seq_len = 0;
};

struct FusionOptions {
  bool skip_cross_attention = false;
};

class FusionEncoder {
 public:
  FusionEncoder(const EncoderConfig& cfg, Rng& rng, bool requires_grad = true);

  // Fuses image sequence image_index[i] with text sequence text_index[i].
  FusionOutput fuse(const EmbeddingSet& image, std::span<const std::size_t> image_index,
                    const EmbeddingSet& text, std::span<const std::size_t> text_index,
                    const FusionOptions& opts = {}) const;
  // Vocabulary logits at (fusion sample, token position) pairs flattened as
  // sample*seq_len + position.
  ag::Var mlm_logits(const FusionOutput& out, std::span<const std::size_t> flat_positions) const;

  ParamSet params() const;
  std::vector<TransformerBlock>& blocks() { return blocks_; }

 private:
  EncoderConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear itm_head_;
  Linear mlm_head_;
};

enum class ProjectionRole { f_v, f_t, f_v_momentum, f_t_momentum };
enum class ProjectWhich { cls, locals, pooled_locals };

// Linear map d_model -> d_proj followed by L2 normalization (eps 1e-12 added
// to the norm, so a zero vector maps to zero).
struct ProjectionHead {
  ag::Var weight;
  ProjectionRole role = ProjectionRole::f_v;

  ProjectionHead() = default;
  ProjectionHead(const EncoderConfig& cfg, ProjectionRole role, Rng& rng, bool requires_grad);
  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct ProjectOptions {
  std::size_t pool_target = 16;  // used by pooled_locals
  bool from_tap = false;
};

ag::Var project(const EmbeddingSet& set, const ProjectionHead& head, ProjectWhich which,
                const ProjectOptions& opts = {});

// Online model: encoders, fusion and heads.
struct OnlineModel {
  EncoderConfig cfg;
  VisionEncoder vision;
  TextEncoder text;
  FusionEncoder fusion;
  ProjectionHead proj_v;
  ProjectionHead proj_t;

  OnlineModel(const EncoderConfig& cfg, std::uint64_t seed);
  OnlineModel(const EncoderConfig& cfg, Rng&& rng);
  ParamSet params() const;
};

// EMA shadow of the vision/text encoders and their projection heads.
struct ShadowModel {
  VisionEncoder vision;
  TextEncoder text;
  ProjectionHead proj_v;
  ProjectionHead proj_t;

  explicit ShadowModel(const OnlineModel& online);
  ShadowModel(const OnlineModel& online, Rng&& rng);
  ParamSet params() const;
};

// Online parameters in the same order as ShadowModel::params().
ParamSet momentum_tracked_params(const OnlineModel& online);

}  // namespace tcl::model
