#include "tcl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "tcl/errors.hpp"

namespace tcl::config {

using training::TrainConfig;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

// --- value codecs ----------------------------------------------------------

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed and count keys share one codec");

void decode(const std::string& key, const std::string& s, std::size_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "a non-negative integer");
}
void decode(const std::string& key, const std::string& s, double& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "a number");
}
void decode(const std::string& key, const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "on") out = true;
  else if (s == "false" || s == "0" || s == "off") out = false;
  else bad_value(key, s, "a boolean (true/false)");
}
void decode(const std::string&, const std::string& s, std::string& out) { out = s; }
void decode(const std::string& key, const std::string& s, data::Strength& out) {
  if (s == "weak") out = data::Strength::weak;
  else if (s == "strong") out = data::Strength::strong;
  else bad_value(key, s, "weak|strong");
}
void decode(const std::string& key, const std::string& s, objectives::NceVariant& out) {
  if (s == "standard") out = objectives::NceVariant::standard;
  else if (s == "literal") out = objectives::NceVariant::literal;
  else bad_value(key, s, "standard|literal");
}
void decode(const std::string& key, const std::string& s, objectives::ItmSampling& out) {
  if (s == "hard") out = objectives::ItmSampling::hard;
  else if (s == "uniform") out = objectives::ItmSampling::uniform;
  else bad_value(key, s, "hard|uniform");
}

std::string encode(std::size_t v) { return std::to_string(v); }
std::string encode(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, p);
}
std::string encode(bool v) { return v ? "true" : "false"; }
std::string encode(const std::string& v) { return v; }
std::string encode(data::Strength v) { return v == data::Strength::weak ? "weak" : "strong"; }
std::string encode(objectives::NceVariant v) {
  return v == objectives::NceVariant::standard ? "standard" : "literal";
}
std::string encode(objectives::ItmSampling v) {
  return v == objectives::ItmSampling::hard ? "hard" : "uniform";
}

struct Field {
  KeyInfo info;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename Access>
Field field(std::string key, std::string doc, Access access) {
  Field f;
  f.info = {key, std::move(doc)};
  f.set = [key, access](TrainConfig& c, const std::string& v) { decode(key, v, access(c)); };
  f.get = [access](const TrainConfig& c) { return encode(access(const_cast<TrainConfig&>(c))); };
  return f;
}

#define TCL_FIELD(key, expr, doc) field(key, doc, [](TrainConfig& c) -> auto& { return c.expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      TCL_FIELD("seed", seed, "model init, augmentation, dropout and ITM sampling seed"),
      TCL_FIELD("data_seed", data_seed, "synthetic corpus seed"),
      TCL_FIELD("train_pairs", train_pairs, "training pairs"),
      TCL_FIELD("eval_pairs", eval_pairs, "held-out retrieval pairs"),
      TCL_FIELD("grid", grid, "scene grid side (2, 3 or 4)"),
      TCL_FIELD("max_objects", max_objects, "objects per scene (1 or 2)"),
      TCL_FIELD("synonyms", synonyms, "use synonym surface words in captions"),
      TCL_FIELD("dataset", dataset, "TCLD file used as the training split (empty: generate)"),
      TCL_FIELD("image_size", encoder.image_size, "image side in pixels"),
      TCL_FIELD("patch", encoder.patch, "patch side in pixels"),
      TCL_FIELD("d_model", encoder.d_model, "transformer width"),
      TCL_FIELD("heads", encoder.heads, "attention heads"),
      TCL_FIELD("mlp_ratio", encoder.mlp_ratio, "MLP hidden width / d_model"),
      TCL_FIELD("vision_layers", encoder.vision_layers, "vision encoder layers"),
      TCL_FIELD("text_layers", encoder.text_layers, "text encoder layers"),
      TCL_FIELD("fusion_layers", encoder.fusion_layers, "fusion encoder layers"),
      TCL_FIELD("d_proj", encoder.d_proj, "projection dimension"),
      TCL_FIELD("dropout", encoder.dropout, "text encoder dropout rate"),
      TCL_FIELD("vision_tap", encoder.vision_tap, "intermediate vision layer (0: ceil(3L/4))"),
      TCL_FIELD("text_tap", encoder.text_tap, "intermediate text layer (0: ceil(3L/4))"),
      TCL_FIELD("epochs", epochs, "training epochs"),
      TCL_FIELD("batch_size", batch_size, "batch size B"),
      TCL_FIELD("lr_init", lr_init, "learning rate at step 0"),
      TCL_FIELD("lr_peak", lr_peak, "learning rate at the end of warmup"),
      TCL_FIELD("lr_floor", lr_floor, "learning rate at the last step"),
      TCL_FIELD("warmup_steps", warmup_steps, "linear warmup steps"),
      TCL_FIELD("total_steps", total_steps, "schedule length (0: epochs * steps per epoch)"),
      TCL_FIELD("weight_decay", weight_decay, "decoupled weight decay"),
      TCL_FIELD("adam_beta1", adam_beta1, "first-moment decay"),
      TCL_FIELD("adam_beta2", adam_beta2, "second-moment decay"),
      TCL_FIELD("adam_eps", adam_eps, "AdamW epsilon"),
      TCL_FIELD("momentum", momentum, "EMA coefficient m"),
      TCL_FIELD("queue_size", queue_size, "negative queue capacity K"),
      TCL_FIELD("tau", step.tau, "InfoNCE temperature"),
      TCL_FIELD("nce_variant", step.nce_variant, "standard|literal denominator"),
      TCL_FIELD("loss_cma", step.gates.cma, "enable the CMA term"),
      TCL_FIELD("loss_imc", step.gates.imc, "enable the IMC term"),
      TCL_FIELD("loss_lmi", step.gates.lmi, "enable the LMI term"),
      TCL_FIELD("loss_itm", step.gates.itm, "enable the ITM term"),
      TCL_FIELD("loss_mlm", step.gates.mlm, "enable the MLM term"),
      TCL_FIELD("itm_sampling", step.itm_sampling, "hard|uniform ITM negatives"),
      TCL_FIELD("lmi_pool", step.lmi_pool, "pool image patches before LMI"),
      TCL_FIELD("lmi_pool_target", step.lmi_pool_target, "pooled patch count M'"),
      TCL_FIELD("lmi_intermediate", step.lmi_from_tap, "LMI locals from the intermediate layer"),
      TCL_FIELD("aug_strength", batch.strength, "weak|strong augmentation"),
      TCL_FIELD("aug_crop", batch.augment.crop, "random resized crop"),
      TCL_FIELD("aug_min_scale", batch.augment.min_scale, "smallest crop side fraction"),
      TCL_FIELD("aug_flip_prob", batch.augment.flip_prob, "horizontal flip probability"),
      TCL_FIELD("aug_brightness", batch.augment.brightness, "brightness jitter (strong)"),
      TCL_FIELD("aug_contrast", batch.augment.contrast, "contrast jitter (strong)"),
      TCL_FIELD("aug_noise", batch.augment.noise_std, "channel noise std (strong)"),
      TCL_FIELD("aug_tie_views", batch.augment.tie_views, "I1 = I2"),
      TCL_FIELD("mask_rate", batch.mask_rate, "MLM selection probability"),
      TCL_FIELD("mask_p_mask", batch.mask_split.p_mask, "selected -> [MASK]"),
      TCL_FIELD("mask_p_random", batch.mask_split.p_random, "selected -> random word"),
      TCL_FIELD("mask_p_keep", batch.mask_split.p_keep, "selected -> unchanged"),
      TCL_FIELD("checkpoint_every", checkpoint_every, "checkpoint period in steps (0: final only)"),
      TCL_FIELD("eval_batch", eval_batch, "retrieval encoding chunk size"),
  };
  return f;
}

#undef TCL_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.info.key == key) return &f;
  return nullptr;
}

std::string valid_keys() {
  std::string s;
  for (const auto& f : fields()) s += (s.empty() ? "" : ", ") + f.info.key;
  return s;
}

}  // namespace

const std::vector<KeyInfo>& schema() {
  static const std::vector<KeyInfo> s = [] {
    std::vector<KeyInfo> out;
    for (const auto& f : fields()) out.push_back(f.info);
    return out;
  }();
  return s;
}

std::vector<Assignment> parse_text(std::string_view text) {
  std::vector<Assignment> out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                        t + "'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    require_config(!key.empty(), "config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

std::vector<Assignment> read_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config not found: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str());
}

Assignment parse_override(std::string_view kv) {
  const auto eq = kv.find('=');
  require_config(eq != std::string_view::npos && eq > 0,
                 "--set expects key=value, got '" + std::string(kv) + "'");
  return {trim(kv.substr(0, eq)), trim(kv.substr(eq + 1))};
}

void apply(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  f->set(cfg, value);
}

void apply_all(TrainConfig& cfg, const std::vector<Assignment>& assignments) {
  for (const auto& [k, v] : assignments) apply(cfg, k, v);
}

std::string get(const TrainConfig& cfg, const std::string& key) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  return f->get(cfg);
}

std::string to_text(const TrainConfig& cfg) {
  std::string s;
  for (const auto& f : fields()) s += f.info.key + " = " + f.get(cfg) + "\n";
  return s;
}

TrainConfig from_text(std::string_view text) {
  TrainConfig cfg;
  apply_all(cfg, parse_text(text));
  return cfg;
}

TrainConfig full_scale_schedule() {
  TrainConfig cfg;
  cfg.lr_init = 1e-5;
  cfg.lr_peak = 1e-4;
  cfg.lr_floor = 1e-5;
  cfg.warmup_steps = 2000;
  return cfg;
}

}  // namespace tcl::config
