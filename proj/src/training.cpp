#include "tcl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "tcl/config.hpp"
#include "tcl/errors.hpp"
#include "tcl/rng.hpp"

#ifndef TCL_BUILD_ID
#define TCL_BUILD_ID "unknown"
#endif

namespace tcl::training {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  encoder.validate();
  require_config(epochs >= 1, "epochs must be >= 1");
  require_config(batch_size >= 1, "batch_size must be >= 1");
  require_config(train_pairs >= 1, "train_pairs must be >= 1");
  require_config(eval_pairs >= 1, "eval_pairs must be >= 1");
  require_config(lr_init >= 0 && lr_peak >= 0 && lr_floor >= 0, "learning rates must be >= 0");
  require_config(lr_floor <= lr_peak, "lr_floor must not exceed lr_peak");
  require_config(weight_decay >= 0, "weight_decay must be >= 0");
  require_config(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1,
                 "adam betas must lie in [0, 1)");
  require_config(adam_eps > 0, "adam_eps must be > 0");
  require_config(momentum >= 0 && momentum <= 1, "momentum must lie in [0, 1]");
  require_config(queue_size >= batch_size, "queue_size must be >= batch_size");
  require_config(step.tau > 0, "tau must be > 0");
  require_config(batch.mask_rate >= 0 && batch.mask_rate <= 1, "mask_rate must lie in [0, 1]");
  require_config(eval_batch >= 1, "eval_batch must be >= 1");
}

double lr_schedule(std::size_t step, const TrainConfig& cfg, std::size_t total_steps) {
  if (step < cfg.warmup_steps)
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * static_cast<double>(step) /
                             static_cast<double>(cfg.warmup_steps);
  const std::size_t last = total_steps > 0 ? total_steps - 1 : 0;
  if (last <= cfg.warmup_steps) return cfg.lr_peak;  // no decay phase
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(last - cfg.warmup_steps));
  return cfg.lr_floor +
         0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

Corpus build_corpus(const TrainConfig& cfg) {
  data::DatasetOptions opts;
  opts.image_size = cfg.encoder.image_size;
  opts.max_objects = cfg.max_objects;
  opts.synonyms = cfg.synonyms;
  Corpus c;
  std::size_t grid = cfg.grid;
  if (!cfg.dataset.empty()) {
    c.train = data::load_dataset(cfg.dataset, &grid);
    require_config(!c.train.empty() && c.train[0].image.height == cfg.encoder.image_size,
                   "dataset: image size does not match image_size");
  } else {
    c.train = data::generate_dataset(cfg.train_pairs, cfg.data_seed, grid, opts);
  }

  auto key = [](const data::TokenIds& t) { return std::string(t.begin(), t.end()); };
  std::unordered_set<std::string> seen;
  for (const auto& p : c.train) seen.insert(key(p.caption));
  for (std::uint64_t round = 0; c.eval.size() < cfg.eval_pairs; ++round) {
    require_config(round < 64, "cannot draw " + std::to_string(cfg.eval_pairs) +
                                   " held-out pairs with captions unseen in training");
    const auto batch =
        data::generate_dataset(cfg.eval_pairs * 2, mix_seed(cfg.data_seed, 0xe7a1 + round), grid, opts);
    for (const auto& p : batch) {
      if (c.eval.size() == cfg.eval_pairs) break;
      if (!seen.insert(key(p.caption)).second) continue;
      c.eval.push_back(p);
      c.eval.back().pair_id = static_cast<std::uint32_t>(c.eval.size() - 1);
    }
  }
  return c;
}

std::string to_json_line(const StepRecord& r) {
  json j;
  j["step"] = r.step;
  j["cma"] = r.loss.cma;
  j["imc"] = r.loss.imc;
  j["lmi"] = r.loss.lmi;
  j["itm"] = r.loss.itm;
  j["mlm"] = r.loss.mlm;
  j["total"] = r.loss.total;
  j["lr"] = r.lr;
  j["tau"] = r.tau;
  return j.dump();
}

// --- trainer ----------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, std::vector<data::SyntheticPair> train)
    : cfg_(cfg),
      train_(std::move(train)),
      text_queue_(cfg.queue_size, cfg.encoder.d_proj, momentum::QueueKind::text),
      image_queue_(cfg.queue_size, cfg.encoder.d_proj, momentum::QueueKind::image) {
  cfg_.validate();
  require_config(!train_.empty(), "training split is empty");
  online_ = std::make_unique<model::OnlineModel>(cfg_.encoder, mix_seed(cfg_.seed, 0x1417));
  shadow_ = std::make_unique<model::ShadowModel>(*online_);
  optim_params_ = online_->params();
  ema_ = std::make_unique<momentum::MomentumPair>(model::momentum_tracked_params(*online_),
                                                  shadow_->params(), cfg_.momentum);
  text_queue_.warm_start(mix_seed(cfg_.seed, 0x9e11));
  image_queue_.warm_start(mix_seed(cfg_.seed, 0x9e12));
  for (const auto& p : optim_params_) {
    adam_.m.emplace_back(p.var->rows(), p.var->cols());
    adam_.v.emplace_back(p.var->rows(), p.var->cols());
  }
}

std::size_t Trainer::steps_per_epoch() const {
  return std::max<std::size_t>(1, train_.size() / cfg_.batch_size);
}

std::size_t Trainer::total_steps() const {
  return cfg_.total_steps > 0 ? cfg_.total_steps : cfg_.epochs * steps_per_epoch();
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t spe = steps_per_epoch(), epoch = step / spe, k = step % spe;
  std::vector<std::size_t> perm(train_.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(mix_seed(cfg_.seed, 0x5417), epoch));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const std::size_t begin = k * cfg_.batch_size;
  const std::size_t end = std::min(perm.size(), begin + cfg_.batch_size);
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

StepRecord Trainer::step() {
  require(!finished(), "Trainer::step: schedule already finished");
  const std::size_t s = step_;
  const std::uint64_t step_seed = mix_seed(mix_seed(cfg_.seed, 0x57e9), s);
  const auto indices = batch_indices(s);
  const StepBatch batch = make_step_batch(train_, indices, step_seed, cfg_.batch);

  optim_params_.zero_grad();
  const StepForward fwd =
      forward_losses(*online_, *shadow_, text_queue_, image_queue_, batch, cfg_.step);
  if (fwd.lmi_degenerate && !warned_degenerate_) {
    std::cerr << "warning: batch of one sample; LMI and ITM have no in-batch negatives\n";
    warned_degenerate_ = true;
  }
  const objectives::TotalLoss loss = objectives::total_loss(fwd.terms);
  ag::backward(loss.total);

  const double lr = lr_schedule(s, cfg_, total_steps());
  audit_shadow_isolation();
  adamw(lr);
  momentum::ema_update(*ema_);
  text_queue_.enqueue(fwd.momentum_text_cls);
  image_queue_.enqueue(fwd.momentum_image_cls);
  ++step_;
  return {s, loss.report, lr, cfg_.step.tau};
}

void Trainer::adamw(double lr) {
  ++adam_.t;
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_.t));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < optim_params_.size(); ++i) {
    ag::Node& p = *optim_params_[i].var;
    Matrix& m = adam_.m[i];
    Matrix& v = adam_.v[i];
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = has_grad ? p.grad[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      p.value[j] = p.value[j] * decay - lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
    }
  }
}

void Trainer::audit_shadow_isolation() const {
  std::unordered_set<const ag::Node*> optimized;
  for (const auto& p : optim_params_) optimized.insert(p.var.get());
  for (const auto& p : shadow_->params()) {
    require(!optimized.contains(p.var.get()),
            "shadow parameter " + p.name + " is in the optimizer set");
    require(!p.var->requires_grad && !p.var->has_grad(),
            "shadow parameter " + p.name + " received a gradient");
  }
}

namespace {

void put_queue(checkpoint::Container& c, const std::string& prefix, const momentum::NegativeQueue& q) {
  c.put(prefix + ".buffer", q.buffer());
  c.meta[prefix + ".head"] = std::to_string(q.head());
  c.meta[prefix + ".filled"] = std::to_string(q.filled());
  c.meta[prefix + ".pushed"] = std::to_string(q.pushed());
  c.meta[prefix + ".evicted"] = std::to_string(q.evicted());
}

void get_queue(const checkpoint::Container& c, const std::string& prefix, momentum::NegativeQueue& q) {
  auto num = [&](const std::string& k) { return std::stoull(c.meta_at(prefix + "." + k)); };
  q.restore(c.at(prefix + ".buffer").value, num("head"), num("filled"), num("pushed"), num("evicted"));
}

void load_params(const checkpoint::Container& c, const std::string& prefix, const model::ParamSet& ps) {
  for (const auto& p : ps) {
    const Matrix& v = c.at(prefix + p.name).value;
    require(v.same_shape(p.var->value), "checkpoint: shape mismatch for " + prefix + p.name);
    p.var->value = v;
  }
}

}  // namespace

checkpoint::Container Trainer::to_checkpoint() const {
  checkpoint::Container c;
  c.meta["format"] = "tcl-train";
  c.meta["config"] = config::to_text(cfg_);
  c.meta["step"] = std::to_string(step_);
  c.meta["seed"] = std::to_string(cfg_.seed);
  c.meta["data_seed"] = std::to_string(cfg_.data_seed);
  c.meta["adam.t"] = std::to_string(adam_.t);
  c.meta["build"] = TCL_BUILD_ID;
  for (const auto& p : optim_params_) c.put("online." + p.name, p.var->value);
  for (const auto& p : shadow_->params()) c.put("shadow." + p.name, p.var->value);
  for (std::size_t i = 0; i < optim_params_.size(); ++i) {
    c.put("adam.m." + optim_params_[i].name, adam_.m[i]);
    c.put("adam.v." + optim_params_[i].name, adam_.v[i]);
  }
  put_queue(c, "queue.text", text_queue_);
  put_queue(c, "queue.image", image_queue_);
  return c;
}

void Trainer::restore(const checkpoint::Container& c) {
  require_config(c.meta_at("config") == config::to_text(cfg_),
                 "checkpoint config does not match the run config");
  load_params(c, "online.", optim_params_);
  load_params(c, "shadow.", shadow_->params());
  for (std::size_t i = 0; i < optim_params_.size(); ++i) {
    adam_.m[i] = c.at("adam.m." + optim_params_[i].name).value;
    adam_.v[i] = c.at("adam.v." + optim_params_[i].name).value;
  }
  adam_.t = std::stoull(c.meta_at("adam.t"));
  get_queue(c, "queue.text", text_queue_);
  get_queue(c, "queue.image", image_queue_);
  step_ = std::stoull(c.meta_at("step"));
}

std::unique_ptr<model::OnlineModel> load_online_model(const checkpoint::Container& c,
                                                      TrainConfig* cfg_out) {
  const TrainConfig cfg = config::from_text(c.meta_at("config"));
  auto online = std::make_unique<model::OnlineModel>(cfg.encoder, mix_seed(cfg.seed, 0x1417));
  load_params(c, "online.", online->params());
  if (cfg_out) *cfg_out = cfg;
  return online;
}

evaluation::RetrievalResult evaluate_retrieval(const model::OnlineModel& online,
                                               std::span<const data::SyntheticPair> pairs,
                                               std::size_t chunk) {
  const std::size_t n = pairs.size(), dp = online.cfg.d_proj;
  Matrix img(n, dp), txt(n, dp);
  const model::ParamSet params = online.params();
  params.set_requires_grad(false);
  try {
    for (std::size_t begin = 0; begin < n; begin += chunk) {
      const std::size_t end = std::min(n, begin + chunk);
      std::vector<const data::Image*> images;
      std::vector<data::TokenIds> ids;
      for (std::size_t i = begin; i < end; ++i) {
        images.push_back(&pairs[i].image);
        ids.push_back(pairs[i].caption);
      }
      const ag::Var zi = model::project(online.vision.encode(images), online.proj_v, model::ProjectWhich::cls);
      const ag::Var zt = model::project(online.text.encode(ids), online.proj_t, model::ProjectWhich::cls);
      std::copy(zi->value.storage().begin(), zi->value.storage().end(), img.data() + begin * dp);
      std::copy(zt->value.storage().begin(), zt->value.storage().end(), txt.data() + begin * dp);
    }
  } catch (...) {
    params.set_requires_grad(true);
    throw;
  }
  params.set_requires_grad(true);
  return evaluation::retrieval_eval(img, txt);
}

std::atomic<bool>& stop_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

namespace {

json recall_json(const evaluation::Recall& r) { return {{"r1", r.r1}, {"r5", r.r5}, {"r10", r.r10}}; }

void write_results(const fs::path& path, const TrainConfig& cfg, const RunResult& res) {
  json j;
  j["build"] = TCL_BUILD_ID;
  json echo = json::object();
  for (const auto& k : config::schema()) echo[k.key] = config::get(cfg, k.key);
  j["config"] = echo;
  j["steps"] = res.steps;
  j["retrieval"] = {{"tr", recall_json(res.retrieval.tr)},
                    {"ir", recall_json(res.retrieval.ir)},
                    {"mean_recall", res.retrieval.mean_recall},
                    {"n_queries", res.retrieval.n_queries}};
  if (!res.trace.empty()) j["final_loss"] = json::parse(to_json_line(res.trace.back()));
  std::ofstream(path) << j.dump(2) << "\n";
}

}  // namespace

RunResult run(const TrainConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Corpus corpus = build_corpus(cfg);
  Trainer trainer(cfg, corpus.train);
  if (opts.resume) trainer.restore(checkpoint::load(*opts.resume));

  const bool to_disk = !opts.out_dir.empty();
  const fs::path ckpt = opts.out_dir / "checkpoint.tclk";
  std::ofstream metrics;
  if (to_disk) {
    fs::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "config.cfg") << config::to_text(cfg);
    metrics.open(opts.out_dir / "metrics.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  }

  RunResult res;
  std::optional<fs::path> last_good;
  const std::size_t start = trainer.step_index();
  while (!trainer.finished()) {
    if (stop_flag().load()) {
      res.interrupted = true;
      break;
    }
    if (opts.stop_after && trainer.step_index() - start >= *opts.stop_after) break;
    StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const TrainingAborted& e) {
      throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(trainer.step_index()) +
                            "; last good checkpoint: " + (last_good ? last_good->string() : "none"));
    }
    res.trace.push_back(rec);
    if (to_disk) metrics << to_json_line(rec) << "\n" << std::flush;
    if (opts.on_step) opts.on_step(rec);
    if (opts.log && (rec.step % 10 == 0 || trainer.finished()))
      *opts.log << "step " << rec.step << "/" << trainer.total_steps() << " loss " << rec.loss.total
                << " lr " << rec.lr << "\n" << std::flush;
    if (to_disk && cfg.checkpoint_every > 0 && trainer.step_index() % cfg.checkpoint_every == 0) {
      checkpoint::save(ckpt, trainer.to_checkpoint());
      last_good = ckpt;
    }
  }
  res.steps = trainer.step_index();
  if (to_disk) checkpoint::save(ckpt, trainer.to_checkpoint());
  if (trainer.finished()) {
    res.retrieval = evaluate_retrieval(trainer.online(), corpus.eval, cfg.eval_batch);
    res.evaluated = true;
    if (to_disk) write_results(opts.out_dir / "results.json", cfg, res);
  }
  return res;
}

}  // namespace tcl::training
