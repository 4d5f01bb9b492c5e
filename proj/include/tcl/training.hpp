#pragma once

// Pre-training loop: batch assembly, AdamW, EMA and queue updates, learning
// rate schedule, checkpoints and the metrics stream.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tcl/checkpoint.hpp"
#include "tcl/encoders.hpp"
#include "tcl/evaluation.hpp"
#include "tcl/momentum.hpp"
#include "tcl/step.hpp"

namespace tcl::training {

struct TrainConfig {
  std::uint64_t seed = 0;       // model init, augmentation, dropout, ITM sampling
  std::uint64_t data_seed = 1;  // corpus generation
  std::size_t train_pairs = 512;
  std::size_t eval_pairs = 128;
  std::size_t grid = 2;
  std::size_t max_objects = 2;
  bool synonyms = false;
  std::string dataset;  // optional TCLD file replacing the generated training split

  model::EncoderConfig encoder;

  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr_init = 1e-5;
  double lr_peak = 5e-4;  // desk scale; full_scale_schedule() keeps 1e-4
  double lr_floor = 1e-5;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 0;  // 0: epochs * steps per epoch
  double weight_decay = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  double momentum = 0.995;
  std::size_t queue_size = 1024;

  StepOptions step;
  BatchOptions batch;

  std::size_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  std::size_t eval_batch = 64;

  void validate() const;
};

// Linear warmup from lr_init to lr_peak over warmup_steps, then cosine decay
// reaching lr_floor at the last step (total_steps - 1).
double lr_schedule(std::size_t step, const TrainConfig& cfg, std::size_t total_steps);

struct Corpus {
  std::vector<data::SyntheticPair> train;
  std::vector<data::SyntheticPair> eval;  // captions disjoint from train and unique
};

Corpus build_corpus(const TrainConfig& cfg);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;
};

struct StepRecord {
  std::size_t step = 0;
  objectives::LossReport loss;
  double lr = 0.0;
  double tau = 0.0;
};

std::string to_json_line(const StepRecord& r);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<data::SyntheticPair> train);

  // Runs the next step and returns its record.
  StepRecord step();

  std::size_t step_index() const { return step_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const;
  bool finished() const { return step_ >= total_steps(); }

  const TrainConfig& config() const { return cfg_; }
  const model::OnlineModel& online() const { return *online_; }
  const model::ShadowModel& shadow() const { return *shadow_; }
  const momentum::NegativeQueue& text_queue() const { return text_queue_; }
  const momentum::NegativeQueue& image_queue() const { return image_queue_; }
  const AdamState& adam() const { return adam_; }

  // Sample indices used by a given step.
  std::vector<std::size_t> batch_indices(std::size_t step) const;

  checkpoint::Container to_checkpoint() const;
  // Restores parameters, optimizer moments, queues and the step counter.
  void restore(const checkpoint::Container& c);

 private:
  TrainConfig cfg_;
  std::vector<data::SyntheticPair> train_;
  std::unique_ptr<model::OnlineModel> online_;
  std::unique_ptr<model::ShadowModel> shadow_;
  model::ParamSet optim_params_;
  std::unique_ptr<momentum::MomentumPair> ema_;
  momentum::NegativeQueue text_queue_;
  momentum::NegativeQueue image_queue_;
  AdamState adam_;
  std::size_t step_ = 0;
  bool warned_degenerate_ = false;

  void adamw(double lr);
  void audit_shadow_isolation() const;
};

// Rebuilds an online model from a checkpoint's config echo and blobs.
std::unique_ptr<model::OnlineModel> load_online_model(const checkpoint::Container& c,
                                                      TrainConfig* cfg_out = nullptr);

evaluation::RetrievalResult evaluate_retrieval(const model::OnlineModel& online,
                                               std::span<const data::SyntheticPair> pairs,
                                               std::size_t chunk = 64);

struct RunOptions {
  std::filesystem::path out_dir;                // empty: keep everything in memory
  std::optional<std::filesystem::path> resume;  // checkpoint to resume from
  std::optional<std::size_t> stop_after;        // stop (and checkpoint) after this many steps
  std::ostream* log = nullptr;                  // progress lines
  std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
  std::vector<StepRecord> trace;
  evaluation::RetrievalResult retrieval;
  std::size_t steps = 0;
  bool interrupted = false;
  bool evaluated = false;
};

// Set by the interrupt handler; the run loop checkpoints and returns.
std::atomic<bool>& stop_flag();

RunResult run(const TrainConfig& cfg, const RunOptions& opts = {});

}  // namespace tcl::training
