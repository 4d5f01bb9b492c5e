#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "tcl/matrix.hpp"
#include "tcl/rng.hpp"
#include "tcl/training.hpp"

namespace tcl::test {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

inline Matrix random_unit_rows(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m = random_matrix(r, c, rng);
  normalize_rows(m);
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Encoders small enough for many forward passes per test.
inline model::EncoderConfig micro_encoder() {
  model::EncoderConfig e;
  e.image_size = 16;
  e.patch = 4;
  e.d_model = 8;
  e.heads = 2;
  e.mlp_ratio = 2;
  e.vision_layers = 1;
  e.text_layers = 1;
  e.fusion_layers = 1;
  e.d_proj = 8;
  return e;
}

inline training::TrainConfig micro_train_config() {
  training::TrainConfig cfg;
  cfg.encoder = micro_encoder();
  cfg.train_pairs = 32;
  cfg.eval_pairs = 16;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.warmup_steps = 2;
  cfg.queue_size = 16;
  cfg.step.lmi_pool_target = 4;
  return cfg;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tcl_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tcl::test
