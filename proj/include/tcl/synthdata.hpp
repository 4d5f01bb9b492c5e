#pragma once

// Procedural shapes-on-a-grid image/caption corpus, two-view augmentation and
// MLM token masking.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tcl/matrix.hpp"

namespace tcl::data {

// --- vocabulary -----------------------------------------------------------

inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kMask = 2;
inline constexpr int kIgnore = -1;
inline constexpr std::size_t kMaxTokens = 16;  // N_max, including [CLS]

enum class Shape : std::uint8_t { circle, square, triangle, cross };
enum class Color : std::uint8_t { red, green, blue, yellow, magenta, cyan };
inline constexpr int kShapeCount = 4;
inline constexpr int kColorCount = 6;

const std::vector<std::string>& vocabulary();
std::size_t vocab_size();
int token_id(std::string_view word);  // throws ContractViolation on unknown words
const std::string& token_word(int id);
bool is_special(int id);
// First id that is an ordinary word (used for random replacement in MLM).
int first_word_id();

// --- images ---------------------------------------------------------------

// Channel-major image: channels x height x width, values in [0,1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct ObjectDesc {
  Shape shape = Shape::circle;
  Color color = Color::red;
  std::uint8_t row = 0;
  std::uint8_t col = 0;
  friend bool operator==(const ObjectDesc&, const ObjectDesc&) = default;
};

using TokenIds = std::array<std::uint16_t, kMaxTokens>;

struct SyntheticPair {
  Image image;
  TokenIds caption{};
  std::vector<ObjectDesc> scene;  // sorted by cell index
  std::uint32_t pair_id = 0;
  friend bool operator==(const SyntheticPair&, const SyntheticPair&) = default;
};

struct DatasetOptions {
  std::size_t image_size = 64;
  std::size_t max_objects = 2;  // two objects already use 11 caption tokens
  bool synonyms = false;
};

std::vector<SyntheticPair> generate_dataset(std::size_t count, std::uint64_t seed,
                                            std::size_t grid, const DatasetOptions& opts = {});

// Renders the caption for a scene. With synonyms enabled, `synonym_seed`
// picks among equivalent surface words.
TokenIds caption_for(const std::vector<ObjectDesc>& scene, std::size_t grid,
                     std::optional<std::uint64_t> synonym_seed = std::nullopt);
// Inverse of caption_for (synonyms map back to their canonical word).
std::vector<ObjectDesc> parse_caption(const TokenIds& caption, std::size_t grid);
std::string caption_text(const TokenIds& caption);
std::size_t caption_length(const TokenIds& caption);  // tokens before padding

// --- augmentation ---------------------------------------------------------

enum class Strength { weak, strong };

struct AugmentConfig {
  bool crop = true;
  double min_scale = 0.6;  // min side fraction kept by the random resized crop
  double flip_prob = 0.0;
  double brightness = 0.2;  // strong only
  double contrast = 0.2;    // strong only
  double noise_std = 0.03;  // strong only
  bool tie_views = false;   // both views use the same sub-seed (I1 = I2)

  static AugmentConfig identity();
};

struct AugmentedViews {
  Image view_a;
  Image view_b;
  std::uint64_t rng_seed = 0;
};

AugmentedViews augment(const Image& image, std::uint64_t seed, Strength strength,
                       const AugmentConfig& cfg = {});
// A single view with its own sub-seed.
Image augment_one(const Image& image, std::uint64_t seed, Strength strength,
                  const AugmentConfig& cfg);

// --- MLM masking ----------------------------------------------------------

struct MaskSplit {
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;
};

struct MaskedText {
  TokenIds input_ids{};
  std::array<int, kMaxTokens> labels{};
  std::vector<std::size_t> mask_positions;
};

MaskedText mlm_mask(const TokenIds& caption, std::uint64_t seed, double rate = 0.15,
                    const MaskSplit& split = {});

// --- record file ----------------------------------------------------------

void save_dataset(const std::filesystem::path& path, const std::vector<SyntheticPair>& pairs,
                  std::size_t grid);
std::vector<SyntheticPair> load_dataset(const std::filesystem::path& path,
                                        std::size_t* grid_out = nullptr);

}  // namespace tcl::data
