#include "tcl/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "tcl/errors.hpp"
#include "tcl/rng.hpp"

namespace tcl::data {

namespace {

const std::vector<std::string> kVocab = {
    "[PAD]", "[CLS]",  "[MASK]", "a",      "and",        "circle", "square",
    "triangle", "cross", "red",  "green",  "blue",       "yellow", "magenta",
    "cyan",  "top",    "upper",  "middle", "lower",      "bottom", "left",
    "centerleft", "center", "centerright", "right", "one", "disc", "box",
    "wedge", "plus"};

const std::array<const char*, kShapeCount> kShapeWords = {"circle", "square", "triangle", "cross"};
const std::array<const char*, kShapeCount> kShapeSynonyms = {"disc", "box", "wedge", "plus"};
const std::array<const char*, kColorCount> kColorWords = {"red",     "green", "blue",
                                                          "yellow", "magenta", "cyan"};
const std::array<std::array<double, 3>, kColorCount> kColorRgb = {{{0.9, 0.1, 0.1},
                                                                   {0.1, 0.8, 0.1},
                                                                   {0.1, 0.2, 0.9},
                                                                   {0.9, 0.9, 0.1},
                                                                   {0.9, 0.1, 0.9},
                                                                   {0.1, 0.9, 0.9}}};

std::vector<std::string> row_words(std::size_t grid) {
  switch (grid) {
    case 2: return {"top", "bottom"};
    case 3: return {"top", "middle", "bottom"};
    case 4: return {"top", "upper", "lower", "bottom"};
  }
  throw ConfigError("grid must be 2, 3 or 4 (got " + std::to_string(grid) + ")");
}

std::vector<std::string> col_words(std::size_t grid) {
  switch (grid) {
    case 2: return {"left", "right"};
    case 3: return {"left", "center", "right"};
    case 4: return {"left", "centerleft", "centerright", "right"};
  }
  throw ConfigError("grid must be 2, 3 or 4 (got " + std::to_string(grid) + ")");
}

bool inside(Shape shape, double dx, double dy, double r) {
  switch (shape) {
    case Shape::circle: return dx * dx + dy * dy <= r * r;
    case Shape::square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case Shape::triangle: {
      if (dy < -r || dy > 0.8 * r) return false;
      return std::abs(dx) <= r * (dy + r) / (1.8 * r);
    }
    case Shape::cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
  }
  return false;
}

double sample_bilinear(const Image& img, std::size_t c, double y, double x) {
  const double h = static_cast<double>(img.height), w = static_cast<double>(img.width);
  y = std::clamp(y, 0.0, h - 1.0);
  x = std::clamp(x, 0.0, w - 1.0);
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ContractViolation("dataset file truncated");
  return v;
}

constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

const std::vector<std::string>& vocabulary() { return kVocab; }
std::size_t vocab_size() { return kVocab.size(); }

int token_id(std::string_view word) {
  static const std::unordered_map<std::string_view, int> index = [] {
    std::unordered_map<std::string_view, int> m;
    for (std::size_t i = 0; i < kVocab.size(); ++i) m.emplace(kVocab[i], static_cast<int>(i));
    return m;
  }();
  auto it = index.find(word);
  require(it != index.end(), "unknown vocabulary word: " + std::string(word));
  return it->second;
}

const std::string& token_word(int id) {
  require(id >= 0 && static_cast<std::size_t>(id) < kVocab.size(), "token id out of range");
  return kVocab[static_cast<std::size_t>(id)];
}

bool is_special(int id) { return id == kPad || id == kCls || id == kMask; }
int first_word_id() { return kMask + 1; }

TokenIds caption_for(const std::vector<ObjectDesc>& scene, std::size_t grid,
                     std::optional<std::uint64_t> synonym_seed) {
  const auto rows = row_words(grid);
  const auto cols = col_words(grid);
  std::optional<Rng> rng;
  if (synonym_seed) rng.emplace(*synonym_seed);
  TokenIds ids{};
  std::size_t n = 0;
  ids[n++] = kCls;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const ObjectDesc& o = scene[i];
    require(o.row < grid && o.col < grid, "object outside the grid");
    if (i > 0) ids[n++] = static_cast<std::uint16_t>(token_id("and"));
    const bool syn_article = rng && rng->bernoulli(0.5);
    const bool syn_shape = rng && rng->bernoulli(0.5);
    ids[n++] = static_cast<std::uint16_t>(token_id(syn_article ? "one" : "a"));
    ids[n++] = static_cast<std::uint16_t>(token_id(kColorWords[static_cast<int>(o.color)]));
    const auto s = static_cast<std::size_t>(o.shape);
    ids[n++] = static_cast<std::uint16_t>(token_id(syn_shape ? kShapeSynonyms[s] : kShapeWords[s]));
    ids[n++] = static_cast<std::uint16_t>(token_id(rows[o.row]));
    ids[n++] = static_cast<std::uint16_t>(token_id(cols[o.col]));
    require(n <= kMaxTokens, "caption exceeds the token budget");
  }
  return ids;
}

std::vector<ObjectDesc> parse_caption(const TokenIds& caption, std::size_t grid) {
  const auto rows = row_words(grid);
  const auto cols = col_words(grid);
  auto lookup = [](const auto& words, const std::string& w) -> int {
    for (std::size_t i = 0; i < words.size(); ++i)
      if (w == words[i]) return static_cast<int>(i);
    return -1;
  };
  std::vector<ObjectDesc> scene;
  std::size_t p = 1;
  const std::size_t len = caption_length(caption);
  while (p < len) {
    if (token_word(caption[p]) == "and") ++p;
    require(p + 5 <= len, "malformed caption");
    const std::string art = token_word(caption[p]);
    require(art == "a" || art == "one", "malformed caption: expected article");
    ObjectDesc o;
    const int color = lookup(kColorWords, token_word(caption[p + 1]));
    int shape = lookup(kShapeWords, token_word(caption[p + 2]));
    if (shape < 0) shape = lookup(kShapeSynonyms, token_word(caption[p + 2]));
    const int row = lookup(rows, token_word(caption[p + 3]));
    const int col = lookup(cols, token_word(caption[p + 4]));
    require(color >= 0 && shape >= 0 && row >= 0 && col >= 0, "malformed caption: bad word");
    o.color = static_cast<Color>(color);
    o.shape = static_cast<Shape>(shape);
    o.row = static_cast<std::uint8_t>(row);
    o.col = static_cast<std::uint8_t>(col);
    scene.push_back(o);
    p += 5;
  }
  return scene;
}

std::string caption_text(const TokenIds& caption) {
  std::string out;
  for (std::size_t i = 1; i < caption_length(caption); ++i) {
    if (!out.empty()) out += ' ';
    out += token_word(caption[i]);
  }
  return out;
}

std::size_t caption_length(const TokenIds& caption) {
  std::size_t n = 0;
  while (n < caption.size() && caption[n] != kPad) ++n;
  return n;
}

std::vector<SyntheticPair> generate_dataset(std::size_t count, std::uint64_t seed,
                                            std::size_t grid, const DatasetOptions& opts) {
  require_config(grid >= 2 && grid <= 4, "grid must be 2, 3 or 4 (got " + std::to_string(grid) + ")");
  require_config(count >= 1, "dataset count must be >= 1");
  require_config(opts.max_objects >= 1 && opts.max_objects <= 2, "max_objects must be 1 or 2");
  require_config(opts.image_size >= grid * 4, "image_size too small for the grid");

  const std::size_t size = opts.image_size;
  const double cell = static_cast<double>(size) / static_cast<double>(grid);
  std::vector<SyntheticPair> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticPair& pair = out[i];
    pair.pair_id = static_cast<std::uint32_t>(i);
    Rng rng(mix_seed(seed, i));

    const std::size_t n_obj = 1 + rng.below(opts.max_objects);
    std::vector<std::size_t> cells(grid * grid);
    std::iota(cells.begin(), cells.end(), 0);
    for (std::size_t k = 0; k < n_obj; ++k)
      std::swap(cells[k], cells[k + rng.below(cells.size() - k)]);
    std::sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(n_obj));

    pair.image = Image(3, size, size, 0.0);
    for (std::size_t k = 0; k < n_obj; ++k) {
      ObjectDesc o;
      o.row = static_cast<std::uint8_t>(cells[k] / grid);
      o.col = static_cast<std::uint8_t>(cells[k] % grid);
      o.shape = static_cast<Shape>(rng.below(kShapeCount));
      o.color = static_cast<Color>(rng.below(kColorCount));
      pair.scene.push_back(o);

      const double r = 0.32 * cell * rng.uniform(0.85, 1.15);
      const double cx = (o.col + 0.5) * cell + rng.uniform(-0.08, 0.08) * cell;
      const double cy = (o.row + 0.5) * cell + rng.uniform(-0.08, 0.08) * cell;
      const auto& rgb = kColorRgb[static_cast<std::size_t>(o.color)];
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          if (!inside(o.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r))
            continue;
          for (std::size_t c = 0; c < 3; ++c) pair.image.at(c, y, x) = rgb[c];
        }
    }
    // Pixels are stored at f32 precision so the record file round-trips exactly.
    for (double& v : pair.image.pixels) v = static_cast<double>(static_cast<float>(v));
    const std::optional<std::uint64_t> syn =
        opts.synonyms ? std::optional<std::uint64_t>(mix_seed(seed ^ 0x5eedULL, i)) : std::nullopt;
    pair.caption = caption_for(pair.scene, grid, syn);
  }
  return out;
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.crop = false;
  c.flip_prob = 0.0;
  c.brightness = 0.0;
  c.contrast = 0.0;
  c.noise_std = 0.0;
  return c;
}

Image augment_one(const Image& image, std::uint64_t seed, Strength strength,
                  const AugmentConfig& cfg) {
  Rng rng(seed);
  Image out = image;
  const std::size_t h = image.height, w = image.width;

  if (cfg.crop) {
    const double side = rng.uniform(std::clamp(cfg.min_scale, 0.05, 1.0), 1.0);
    const double ch = side * static_cast<double>(h), cw = side * static_cast<double>(w);
    const double oy = rng.uniform() * (static_cast<double>(h) - ch);
    const double ox = rng.uniform() * (static_cast<double>(w) - cw);
    for (std::size_t c = 0; c < image.channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double sy = oy + (static_cast<double>(y) + 0.5) * ch / static_cast<double>(h) - 0.5;
          const double sx = ox + (static_cast<double>(x) + 0.5) * cw / static_cast<double>(w) - 0.5;
          out.at(c, y, x) = sample_bilinear(image, c, sy, sx);
        }
  }

  if (cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob)) {
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x) std::swap(out.at(c, y, x), out.at(c, y, w - 1 - x));
  }

  if (strength == Strength::strong) {
    if (cfg.brightness > 0.0 || cfg.contrast > 0.0) {
      const double shift = rng.uniform(-cfg.brightness, cfg.brightness);
      const double gain = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
      const double mean =
          std::accumulate(out.pixels.begin(), out.pixels.end(), 0.0) / static_cast<double>(out.pixels.size());
      for (double& p : out.pixels) p = (p - mean) * gain + mean + shift;
    }
    if (cfg.noise_std > 0.0)
      for (double& p : out.pixels) p += cfg.noise_std * rng.normal();
  }

  for (double& p : out.pixels) p = std::clamp(p, 0.0, 1.0);
  return out;
}

AugmentedViews augment(const Image& image, std::uint64_t seed, Strength strength,
                       const AugmentConfig& cfg) {
  AugmentedViews v;
  v.rng_seed = seed;
  v.view_a = augment_one(image, mix_seed(seed, 1), strength, cfg);
  v.view_b = cfg.tie_views ? v.view_a : augment_one(image, mix_seed(seed, 2), strength, cfg);
  return v;
}

MaskedText mlm_mask(const TokenIds& caption, std::uint64_t seed, double rate,
                    const MaskSplit& split) {
  require_config(rate >= 0.0 && rate <= 1.0, "mask rate must lie in [0,1]");
  require_config(split.p_mask >= 0 && split.p_random >= 0 && split.p_keep >= 0 &&
                     std::abs(split.p_mask + split.p_random + split.p_keep - 1.0) < 1e-9,
                 "mask split must be a probability distribution");
  MaskedText out;
  out.input_ids = caption;
  out.labels.fill(kIgnore);
  Rng rng(seed);
  const auto words = static_cast<std::uint64_t>(vocab_size() - first_word_id());
  for (std::size_t p = 0; p < caption.size(); ++p) {
    const int id = caption[p];
    if (is_special(id)) continue;
    if (!rng.bernoulli(rate)) continue;
    out.mask_positions.push_back(p);
    out.labels[p] = id;
    const double u = rng.uniform();
    if (u < split.p_mask) {
      out.input_ids[p] = static_cast<std::uint16_t>(kMask);
    } else if (u < split.p_mask + split.p_random) {
      out.input_ids[p] = static_cast<std::uint16_t>(first_word_id() + rng.below(words));
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<SyntheticPair>& pairs,
                  std::size_t grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t h = pairs.empty() ? 0 : pairs.front().image.height;
  const std::size_t w = pairs.empty() ? 0 : pairs.front().image.width;
  out.write("TCLD", 4);
  put<std::uint32_t>(out, kDatasetVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(pairs.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(grid));
  for (const auto& p : pairs) {
    require(p.image.height == h && p.image.width == w && p.image.channels == 3,
            "save_dataset: inconsistent image shapes");
    put<std::uint32_t>(out, p.pair_id);
    for (double v : p.image.pixels) put<float>(out, static_cast<float>(v));
    for (std::uint16_t t : p.caption) put<std::uint16_t>(out, t);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.scene.size()));
    for (const auto& o : p.scene) {
      put<std::uint8_t>(out, static_cast<std::uint8_t>(o.shape));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(o.color));
      put<std::uint8_t>(out, o.row);
      put<std::uint8_t>(out, o.col);
    }
  }
}

std::vector<SyntheticPair> load_dataset(const std::filesystem::path& path, std::size_t* grid_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  require(in && std::string_view(magic, 4) == "TCLD", "not a TCLD dataset file");
  const auto version = get<std::uint32_t>(in);
  require(version == kDatasetVersion, "unsupported dataset version " + std::to_string(version));
  const auto count = get<std::uint32_t>(in);
  const auto h = get<std::uint32_t>(in);
  const auto w = get<std::uint32_t>(in);
  const auto grid = get<std::uint32_t>(in);
  if (grid_out) *grid_out = grid;
  std::vector<SyntheticPair> pairs(count);
  for (auto& p : pairs) {
    p.pair_id = get<std::uint32_t>(in);
    p.image = Image(3, h, w);
    for (double& v : p.image.pixels) v = static_cast<double>(get<float>(in));
    for (std::uint16_t& t : p.caption) t = get<std::uint16_t>(in);
    const auto n = get<std::uint32_t>(in);
    p.scene.resize(n);
    for (auto& o : p.scene) {
      o.shape = static_cast<Shape>(get<std::uint8_t>(in));
      o.color = static_cast<Color>(get<std::uint8_t>(in));
      o.row = get<std::uint8_t>(in);
      o.col = get<std::uint8_t>(in);
    }
  }
  return pairs;
}

}  // namespace tcl::data
