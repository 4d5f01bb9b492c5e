#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "tcl/errors.hpp"
#include "tcl/synthdata.hpp"

using namespace tcl;
using namespace tcl::data;

TEST_CASE("generate_dataset: caption decodes back to its scene") {
  const auto pairs = generate_dataset(1, 7, 2);
  REQUIRE(pairs.size() == 1);
  CHECK(parse_caption(pairs[0].caption, 2) == pairs[0].scene);
  CHECK(pairs[0].caption[0] == kCls);
}

TEST_CASE("generate_dataset: deterministic for a fixed seed") {
  CHECK(generate_dataset(512, 3, 2) == generate_dataset(512, 3, 2));
  CHECK_FALSE(generate_dataset(8, 3, 2) == generate_dataset(8, 4, 2));
}

TEST_CASE("generate_dataset: distinct scenes never share a caption") {
  const auto pairs = generate_dataset(512, 3, 2);
  for (std::size_t i = 0; i < pairs.size(); ++i)
    for (std::size_t j = i + 1; j < pairs.size(); ++j)
      if (pairs[i].caption == pairs[j].caption) REQUIRE(pairs[i].scene == pairs[j].scene);
}

TEST_CASE("generate_dataset: token and pixel invariants") {
  for (std::size_t grid : {2, 3, 4}) {
    const auto pairs = generate_dataset(64, 21, grid);
    for (const auto& p : pairs) {
      CHECK(p.caption[0] == kCls);
      const std::size_t len = caption_length(p.caption);
      CHECK(len <= kMaxTokens);
      for (std::size_t i = 0; i < kMaxTokens; ++i) {
        CHECK(p.caption[i] < vocab_size());
        if (i >= len) CHECK(p.caption[i] == kPad);
      }
      CHECK(p.image.channels == 3);
      CHECK(std::all_of(p.image.pixels.begin(), p.image.pixels.end(),
                        [](double v) { return v >= 0.0 && v <= 1.0; }));
      CHECK(parse_caption(p.caption, grid) == p.scene);
    }
  }
}

TEST_CASE("generate_dataset: synonym captions still parse to the scene") {
  DatasetOptions opts;
  opts.synonyms = true;
  for (const auto& p : generate_dataset(64, 5, 3, opts))
    CHECK(parse_caption(p.caption, 3) == p.scene);
}

TEST_CASE("generate_dataset: bad arguments are config errors") {
  CHECK_THROWS_AS(generate_dataset(4, 1, 5), ConfigError);
  CHECK_THROWS_AS(generate_dataset(4, 1, 1), ConfigError);
  CHECK_THROWS_AS(generate_dataset(0, 1, 2), ConfigError);
}

TEST_CASE("augment: strong views differ, repeated calls agree") {
  const auto img = generate_dataset(1, 2, 2)[0].image;
  const auto v1 = augment(img, 5, Strength::strong);
  const auto v2 = augment(img, 5, Strength::strong);
  CHECK_FALSE(v1.view_a == v1.view_b);
  CHECK(v1.view_a == v2.view_a);
  CHECK(v1.view_b == v2.view_b);
}

TEST_CASE("augment: disabled transforms are the identity") {
  const auto img = generate_dataset(1, 2, 2)[0].image;
  for (auto s : {Strength::weak, Strength::strong}) {
    const auto v = augment(img, 17, s, AugmentConfig::identity());
    CHECK(v.view_a == img);
    CHECK(v.view_b == img);
  }
}

TEST_CASE("augment: tied weak views are identical") {
  const auto img = generate_dataset(1, 2, 2)[0].image;
  AugmentConfig cfg;
  cfg.tie_views = true;
  const auto v = augment(img, 3, Strength::weak, cfg);
  CHECK(v.view_a == v.view_b);
}

TEST_CASE("augment: shape and range preserved over 1000 seeds") {
  const auto pairs = generate_dataset(4, 8, 2);
  AugmentConfig cfg;
  cfg.flip_prob = 0.5;
  cfg.noise_std = 0.3;
  cfg.brightness = 0.8;
  cfg.contrast = 0.8;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto& img = pairs[seed % pairs.size()].image;
    const auto v = augment(img, seed, seed % 2 ? Strength::strong : Strength::weak, cfg);
    for (const Image* view : {&v.view_a, &v.view_b}) {
      REQUIRE(view->channels == img.channels);
      REQUIRE(view->height == img.height);
      REQUIRE(view->width == img.width);
      REQUIRE(std::all_of(view->pixels.begin(), view->pixels.end(),
                          [](double x) { return x >= 0.0 && x <= 1.0; }));
    }
  }
}

TEST_CASE("mlm_mask: rate 0 selects nothing") {
  const auto cap = generate_dataset(1, 1, 2)[0].caption;
  const auto m = mlm_mask(cap, 4, 0.0);
  CHECK(m.mask_positions.empty());
  CHECK(m.input_ids == cap);
  for (int l : m.labels) CHECK(l == kIgnore);
}

TEST_CASE("mlm_mask: rate 1 with an all-mask split masks every word") {
  const auto cap = generate_dataset(1, 1, 2)[0].caption;
  const auto m = mlm_mask(cap, 4, 1.0, {1.0, 0.0, 0.0});
  for (std::size_t p = 0; p < kMaxTokens; ++p) {
    if (is_special(cap[p])) {
      CHECK(m.input_ids[p] == cap[p]);
      CHECK(m.labels[p] == kIgnore);
    } else {
      CHECK(m.input_ids[p] == kMask);
      CHECK(m.labels[p] == cap[p]);
    }
  }
}

TEST_CASE("mlm_mask: labels set exactly at mask positions, specials never chosen") {
  const auto pairs = generate_dataset(200, 9, 3);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto m = mlm_mask(pairs[i].caption, i, 0.5);
    std::set<std::size_t> chosen(m.mask_positions.begin(), m.mask_positions.end());
    for (std::size_t p = 0; p < kMaxTokens; ++p) {
      CHECK((m.labels[p] != kIgnore) == (chosen.count(p) == 1));
      if (chosen.count(p)) CHECK_FALSE(is_special(pairs[i].caption[p]));
      if (!chosen.count(p)) CHECK(m.input_ids[p] == pairs[i].caption[p]);
    }
  }
}

TEST_CASE("mlm_mask: statistics over 1e5 positions") {
  const auto pairs = generate_dataset(512, 13, 3);
  const double words = static_cast<double>(vocab_size() - first_word_id());
  // A random replacement can redraw the original word.
  const double p_same = 0.1 + 0.1 / words, p_changed = 0.1 - 0.1 / words;
  std::size_t positions = 0, selected = 0, masked = 0, changed = 0, same = 0;
  for (std::uint64_t s = 0; positions < 100000; ++s) {
    const auto& cap = pairs[s % pairs.size()].caption;
    const auto m = mlm_mask(cap, s, 0.15);
    for (std::size_t p = 0; p < kMaxTokens; ++p)
      if (!is_special(cap[p])) ++positions;
    for (std::size_t p : m.mask_positions) {
      ++selected;
      if (m.input_ids[p] == kMask) ++masked;
      else if (m.input_ids[p] == cap[p]) ++same;
      else ++changed;
    }
  }
  const double n = static_cast<double>(positions), k = static_cast<double>(selected);
  CHECK(std::abs(k / n - 0.15) <= 0.01);
  CHECK(std::abs(masked / k - 0.8) <= 0.02);
  CHECK(std::abs(changed / k - p_changed) <= 0.02);
  CHECK(std::abs(same / k - p_same) <= 0.02);

  // Chi-square over {unselected, mask, changed, same}, 3 degrees of freedom.
  const double expected[4] = {n * 0.85, n * 0.15 * 0.8, n * 0.15 * p_changed, n * 0.15 * p_same};
  const double observed[4] = {n - k, static_cast<double>(masked), static_cast<double>(changed),
                              static_cast<double>(same)};
  double chi2 = 0.0;
  for (int i = 0; i < 4; ++i) chi2 += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  CHECK(chi2 < 16.266);  // p > 0.001
}

TEST_CASE("mlm_mask: invalid rates are config errors") {
  const auto cap = generate_dataset(1, 1, 2)[0].caption;
  CHECK_THROWS_AS(mlm_mask(cap, 0, 1.5), ConfigError);
  CHECK_THROWS_AS(mlm_mask(cap, 0, 0.15, {0.5, 0.5, 0.5}), ConfigError);
}

TEST_CASE("dataset file round trip") {
  const auto dir = test::scratch_dir("synthdata");
  const auto pairs = generate_dataset(20, 4, 3);
  save_dataset(dir / "d.tcld", pairs, 3);
  std::size_t grid = 0;
  const auto back = load_dataset(dir / "d.tcld", &grid);
  CHECK(grid == 3);
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].caption == pairs[i].caption);
    CHECK(back[i].scene == pairs[i].scene);
    CHECK(back[i].pair_id == pairs[i].pair_id);
    // Pixels are stored as f32.
    for (std::size_t j = 0; j < pairs[i].image.pixels.size(); ++j)
      REQUIRE(back[i].image.pixels[j] ==
              static_cast<double>(static_cast<float>(pairs[i].image.pixels[j])));
  }
}
