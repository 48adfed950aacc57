#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "hrefnet/data.hpp"
#include "hrefnet/errors.hpp"
#include "test_support.hpp"

using namespace hrefnet;
using namespace hrefnet::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hrefnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<FundusSample> tiny_samples(int n, const std::string& prefix, std::int64_t h = 6, std::int64_t w = 5) {
  std::vector<FundusSample> out;
  std::mt19937_64 rng(static_cast<std::uint64_t>(n));
  for (int i = 0; i < n; ++i) {
    FundusSample s;
    s.id = prefix + std::to_string(10 + i);
    s.image = Grid(h, w);
    for (auto& v : s.image.values) v = std::round(std::uniform_real_distribution<double>(0, 1)(rng) * 255) / 255;
    s.vessel_mask = hrefnet::testing::random_mask(h, w, 0.3, rng);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(DatasetInfo, PublishedSplitSizes) {
  const auto d = dataset_info("DRIVE");
  EXPECT_EQ(d.train, 20);
  EXPECT_EQ(d.test, 20);
  EXPECT_EQ(d.height, 584);
  EXPECT_EQ(d.width, 565);
  EXPECT_EQ(dataset_info("STARE").train, 15);
  EXPECT_EQ(dataset_info("STARE").test, 5);
  EXPECT_EQ(dataset_info("CHASE_DB1").train, 20);
  EXPECT_EQ(dataset_info("CHASE_DB1").test, 8);
  EXPECT_EQ(dataset_info("CHASE_DB1").width, 999);
  EXPECT_THROW(dataset_info("HRF"), InvalidConfig);
}

TEST(LoadDataset, RoundTripThroughPngLayout) {
  const fs::path root = temp_dir("ds");
  auto samples = tiny_samples(3, "s");
  samples[1].fov_mask = BinaryMask(6, 5, true);
  samples[0].fov_mask = BinaryMask(6, 5, true);
  samples[2].fov_mask = BinaryMask(6, 5);
  write_dataset(root, "synthetic", Split::test, samples);
  const auto back = load_dataset({"synthetic", root, Split::test});
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].vessel_mask, samples[i].vessel_mask);
    ASSERT_TRUE(back[i].fov_mask.has_value());
    EXPECT_EQ(*back[i].fov_mask, *samples[i].fov_mask);
    for (std::int64_t k = 0; k < 30; ++k) EXPECT_NEAR(back[i].image.values[k], samples[i].image.values[k], 1e-12);
  }
  EXPECT_THROW(load_dataset({"synthetic", root, Split::training}), LoadError);
  fs::remove_all(root);
}

TEST(LoadDataset, WrongSplitSizeAndBadFilesAreReported) {
  const fs::path root = temp_dir("drive");
  write_dataset(root, "DRIVE", Split::training, tiny_samples(3, "d"));
  try {
    load_dataset({"DRIVE", root, Split::training});
    FAIL();
  } catch (const InvalidConfig& e) {
    EXPECT_NE(std::string(e.what()).find("expected 20"), std::string::npos) << e.what();
  }
  // A corrupt image names the file.
  const fs::path bad = root / "DRIVE" / "training" / "images" / "d11.png";
  { std::ofstream(bad) << "not a png"; }
  try {
    load_dataset({"DRIVE", root, Split::training});
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("d11.png"), std::string::npos) << e.what();
  }
  fs::remove_all(root);
}

TEST(LoadDataset, StarePoolsAndSplitsById) {
  const fs::path root = temp_dir("stare");
  auto all = tiny_samples(20, "im0");  // ids im010 .. im029
  std::vector<FundusSample> a(all.begin(), all.begin() + 12), b(all.begin() + 12, all.end());
  write_dataset(root, "STARE", Split::training, b);  // deliberately scrambled across folders
  write_dataset(root, "STARE", Split::test, a);
  const auto train = load_dataset({"STARE", root, Split::training});
  const auto test = load_dataset({"STARE", root, Split::test});
  ASSERT_EQ(train.size(), 15u);
  ASSERT_EQ(test.size(), 5u);
  EXPECT_EQ(train.front().id, "im010");
  EXPECT_EQ(train.back().id, "im024");
  EXPECT_EQ(test.front().id, "im025");

  DatasetSpec spec{"STARE", root, Split::test};
  spec.train_ids.clear();
  for (int i = 15; i < 30; ++i) spec.train_ids.push_back("im0" + std::to_string(i));
  const auto custom = load_dataset(spec);
  ASSERT_EQ(custom.size(), 5u);
  EXPECT_EQ(custom.front().id, "im010");
  fs::remove_all(root);
}

TEST(Crop, SameWindowOnImageAndMasks) {
  auto s = tiny_samples(1, "c", 10, 12).front();
  std::mt19937_64 rng(3);
  s.fov_mask = hrefnet::testing::random_mask(10, 12, 0.5, rng);
  const FundusSample c = crop(s, 2, 3, 4, 5);
  for (int r = 0; r < 4; ++r)
    for (int q = 0; q < 5; ++q) {
      EXPECT_EQ(c.image(r, q), s.image(r + 2, q + 3));
      EXPECT_EQ(c.vessel_mask(r, q), s.vessel_mask(r + 2, q + 3));
      EXPECT_EQ((*c.fov_mask)(r, q), (*s.fov_mask)(r + 2, q + 3));
    }
  EXPECT_THROW(crop(s, 7, 0, 4, 4), InvalidArgument);
}

TEST(Crop, RandomCropCoversEveryOffset) {
  const auto s = tiny_samples(1, "r", 6, 7).front();
  std::mt19937_64 rng(4);
  // Each crop is matched back to its offset by content.
  std::vector<int> hits(3 * 4, 0);
  for (int i = 0; i < 2000; ++i) {
    const FundusSample c = random_crop(s, 4, 4, rng);
    bool found = false;
    for (int t = 0; t < 3 && !found; ++t)
      for (int l = 0; l < 4 && !found; ++l) {
        bool same = true;
        for (int r = 0; r < 4 && same; ++r)
          for (int q = 0; q < 4 && same; ++q) same = c.image(r, q) == s.image(t + r, l + q);
        if (same) {
          ++hits[t * 4 + l];
          found = true;
        }
      }
    ASSERT_TRUE(found);
  }
  for (int h : hits) EXPECT_GT(h, 100);
  EXPECT_THROW(random_crop(s, 7, 4, rng), InvalidArgument);
}

TEST(SlidingWindow, Origins) {
  EXPECT_EQ(window_origins(584, 224, 0.5), (std::vector<std::int64_t>{0, 112, 224, 336, 360}));
  EXPECT_EQ(window_origins(224, 224, 0.5), (std::vector<std::int64_t>{0}));
  EXPECT_EQ(window_origins(336, 224, 0.5), (std::vector<std::int64_t>{0, 112}));
  EXPECT_EQ(window_origins(10, 4, 0.0), (std::vector<std::int64_t>{0, 4, 6}));
  EXPECT_THROW(window_origins(100, 224, 0.5), InvalidArgument);
  EXPECT_THROW(window_origins(300, 224, 1.0), InvalidArgument);
}

TEST(SlidingWindow, AveragesProbabilitiesOverCoveringWindows) {
  // 224 x 336: two windows side by side overlapping on columns 112..223.
  Grid image(224, 336);
  for (std::int64_t c = 0; c < 336; ++c) image(5, c) = static_cast<double>(c);
  int calls = 0;
  // The predictor returns logit 0 for the left window and log(3) for the right one.
  const PatchPredictor predict = [&](const Grid& patch) {
    ++calls;
    const bool left = patch(5, 0) == 0.0;
    return Grid(patch.height, patch.width, left ? 0.0 : std::log(3.0));
  };
  const Grid p = sliding_window_predict(predict, image, 224, 0.5);
  EXPECT_EQ(calls, 2);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(100, 150), (0.5 + 0.75) / 2);
  EXPECT_DOUBLE_EQ(p(100, 300), 0.75);
}

TEST(SlidingWindow, ReconstructsPerPixelFunction) {
  // A predictor that depends only on the pixel value stitches to the same map.
  Grid image(300, 260);
  std::mt19937_64 rng(5);
  for (auto& v : image.values) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  const PatchPredictor id = [](const Grid& g) { return g; };
  const Grid p = sliding_window_predict(id, image, 224, 0.5);
  for (std::int64_t i = 0; i < p.size(); ++i) ASSERT_NEAR(p.values[i], hrefnet::testing::sigmoid_d(image.values[i]), 1e-14);
}

TEST(Synthetic, DeterministicPerSeed) {
  SyntheticVesselConfig cfg;
  const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].vessel_mask, b[i].vessel_mask);
    EXPECT_EQ(a[i].image.values, b[i].image.values);
  }
  EXPECT_EQ(a[2].id, "synth_002");
  cfg.seed = 1;
  EXPECT_NE(generate_synthetic(cfg)[0].vessel_mask, a[0].vessel_mask);
}

TEST(Synthetic, MaskIsExactlyTheUnionOfTubes) {
  SyntheticVesselConfig cfg;
  cfg.images = 2;
  cfg.height = 48;
  cfg.width = 40;
  for (const auto& si : generate_synthetic_detailed(cfg)) {
    const BinaryMask& m = si.sample.vessel_mask;
    EXPECT_GT(m.count(), 0);
    for (std::int64_t r = 0; r < m.height; ++r)
      for (std::int64_t c = 0; c < m.width; ++c) {
        bool covered = false;
        for (const auto& seg : si.segments) covered = covered || seg.covers(static_cast<double>(r), static_cast<double>(c));
        ASSERT_EQ(m(r, c), covered) << r << "," << c;
      }
    for (double v : si.sample.image.values) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Synthetic, WidthsStayInRangeAndConfigRoundTrips) {
  SyntheticVesselConfig cfg;
  cfg.images = 6;
  cfg.width_min = 2.0;
  cfg.width_max = 3.0;
  double lo = 1e9, hi = -1e9;
  for (const auto& si : generate_synthetic_detailed(cfg))
    for (const auto& seg : si.segments) {
      lo = std::min(lo, seg.width);
      hi = std::max(hi, seg.width);
    }
  EXPECT_GE(lo, 2.0);
  EXPECT_LE(hi, 3.0);
  EXPECT_GT(hi - lo, 0.3);
  const auto back = SyntheticVesselConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.width_min, 2.0);
  EXPECT_EQ(back.images, 6);
  EXPECT_THROW(SyntheticVesselConfig::from_json(R"({"width_min": 4, "width_max": 1})"), InvalidConfig);
}

TEST(Synthetic, TubeCoverage) {
  const TubeSegment s{0, 0, 0, 10, 3.0};
  EXPECT_TRUE(s.covers(1.5, 5));
  EXPECT_FALSE(s.covers(1.6, 5));
  EXPECT_TRUE(s.covers(0, -1.5));
  EXPECT_FALSE(s.covers(1.2, -1.2));
}
