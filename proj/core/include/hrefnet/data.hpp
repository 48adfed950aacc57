#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hrefnet/image.hpp"

namespace hrefnet::data {

struct FundusSample {
  std::string id;
  Grid image;  // grayscale in [0, 1]
  BinaryMask vessel_mask;
  std::optional<BinaryMask> fov_mask;
};

// Throws InvalidArgument when shapes disagree.
void check_sample(const FundusSample& s);

enum class Split { training, test };

struct DatasetSpec {
  std::string name;  // DRIVE, STARE, CHASE_DB1 or synthetic
  std::filesystem::path root;
  Split split = Split::training;
  int annotator = 1;  // 1 reads masks/, 2 reads masks2/
  // STARE only: ids forming the training split. Empty selects the
  // lexicographically first 15.
  std::vector<std::string> train_ids;
};

struct DatasetInfo {
  int train = 0;
  int test = 0;
  int height = 0;  // native resolution, 0 when free
  int width = 0;
};

// Split sizes and native resolution of the named datasets. Throws InvalidConfig
// for unknown names; "synthetic" has no fixed sizes.
DatasetInfo dataset_info(const std::string& name);

// Reads <root>/<name>/{training,test}/{images,masks[,masks2],fov}. Files in
// each folder pair up in sorted filename order; ids are image file stems.
// Missing or undecodable files raise LoadError naming the file; a split size
// other than the dataset's raises InvalidConfig.
std::vector<FundusSample> load_dataset(const DatasetSpec& spec);

// Writes samples into the same layout (PNG) under <root>/<name>/<split>.
void write_dataset(const std::filesystem::path& root, const std::string& name, Split split,
                   const std::vector<FundusSample>& samples);

// Same window applied to the image and both masks, uniform over valid offsets.
// Throws InvalidArgument when the sample is smaller than the window.
FundusSample random_crop(const FundusSample& sample, std::int64_t height, std::int64_t width, std::mt19937_64& rng);
FundusSample crop(const FundusSample& sample, std::int64_t top, std::int64_t left, std::int64_t height,
                  std::int64_t width);

// Window origins along one axis: stride round(window * (1 - overlap)), last
// window flush with the far edge.
std::vector<std::int64_t> window_origins(std::int64_t extent, std::int64_t window, double overlap);

// Maps a (window x window) image patch to logits of the same shape.
using PatchPredictor = std::function<Grid(const Grid&)>;

// Mean of per-window sigmoid probabilities over every covering window.
Grid sliding_window_predict(const PatchPredictor& predict, const Grid& image, std::int64_t window = 224,
                            double overlap = 0.5);

struct SyntheticVesselConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  int images = 4;
  int trees = 3;
  double branch_probability = 0.01;
  double width_min = 1.5;
  double width_max = 3.5;
  double curvature = 0.2;  // max heading change per unit step, radians
  double contrast_min = 0.3;
  double contrast_max = 0.7;
  double background = 0.1;
  double noise = 0.05;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static SyntheticVesselConfig from_json(const std::string& json);
};

// A straight piece of centerline with its full vessel width.
struct TubeSegment {
  double r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  double width = 0;
  // Pixel centers within width / 2 of the segment are vessel.
  bool covers(double r, double c) const;
};

struct SyntheticImage {
  FundusSample sample;
  std::vector<TubeSegment> segments;
  std::vector<int> tree_of_segment;
};

// Bounded-curvature random walks with random branching, rasterized exactly.
// image = clamp(box3(mask) * contrast + background + noise, 0, 1).
std::vector<SyntheticImage> generate_synthetic_detailed(const SyntheticVesselConfig& cfg);
std::vector<FundusSample> generate_synthetic(const SyntheticVesselConfig& cfg);

}  // namespace hrefnet::data
