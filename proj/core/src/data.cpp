#include "hrefnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>

#include "hrefnet/errors.hpp"
#include "hrefnet/ops.hpp"

namespace hrefnet::data {

namespace fs = std::filesystem;

void check_sample(const FundusSample& s) {
  const auto same = [&](std::int64_t h, std::int64_t w) { return h == s.image.height && w == s.image.width; };
  if (!same(s.vessel_mask.height, s.vessel_mask.width)) {
    throw InvalidArgument("sample '" + s.id + "': mask shape differs from image");
  }
  if (s.fov_mask && !same(s.fov_mask->height, s.fov_mask->width)) {
    throw InvalidArgument("sample '" + s.id + "': fov shape differs from image");
  }
}

DatasetInfo dataset_info(const std::string& name) {
  if (name == "DRIVE") return {20, 20, 584, 565};
  if (name == "STARE") return {15, 5, 605, 700};
  if (name == "CHASE_DB1") return {20, 8, 960, 999};
  if (name == "synthetic") return {};
  throw InvalidConfig("unknown dataset '" + name + "' (expected DRIVE|STARE|CHASE_DB1|synthetic)");
}

namespace {

std::vector<fs::path> list_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw LoadError("missing directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename().string().front() != '.') files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return files;
}

std::vector<FundusSample> load_split_dir(const fs::path& dir, int annotator) {
  const auto images = list_files(dir / "images");
  const auto masks = list_files(dir / (annotator == 1 ? "masks" : "masks" + std::to_string(annotator)));
  std::vector<fs::path> fovs;
  if (fs::is_directory(dir / "fov")) fovs = list_files(dir / "fov");
  if (masks.size() != images.size()) {
    throw LoadError(dir.string() + ": " + std::to_string(images.size()) + " images but " +
                    std::to_string(masks.size()) + " masks");
  }
  if (!fovs.empty() && fovs.size() != images.size()) {
    throw LoadError(dir.string() + ": " + std::to_string(images.size()) + " images but " +
                    std::to_string(fovs.size()) + " fov masks");
  }
  std::vector<FundusSample> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    FundusSample s;
    s.id = images[i].stem().string();
    s.image = to_unit_gray(read_image(images[i]));
    s.vessel_mask = binarize(read_image(masks[i]));
    if (!fovs.empty()) s.fov_mask = binarize(read_image(fovs[i]));
    try {
      check_sample(s);
    } catch (const InvalidArgument& e) {
      throw LoadError(images[i].string() + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<FundusSample> load_dataset(const DatasetSpec& spec) {
  const DatasetInfo info = dataset_info(spec.name);
  if (spec.annotator < 1) throw InvalidConfig("annotator must be >= 1");
  const fs::path base = spec.root / spec.name;
  const char* split_dir = spec.split == Split::training ? "training" : "test";
  std::vector<FundusSample> out;

  if (spec.name == "STARE") {
    std::vector<FundusSample> pool;
    for (const char* d : {"training", "test"}) {
      if (!fs::is_directory(base / d)) continue;
      auto part = load_split_dir(base / d, spec.annotator);
      pool.insert(pool.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::vector<std::string> train_ids = spec.train_ids;
    if (train_ids.empty()) {
      for (std::size_t i = 0; i < pool.size() && i < static_cast<std::size_t>(info.train); ++i) {
        train_ids.push_back(pool[i].id);
      }
    }
    for (auto& s : pool) {
      const bool in_train = std::find(train_ids.begin(), train_ids.end(), s.id) != train_ids.end();
      if (in_train == (spec.split == Split::training)) out.push_back(std::move(s));
    }
  } else {
    out = load_split_dir(base / split_dir, spec.annotator);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }

  const int expected = spec.split == Split::training ? info.train : info.test;
  if (expected > 0 && static_cast<int>(out.size()) != expected) {
    throw InvalidConfig(spec.name + " " + split_dir + " split has " + std::to_string(out.size()) +
                        " samples, expected " + std::to_string(expected));
  }
  if (out.empty()) throw LoadError("no samples under " + (base / split_dir).string());
  return out;
}

void write_dataset(const fs::path& root, const std::string& name, Split split,
                   const std::vector<FundusSample>& samples) {
  const fs::path dir = root / name / (split == Split::training ? "training" : "test");
  for (const auto& s : samples) {
    check_sample(s);
    write_png(dir / "images" / (s.id + ".png"), grid_to_image(s.image));
    write_png(dir / "masks" / (s.id + ".png"), mask_to_image(s.vessel_mask));
    if (s.fov_mask) write_png(dir / "fov" / (s.id + ".png"), mask_to_image(*s.fov_mask));
  }
}

FundusSample crop(const FundusSample& s, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w) {
  if (top < 0 || left < 0 || top + h > s.image.height || left + w > s.image.width) {
    throw InvalidArgument("crop window outside the image");
  }
  FundusSample out;
  out.id = s.id;
  out.image = Grid(h, w);
  out.vessel_mask = BinaryMask(h, w);
  if (s.fov_mask) out.fov_mask = BinaryMask(h, w);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      out.image(r, c) = s.image(top + r, left + c);
      out.vessel_mask(r, c) = s.vessel_mask(top + r, left + c);
      if (s.fov_mask) (*out.fov_mask)(r, c) = (*s.fov_mask)(top + r, left + c);
    }
  }
  return out;
}

FundusSample random_crop(const FundusSample& s, std::int64_t h, std::int64_t w, std::mt19937_64& rng) {
  check_sample(s);
  if (s.image.height < h || s.image.width < w) {
    throw InvalidArgument("random_crop: " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                          " image is smaller than the " + std::to_string(h) + "x" + std::to_string(w) + " window");
  }
  std::uniform_int_distribution<std::int64_t> top(0, s.image.height - h);
  std::uniform_int_distribution<std::int64_t> left(0, s.image.width - w);
  const std::int64_t t = top(rng);
  return crop(s, t, left(rng), h, w);
}

std::vector<std::int64_t> window_origins(std::int64_t extent, std::int64_t window, double overlap) {
  if (window <= 0 || extent < window) {
    throw InvalidArgument("window " + std::to_string(window) + " does not fit extent " + std::to_string(extent));
  }
  if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidArgument("overlap must be in [0, 1)");
  const std::int64_t stride = std::max<std::int64_t>(1, std::llround(static_cast<double>(window) * (1.0 - overlap)));
  std::vector<std::int64_t> o;
  for (std::int64_t p = 0; p + window < extent; p += stride) o.push_back(p);
  o.push_back(extent - window);
  return o;
}

Grid sliding_window_predict(const PatchPredictor& predict, const Grid& image, std::int64_t window, double overlap) {
  const auto rows = window_origins(image.height, window, overlap);
  const auto cols = window_origins(image.width, window, overlap);
  Grid sum(image.height, image.width), count(image.height, image.width);
  Grid patch(window, window);
  for (const std::int64_t top : rows) {
    for (const std::int64_t left : cols) {
      for (std::int64_t r = 0; r < window; ++r) {
        std::copy_n(image.values.begin() + (top + r) * image.width + left, window, patch.values.begin() + r * window);
      }
      const Grid logits = predict(patch);
      if (logits.height != window || logits.width != window) throw InvalidArgument("predictor changed the patch shape");
      for (std::int64_t r = 0; r < window; ++r) {
        for (std::int64_t c = 0; c < window; ++c) {
          sum(top + r, left + c) += ops::sigmoid_scalar(logits(r, c));
          count(top + r, left + c) += 1.0;
        }
      }
    }
  }
  for (std::int64_t i = 0; i < sum.size(); ++i) sum.values[i] /= count.values[i];
  return sum;
}

std::string SyntheticVesselConfig::to_json() const {
  nlohmann::json j{{"height", height},
                   {"width", width},
                   {"images", images},
                   {"trees", trees},
                   {"branch_probability", branch_probability},
                   {"width_min", width_min},
                   {"width_max", width_max},
                   {"curvature", curvature},
                   {"contrast_min", contrast_min},
                   {"contrast_max", contrast_max},
                   {"background", background},
                   {"noise", noise},
                   {"seed", seed}};
  return j.dump(2);
}

SyntheticVesselConfig SyntheticVesselConfig::from_json(const std::string& text) {
  SyntheticVesselConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("synthetic config: ") + e.what());
  }
  const auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidConfig(std::string("synthetic config field '") + key + "': " + e.what());
    }
  };
  get("height", c.height);
  get("width", c.width);
  get("images", c.images);
  get("trees", c.trees);
  get("branch_probability", c.branch_probability);
  get("width_min", c.width_min);
  get("width_max", c.width_max);
  get("curvature", c.curvature);
  get("contrast_min", c.contrast_min);
  get("contrast_max", c.contrast_max);
  get("background", c.background);
  get("noise", c.noise);
  get("seed", c.seed);
  if (c.height < 8 || c.width < 8 || c.images < 1 || c.trees < 0) throw InvalidConfig("synthetic config: bad sizes");
  if (c.width_min <= 0 || c.width_max < c.width_min) throw InvalidConfig("synthetic config: bad width range");
  return c;
}

bool TubeSegment::covers(double r, double c) const {
  const double dr = r1 - r0, dc = c1 - c0;
  const double len2 = dr * dr + dc * dc;
  double t = len2 > 0 ? ((r - r0) * dr + (c - c0) * dc) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double er = r0 + t * dr - r, ec = c0 + t * dc - c;
  return er * er + ec * ec <= 0.25 * width * width;
}

namespace {

struct Walker {
  double r, c, heading, width;
  int depth;
};

void rasterize(const TubeSegment& s, BinaryMask& m) {
  const double pad = 0.5 * s.width + 1.0;
  const auto r_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(std::min(s.r0, s.r1) - pad)));
  const auto r_hi = std::min<std::int64_t>(m.height - 1, static_cast<std::int64_t>(std::ceil(std::max(s.r0, s.r1) + pad)));
  const auto c_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(std::min(s.c0, s.c1) - pad)));
  const auto c_hi = std::min<std::int64_t>(m.width - 1, static_cast<std::int64_t>(std::ceil(std::max(s.c0, s.c1) + pad)));
  for (std::int64_t r = r_lo; r <= r_hi; ++r) {
    for (std::int64_t c = c_lo; c <= c_hi; ++c) {
      if (s.covers(static_cast<double>(r), static_cast<double>(c))) m(r, c) = 1;
    }
  }
}

}  // namespace

std::vector<SyntheticImage> generate_synthetic_detailed(const SyntheticVesselConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double h = static_cast<double>(cfg.height), w = static_cast<double>(cfg.width);
  const int max_steps = static_cast<int>(cfg.height + cfg.width);
  constexpr int kMaxWalkers = 64;

  std::vector<SyntheticImage> out;
  for (int i = 0; i < cfg.images; ++i) {
    SyntheticImage si;
    for (int t = 0; t < cfg.trees; ++t) {
      // start on a random edge, heading inward
      const int edge = static_cast<int>(unit(rng) * 4) % 4;
      const double along = unit(rng);
      Walker root{};
      double inward = 0.0;
      switch (edge) {
        case 0: root.r = 0; root.c = along * (w - 1); inward = std::numbers::pi / 2; break;
        case 1: root.r = h - 1; root.c = along * (w - 1); inward = -std::numbers::pi / 2; break;
        case 2: root.r = along * (h - 1); root.c = 0; inward = 0.0; break;
        default: root.r = along * (h - 1); root.c = w - 1; inward = std::numbers::pi; break;
      }
      root.heading = inward + uniform(-std::numbers::pi / 4, std::numbers::pi / 4);
      root.width = uniform(cfg.width_min, cfg.width_max);
      root.depth = 0;

      std::vector<Walker> queue{root};
      for (std::size_t q = 0; q < queue.size(); ++q) {
        Walker wk = queue[q];
        for (int step = 0; step < max_steps; ++step) {
          wk.heading += uniform(-cfg.curvature, cfg.curvature);
          const double nr = wk.r + std::sin(wk.heading);
          const double nc = wk.c + std::cos(wk.heading);
          si.segments.push_back({wk.r, wk.c, nr, nc, wk.width});
          si.tree_of_segment.push_back(t);
          wk.r = nr;
          wk.c = nc;
          if (nr < -wk.width || nc < -wk.width || nr > h - 1 + wk.width || nc > w - 1 + wk.width) break;
          if (wk.depth < 2 && queue.size() < kMaxWalkers && unit(rng) < cfg.branch_probability) {
            const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
            queue.push_back({nr, nc, wk.heading + side * uniform(0.4, 0.9), uniform(cfg.width_min, cfg.width_max),
                             wk.depth + 1});
          }
        }
      }
    }

    FundusSample& s = si.sample;
    s.id = "synth_" + std::string(i < 10 ? "00" : i < 100 ? "0" : "") + std::to_string(i);
    s.vessel_mask = BinaryMask(cfg.height, cfg.width);
    for (const auto& seg : si.segments) rasterize(seg, s.vessel_mask);

    const double contrast = uniform(cfg.contrast_min, cfg.contrast_max);
    std::normal_distribution<double> noise(0.0, 1.0);
    s.image = Grid(cfg.height, cfg.width);
    for (std::int64_t r = 0; r < cfg.height; ++r) {
      for (std::int64_t c = 0; c < cfg.width; ++c) {
        int n = 0;
        for (std::int64_t dr = -1; dr <= 1; ++dr) {
          for (std::int64_t dc = -1; dc <= 1; ++dc) n += s.vessel_mask.contains(r + dr, c + dc) ? 1 : 0;
        }
        double v = contrast * n / 9.0 + cfg.background;
        if (cfg.noise > 0) v += cfg.noise * noise(rng);
        s.image(r, c) = std::clamp(v, 0.0, 1.0);
      }
    }
    out.push_back(std::move(si));
  }
  return out;
}

std::vector<FundusSample> generate_synthetic(const SyntheticVesselConfig& cfg) {
  auto detailed = generate_synthetic_detailed(cfg);
  std::vector<FundusSample> out;
  out.reserve(detailed.size());
  for (auto& d : detailed) out.push_back(std::move(d.sample));
  return out;
}

}  // namespace hrefnet::data
