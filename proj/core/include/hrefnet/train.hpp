#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hrefnet/core_model.hpp"
#include "hrefnet/data.hpp"
#include "hrefnet/metrics.hpp"

namespace hrefnet::train {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double lr_decay = 0.7;
  double lr_floor = 1e-5;
  int patience = 2;
  int batch_size = 1;
  int epochs = 300;
  int train_only_epochs = 200;  // validation starts at epoch train_only_epochs + 1
  int patches_per_image = 8;
  int patch_size = 224;  // clamped to the image, rounded down to the model's divisor
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  std::string device = "cpu";
  double threshold = 0.5;
  double overlap = 0.5;

  // Throws InvalidConfig naming the offending field.
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& json, const TrainConfig& base);

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Mean BCE on logits against a binary target of the same shape.
Var bce_loss(const Var& logits, const Tensor& targets);

// Decays lr by `factor` (not below `floor`) once `patience` consecutive epochs
// fail to strictly beat the best loss so far.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.7, double floor = 1e-5, int patience = 2);
  double step(double epoch_loss);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  int bad_epochs() const noexcept { return bad_; }
  bool has_best() const noexcept { return has_best_; }
  void restore(double lr, double best, int bad_epochs, bool has_best);

 private:
  double lr_;
  double factor_;
  double floor_;
  int patience_;
  double best_ = 0.0;
  int bad_ = 0;
  bool has_best_ = false;
};

// One plateau step as a pure function of the loss history.
double plateau_lr(const std::vector<double>& losses, double lr0, double factor = 0.7, double floor = 1e-5,
                  int patience = 2);

// Adam with decoupled weight decay over every trainable parameter.
class AdamW {
 public:
  AdamW(const ParameterSet& params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  std::int64_t steps() const noexcept { return t_; }

  // First and second moments, in parameter order.
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Var> params_;
  double beta1_, beta2_, eps_, wd_;
  std::int64_t t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;  // mean over the epoch's steps
  double lr = 0.0;    // lr used during the epoch
  std::optional<double> val_dice;
};

struct CheckpointMeta {
  static constexpr int kFormatVersion = 1;
  int version = kFormatVersion;
  int epoch = 0;  // completed epochs
  ModelConfig model;
  TrainConfig train;
  std::string rng_state;
  std::optional<double> best_val_dice;
  std::vector<EpochRecord> history;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  // scheduler
  double lr = 0.0;
  double sched_best = 0.0;
  int sched_bad = 0;
  bool sched_has_best = false;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::unique_ptr<model::HrefNet> model;
  std::optional<std::int64_t> optimizer_steps;
  std::vector<Tensor> adam_m, adam_v;
};

// Binary layout: "HREFNETC", u32 version, u64 header length, JSON header,
// then raw little-endian float64 tensors in header order.
void save_checkpoint(const std::filesystem::path& path, const model::HrefNet& net, const CheckpointMeta& meta,
                     const AdamW* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep nothing on disk
  std::optional<std::filesystem::path> resume;
  int max_epochs = -1;            // stop early after this many epochs in total (-1: cfg.epochs)
  std::int64_t max_steps = -1;    // stop after this many optimizer steps in total
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  CheckpointMeta meta;
  std::int64_t steps = 0;
};

// The per-epoch loop. Non-finite loss throws NumericError naming the epoch and step.
TrainResult train(model::HrefNet& net, const std::vector<data::FundusSample>& samples, const TrainConfig& cfg,
                  const TrainOptions& options = {});

// Largest multiple of the divisor not above min(want, extent).
std::int64_t fit_window(std::int64_t want, std::int64_t extent, int divisor);

struct EvalOptions {
  std::int64_t window = 224;
  double overlap = 0.5;
  double threshold = 0.5;
  bool use_fov = false;
};

// Sigmoid probabilities for one image via sliding windows.
Grid predict_probabilities(const model::HrefNet& net, const Grid& image, const EvalOptions& opts = {});

metrics::MetricsReport evaluate(const model::HrefNet& net, const std::vector<data::FundusSample>& samples,
                                const EvalOptions& opts = {});
// Same report from precomputed probability grids, one per sample.
metrics::MetricsReport evaluate_probabilities(const std::vector<Grid>& probs,
                                              const std::vector<data::FundusSample>& samples,
                                              const EvalOptions& opts = {});

// TP green, FP red, FN yellow, TN black.
Image8 render_error_map(const BinaryMask& pred, const BinaryMask& gt);

Tensor grid_to_tensor(const Grid& g);  // (H, W)
Grid tensor_to_grid(const Tensor& t);

}  // namespace hrefnet::train
