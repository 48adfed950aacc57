#include "hrefnet/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "hrefnet/errors.hpp"

namespace hrefnet::train {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  const auto require = [](bool ok, const char* msg) {
    if (!ok) throw InvalidConfig(std::string("train config: ") + msg);
  };
  require(lr > 0, "lr must be positive");
  require(lr_floor > 0 && lr_floor <= lr, "lr_floor must be in (0, lr]");
  require(lr_decay > 0 && lr_decay < 1, "lr_decay must be in (0, 1)");
  require(patience >= 1, "patience must be >= 1");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must be in [0, 1)");
  require(adam_eps > 0, "adam_eps must be positive");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(train_only_epochs >= 0, "train_only_epochs must be >= 0");
  require(patches_per_image >= 1, "patches_per_image must be >= 1");
  require(patch_size >= 1, "patch_size must be >= 1");
  require(val_fraction >= 0 && val_fraction < 1, "val_fraction must be in [0, 1)");
  require(threshold > 0 && threshold < 1, "threshold must be in (0, 1)");
  require(overlap >= 0 && overlap < 1, "overlap must be in [0, 1)");
  require(device == "cpu", "only the cpu device is available");
}

namespace {

json config_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"lr_decay", c.lr_decay},
          {"lr_floor", c.lr_floor},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"train_only_epochs", c.train_only_epochs},
          {"patches_per_image", c.patches_per_image},
          {"patch_size", c.patch_size},
          {"val_fraction", c.val_fraction},
          {"seed", c.seed},
          {"device", c.device},
          {"threshold", c.threshold},
          {"overlap", c.overlap}};
}

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("train config field '") + key + "': " + e.what());
  }
}

}  // namespace

std::string TrainConfig::to_json() const { return config_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text, const TrainConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("train config: ") + e.what());
  }
  if (j.contains("train")) j = j.at("train");
  TrainConfig c = base;
  read(j, "lr", c.lr);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "weight_decay", c.weight_decay);
  read(j, "lr_decay", c.lr_decay);
  read(j, "lr_floor", c.lr_floor);
  read(j, "patience", c.patience);
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "train_only_epochs", c.train_only_epochs);
  read(j, "patches_per_image", c.patches_per_image);
  read(j, "patch_size", c.patch_size);
  read(j, "val_fraction", c.val_fraction);
  read(j, "seed", c.seed);
  read(j, "device", c.device);
  read(j, "threshold", c.threshold);
  read(j, "overlap", c.overlap);
  c.validate();
  return c;
}

Var bce_loss(const Var& logits, const Tensor& targets) { return ops::bce_with_logits(logits, targets); }

PlateauScheduler::PlateauScheduler(double lr, double factor, double floor, int patience)
    : lr_(lr), factor_(factor), floor_(floor), patience_(patience) {}

double PlateauScheduler::step(double loss) {
  if (!has_best_ || loss < best_) {
    best_ = loss;
    has_best_ = true;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ = std::max(lr_ * factor_, floor_);
    bad_ = 0;
  }
  return lr_;
}

void PlateauScheduler::restore(double lr, double best, int bad, bool has) {
  lr_ = lr;
  best_ = best;
  bad_ = bad;
  has_best_ = has;
}

double plateau_lr(const std::vector<double>& losses, double lr0, double factor, double floor, int patience) {
  PlateauScheduler s(lr0, factor, floor, patience);
  for (double l : losses) s.step(l);
  return s.lr();
}

AdamW::AdamW(const ParameterSet& params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params.parameters()) {
    params_.push_back(p.var);
    m.push_back(Tensor::zeros_like(p.var.value()));
    v.push_back(Tensor::zeros_like(p.var.value()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var p = params_[i];
    const Tensor& g = p.grad();
    Tensor& w = p.mutable_value();
    double* mi = m[i].data();
    double* vi = v[i].data();
    const bool has_grad = g.numel() == w.numel();
    for (std::int64_t k = 0; k < w.numel(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      mi[k] = beta1_ * mi[k] + (1.0 - beta1_) * gk;
      vi[k] = beta2_ * vi[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr * wd_ * w[k];
      w[k] -= lr * (mi[k] / c1) / (std::sqrt(vi[k] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'H', 'R', 'E', 'F', 'N', 'E', 'T', 'C'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json history_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const auto& r : h) {
    json e{{"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}};
    e["val_dice"] = r.val_dice ? json(*r.val_dice) : json(nullptr);
    a.push_back(e);
  }
  return a;
}

void write_tensor(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const fs::path& path, const model::HrefNet& net, const CheckpointMeta& meta,
                     const AdamW* opt) {
  json h;
  h["version"] = CheckpointMeta::kFormatVersion;
  h["model"] = json::parse(net.config().to_json());
  h["train"] = config_json(meta.train);
  h["epoch"] = meta.epoch;
  h["rng_state"] = meta.rng_state;
  h["best_val_dice"] = meta.best_val_dice ? json(*meta.best_val_dice) : json(nullptr);
  h["history"] = history_json(meta.history);
  h["train_ids"] = meta.train_ids;
  h["val_ids"] = meta.val_ids;
  h["scheduler"] = {{"lr", meta.lr}, {"best", meta.sched_best}, {"bad", meta.sched_bad}, {"has_best", meta.sched_has_best}};

  std::vector<const Tensor*> blobs;
  json tensors = json::array();
  const auto add = [&](const std::string& kind, const std::string& name, const Tensor& t) {
    tensors.push_back({{"kind", kind}, {"name", name}, {"shape", t.shape()}});
    blobs.push_back(&t);
  };
  for (const auto& p : net.parameters().parameters()) add("param", p.name, p.var.value());
  for (const auto& b : net.parameters().buffers()) add("buffer", b.name, b.var.value());
  if (opt) {
    h["optimizer_steps"] = opt->steps();
    const auto& ps = net.parameters().parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) add("adam_m", ps[i].name, opt->m[i]);
    for (std::size_t i = 0; i < ps.size(); ++i) add("adam_v", ps[i].name, opt->v[i]);
  }
  h["tensors"] = tensors;

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    const std::string header = h.dump();
    const std::uint32_t version = CheckpointMeta::kFormatVersion;
    const std::uint64_t len = header.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Tensor* t : blobs) write_tensor(out, *t);
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw LoadError(path.string() + ": not a checkpoint");
  if (version != CheckpointMeta::kFormatVersion) {
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (len > (std::uint64_t{1} << 32)) throw LoadError(path.string() + ": corrupt header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw LoadError(path.string() + ": truncated header");

  Checkpoint ck;
  try {
    const json h = json::parse(header);
    CheckpointMeta& m = ck.meta;
    m.version = h.at("version").get<int>();
    m.model = ModelConfig::from_json(h.at("model").dump(), ModelConfig{});
    m.train = TrainConfig::from_json(h.at("train").dump(), TrainConfig{});
    m.epoch = h.at("epoch").get<int>();
    m.rng_state = h.at("rng_state").get<std::string>();
    if (!h.at("best_val_dice").is_null()) m.best_val_dice = h.at("best_val_dice").get<double>();
    for (const auto& e : h.at("history")) {
      EpochRecord r{e.at("epoch").get<int>(), e.at("loss").get<double>(), e.at("lr").get<double>(), std::nullopt};
      if (!e.at("val_dice").is_null()) r.val_dice = e.at("val_dice").get<double>();
      m.history.push_back(r);
    }
    m.train_ids = h.at("train_ids").get<std::vector<std::string>>();
    m.val_ids = h.at("val_ids").get<std::vector<std::string>>();
    const json& s = h.at("scheduler");
    m.lr = s.at("lr").get<double>();
    m.sched_best = s.at("best").get<double>();
    m.sched_bad = s.at("bad").get<int>();
    m.sched_has_best = s.at("has_best").get<bool>();
    if (h.contains("optimizer_steps")) ck.optimizer_steps = h.at("optimizer_steps").get<std::int64_t>();

    ck.model = std::make_unique<model::HrefNet>(m.model);
    ParameterSet& ps = ck.model->parameters();
    std::size_t param_index = 0;
    for (const auto& t : h.at("tensors")) {
      const std::string kind = t.at("kind").get<std::string>();
      const std::string name = t.at("name").get<std::string>();
      const Shape shape = t.at("shape").get<Shape>();
      Tensor value(shape);
      in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.numel() * sizeof(double)));
      if (!in) throw LoadError(path.string() + ": truncated tensor data at '" + name + "'");
      if (kind == "adam_m") {
        ck.adam_m.push_back(std::move(value));
        continue;
      }
      if (kind == "adam_v") {
        ck.adam_v.push_back(std::move(value));
        continue;
      }
      const NamedTensor* nt = ps.find(name);
      if (!nt || nt->var.shape() != shape) {
        throw LoadError(path.string() + ": tensor '" + name + "' does not match the model");
      }
      Var(nt->var).mutable_value() = std::move(value);
      if (kind == "param") ++param_index;
    }
    if (param_index != ps.parameters().size()) throw LoadError(path.string() + ": missing parameters");
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": bad header: " + e.what());
  } catch (const InvalidConfig& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return ck;
}

// ---------------------------------------------------------------- training

std::int64_t fit_window(std::int64_t want, std::int64_t extent, int divisor) {
  const std::int64_t w = std::min(want, extent) / divisor * divisor;
  if (w <= 0) {
    throw InvalidArgument("extent " + std::to_string(extent) + " is smaller than the model divisor " +
                          std::to_string(divisor));
  }
  return w;
}

Tensor grid_to_tensor(const Grid& g) { return Tensor({g.height, g.width}, g.values); }

Grid tensor_to_grid(const Tensor& t) {
  if (t.rank() != 2) throw InvalidArgument("tensor_to_grid: expected rank 2");
  Grid g(t.dim(0), t.dim(1));
  std::copy(t.data(), t.data() + t.numel(), g.values.begin());
  return g;
}

namespace {

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw LoadError("corrupt rng state in checkpoint");
}

double mean_dice(const metrics::MetricsReport& r) { return r.summary[0].mean; }

}  // namespace

TrainResult train(model::HrefNet& net, const std::vector<data::FundusSample>& samples, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  if (samples.empty()) throw InvalidArgument("train: empty dataset");
  for (const auto& s : samples) data::check_sample(s);

  const int divisor = net.config().spatial_divisor();
  CheckpointMeta meta;
  meta.model = net.config();
  meta.train = cfg;
  std::mt19937_64 rng(cfg.seed);
  PlateauScheduler sched(cfg.lr, cfg.lr_decay, cfg.lr_floor, cfg.patience);
  AdamW opt(net.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

  if (options.resume) {
    Checkpoint ck = load_checkpoint(*options.resume);
    if (ck.meta.model != net.config()) throw InvalidConfig("resume: checkpoint model config differs");
    const auto& src = ck.model->parameters();
    auto& dst = net.parameters();
    for (std::size_t i = 0; i < src.parameters().size(); ++i) {
      Var(dst.parameters()[i].var).mutable_value() = src.parameters()[i].var.value();
    }
    for (std::size_t i = 0; i < src.buffers().size(); ++i) {
      Var(dst.buffers()[i].var).mutable_value() = src.buffers()[i].var.value();
    }
    if (!ck.optimizer_steps || ck.adam_m.size() != opt.m.size()) {
      throw LoadError("resume: checkpoint has no optimizer state");
    }
    opt.m = std::move(ck.adam_m);
    opt.v = std::move(ck.adam_v);
    opt.set_steps(*ck.optimizer_steps);
    meta = ck.meta;
    meta.train = cfg;
    rng_from_string(rng, meta.rng_state);
    sched.restore(meta.lr, meta.sched_best, meta.sched_bad, meta.sched_has_best);
  } else {
    // seeded held-out validation split
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(samples.size())));
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i < n_val ? meta.val_ids : meta.train_ids).push_back(samples[order[i]].id);
    }
    std::sort(meta.train_ids.begin(), meta.train_ids.end());
    std::sort(meta.val_ids.begin(), meta.val_ids.end());
  }

  const auto by_ids = [&](const std::vector<std::string>& ids) {
    std::vector<const data::FundusSample*> out;
    for (const auto& id : ids) {
      const auto it = std::find_if(samples.begin(), samples.end(), [&](const auto& s) { return s.id == id; });
      if (it == samples.end()) throw InvalidArgument("train: sample '" + id + "' missing from the dataset");
      out.push_back(&*it);
    }
    return out;
  };
  const auto train_set = by_ids(meta.train_ids);
  const auto val_set_ptrs = by_ids(meta.val_ids);
  std::vector<data::FundusSample> val_set;
  for (const auto* p : val_set_ptrs) val_set.push_back(*p);
  if (train_set.empty()) throw InvalidArgument("train: no training images after the validation split");

  const std::int64_t patches = static_cast<std::int64_t>(train_set.size()) * cfg.patches_per_image;
  const std::int64_t batches = (patches + cfg.batch_size - 1) / cfg.batch_size;
  const int last_epoch = options.max_epochs > 0 ? std::min(cfg.epochs, options.max_epochs) : cfg.epochs;

  TrainResult result;
  std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
  for (int epoch = meta.epoch + 1; epoch <= last_epoch; ++epoch) {
    const double lr = sched.lr();
    double loss_sum = 0.0;
    std::int64_t done = 0;
    for (std::int64_t b = 0; b < batches; ++b) {
      if (options.max_steps >= 0 && opt.steps() >= options.max_steps) break;
      const std::int64_t n = std::min<std::int64_t>(cfg.batch_size, patches - b * cfg.batch_size);
      std::int64_t ph = 0, pw = 0;
      Tensor x, y;
      for (std::int64_t k = 0; k < n; ++k) {
        const data::FundusSample& s = *train_set[pick(rng)];
        if (k == 0) {
          ph = fit_window(cfg.patch_size, s.image.height, divisor);
          pw = fit_window(cfg.patch_size, s.image.width, divisor);
          x = Tensor({n, 1, ph, pw});
          y = Tensor({n, 1, ph, pw});
        }
        const data::FundusSample patch = data::random_crop(s, ph, pw, rng);
        for (std::int64_t i = 0; i < ph * pw; ++i) {
          x[k * ph * pw + i] = patch.image.values[static_cast<std::size_t>(i)];
          y[k * ph * pw + i] = patch.vessel_mask.bits[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        }
      }
      net.parameters().zero_grad();
      Var loss = bce_loss(net.forward(Var(std::move(x)), true), y);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(b + 1) +
                           " (optimizer step " + std::to_string(opt.steps() + 1) + ")");
      }
      loss.backward();
      opt.step(lr);
      loss_sum += lv;
      ++done;
    }
    if (done == 0) break;

    EpochRecord rec{epoch, loss_sum / static_cast<double>(done), lr, std::nullopt};
    sched.step(rec.loss);
    const bool validate = epoch > cfg.train_only_epochs && !val_set.empty();
    bool improved = false;
    if (validate) {
      EvalOptions eo;
      eo.window = cfg.patch_size;
      eo.overlap = cfg.overlap;
      eo.threshold = cfg.threshold;
      rec.val_dice = mean_dice(evaluate(net, val_set, eo));
      if (!meta.best_val_dice || *rec.val_dice > *meta.best_val_dice) {
        meta.best_val_dice = rec.val_dice;
        improved = true;
      }
    }
    meta.history.push_back(rec);
    meta.epoch = epoch;
    meta.rng_state = rng_to_string(rng);
    meta.lr = sched.lr();
    meta.sched_best = sched.best();
    meta.sched_bad = sched.bad_epochs();
    meta.sched_has_best = sched.has_best();
    if (!options.out_dir.empty()) {
      save_checkpoint(options.out_dir / "last.ckpt", net, meta, &opt);
      if (improved) save_checkpoint(options.out_dir / "best.ckpt", net, meta, &opt);
    }
    if (options.on_epoch) options.on_epoch(rec);
    if (done < batches) break;
  }
  if (meta.rng_state.empty()) meta.rng_state = rng_to_string(rng);
  result.meta = meta;
  result.steps = opt.steps();
  return result;
}

// ---------------------------------------------------------------- evaluation

Grid predict_probabilities(const model::HrefNet& net, const Grid& image, const EvalOptions& opts) {
  const int div = net.config().spatial_divisor();
  const std::int64_t window = fit_window(opts.window, std::min(image.height, image.width), div);
  const data::PatchPredictor predictor = [&](const Grid& patch) {
    return tensor_to_grid(net.predict_logits(grid_to_tensor(patch)));
  };
  return data::sliding_window_predict(predictor, image, window, opts.overlap);
}

metrics::MetricsReport evaluate_probabilities(const std::vector<Grid>& probs,
                                              const std::vector<data::FundusSample>& samples,
                                              const EvalOptions& opts) {
  if (probs.size() != samples.size()) throw InvalidArgument("evaluate: probability/sample count mismatch");
  std::vector<metrics::ImageMetrics> per;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const BinaryMask* fov = opts.use_fov && s.fov_mask ? &*s.fov_mask : nullptr;
    per.push_back(metrics::evaluate_image(s.id, probs[i], s.vessel_mask, fov, opts.threshold));
  }
  return metrics::aggregate_report(std::move(per));
}

metrics::MetricsReport evaluate(const model::HrefNet& net, const std::vector<data::FundusSample>& samples,
                                const EvalOptions& opts) {
  if (samples.empty()) throw InvalidArgument("evaluate: empty test split");
  std::vector<Grid> probs;
  probs.reserve(samples.size());
  for (const auto& s : samples) probs.push_back(predict_probabilities(net, s.image, opts));
  return evaluate_probabilities(probs, samples, opts);
}

Image8 render_error_map(const BinaryMask& pred, const BinaryMask& gt) {
  if (!pred.same_shape(gt)) throw InvalidArgument("render_error_map: shape mismatch");
  Image8 img(pred.height, pred.width, 3);
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.bits[i], g = gt.bits[i];
    std::uint8_t* px = img.pixels.data() + i * 3;
    if (p && g) {
      px[1] = 255;
    } else if (p) {
      px[0] = 255;
    } else if (g) {
      px[0] = 255;
      px[1] = 255;
    }
  }
  return img;
}

}  // namespace hrefnet::train
