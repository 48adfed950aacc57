#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "hrefnet/config.hpp"
#include "hrefnet/core_model.hpp"
#include "hrefnet/data.hpp"
#include "hrefnet/errors.hpp"
#include "hrefnet/image.hpp"
#include "hrefnet/metrics.hpp"
#include "hrefnet/train.hpp"

using namespace hrefnet;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw LoadError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_text(path));
    if (!j.is_object()) throw InvalidConfig(path + ": expected a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw InvalidConfig(path + ": " + e.what());
  }
}

// A known dataset name resolves under the data root; anything else is a
// directory <root>/<name>.
data::DatasetSpec resolve_dataset(const std::string& arg, const std::string& data_root, data::Split split) {
  data::DatasetSpec spec;
  spec.split = split;
  for (const char* known : {"DRIVE", "STARE", "CHASE_DB1", "synthetic"}) {
    if (arg == known) {
      std::string root = data_root;
      if (root.empty()) {
        const char* env = std::getenv("HREFNET_DATA_ROOT");
        root = env ? env : ".";
      }
      spec.name = arg;
      spec.root = root;
      return spec;
    }
  }
  const fs::path p = fs::absolute(arg).lexically_normal();
  const fs::path dir = p.has_filename() ? p : p.parent_path();
  spec.name = dir.filename().string();
  spec.root = dir.parent_path();
  return spec;
}

data::Split parse_split(const std::string& s) {
  if (s == "training" || s == "train") return data::Split::training;
  if (s == "test") return data::Split::test;
  throw InvalidArgument("unknown split '" + s + "' (training or test)");
}

std::unique_ptr<model::HrefNet> load_model(const std::string& checkpoint) {
  train::Checkpoint ck = train::load_checkpoint(checkpoint);
  return std::move(ck.model);
}

void print_epoch(const train::EpochRecord& r) {
  std::printf("epoch %4d  loss %.6f  lr %.3g", r.epoch, r.loss, r.lr);
  if (r.val_dice) std::printf("  val Dice %.2f", *r.val_dice);
  std::printf("\n");
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HREFNet retinal vessel segmentation"};
  app.require_subcommand(1);

  std::string data_root;
  app.add_option("--data-root", data_root, "Root holding <name>/{training,test} (default $HREFNET_DATA_ROOT or .)");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_dataset, tr_preset, tr_config, tr_out, tr_resume, tr_split = "training";
  std::optional<std::uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  tr->add_option("--dataset", tr_dataset, "Dataset name or directory")->required();
  tr->add_option("--preset", tr_preset, "Model preset")->check(CLI::IsMember({"tiny", "middle", "large"}));
  tr->add_option("--config", tr_config, "JSON file with \"model\" and \"train\" sections");
  tr->add_option("--seed", tr_seed, "Random seed");
  tr->add_option("--epochs", tr_epochs, "Total epochs");
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  tr->add_option("--resume", tr_resume, "Continue from a checkpoint");
  tr->add_option("--split", tr_split, "Split to train on");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_dataset, ev_report, ev_split = "test";
  bool ev_fov = false;
  std::int64_t ev_window = 224;
  double ev_overlap = 0.5, ev_threshold = 0.5;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--dataset", ev_dataset)->required();
  ev->add_option("--report", ev_report, "CSV output (- for stdout)")->required();
  ev->add_flag("--fov", ev_fov, "Restrict ACC and AUC to the field of view");
  ev->add_option("--split", ev_split);
  ev->add_option("--window", ev_window);
  ev->add_option("--overlap", ev_overlap);
  ev->add_option("--threshold", ev_threshold);

  // predict
  auto* pr = app.add_subcommand("predict", "Probability map for one image");
  std::string pr_ckpt, pr_image, pr_out, pr_mask_out;
  std::int64_t pr_window = 224;
  double pr_threshold = 0.5;
  pr->add_option("--checkpoint", pr_ckpt)->required();
  pr->add_option("--image", pr_image)->required()->check(CLI::ExistingFile);
  pr->add_option("--out", pr_out, "Probability PNG")->required();
  pr->add_option("--mask-out", pr_mask_out, "Thresholded mask PNG");
  pr->add_option("--window", pr_window);
  pr->add_option("--threshold", pr_threshold);

  // render-errors
  auto* re = app.add_subcommand("render-errors", "Colour TP/FP/FN pixels");
  std::string re_pred, re_gt, re_out;
  re->add_option("--pred", re_pred)->required()->check(CLI::ExistingFile);
  re->add_option("--gt", re_gt)->required()->check(CLI::ExistingFile);
  re->add_option("--out", re_out)->required();

  // synth
  auto* sy = app.add_subcommand("synth", "Write a synthetic vessel dataset");
  std::string sy_config, sy_out;
  int sy_test = 2;
  sy->add_option("--config", sy_config, "Synthetic generator JSON");
  sy->add_option("--out", sy_out, "Output root")->required();
  sy->add_option("--test-images", sy_test, "Images in the test split");

  // info
  auto* in = app.add_subcommand("info", "Model size and cost");
  std::string in_preset = "tiny", in_ckpt;
  std::int64_t in_size = 224;
  in->add_option("--preset", in_preset)->check(CLI::IsMember({"tiny", "middle", "large"}));
  in->add_option("--checkpoint", in_ckpt);
  in->add_option("--size", in_size, "Input side");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*tr) {
      const json cfg = read_config(tr_config);
      ModelConfig mc = ModelConfig::preset(tr_preset.empty() ? "tiny" : tr_preset);
      if (cfg.contains("model")) {
        json m = cfg.at("model");
        if (!tr_preset.empty()) m.erase("preset");
        mc = ModelConfig::from_json(m.dump(), mc);
      }
      train::TrainConfig tc = cfg.contains("train") ? train::TrainConfig::from_json(cfg.dump(), {}) : train::TrainConfig{};
      if (tr_seed) tc.seed = *tr_seed;
      if (tr_epochs) tc.epochs = *tr_epochs;
      tc.validate();

      const auto samples = data::load_dataset(resolve_dataset(tr_dataset, data_root, parse_split(tr_split)));
      model::HrefNet net(mc);
      std::mt19937_64 rng(tc.seed);
      net.init(rng);
      train::TrainOptions opts;
      opts.out_dir = tr_out;
      if (!tr_resume.empty()) opts.resume = tr_resume;
      opts.on_epoch = print_epoch;
      std::printf("training %s on %zu images, %lld parameters\n", mc.preset_name().c_str(), samples.size(),
                  static_cast<long long>(net.parameters().parameter_count()));
      const auto result = train::train(net, samples, tc, opts);
      std::printf("done: %lld optimizer steps, checkpoints in %s\n", static_cast<long long>(result.steps),
                  tr_out.c_str());
    } else if (*ev) {
      const auto net = load_model(ev_ckpt);
      const auto samples = data::load_dataset(resolve_dataset(ev_dataset, data_root, parse_split(ev_split)));
      train::EvalOptions eo{ev_window, ev_overlap, ev_threshold, ev_fov};
      const auto report = train::evaluate(*net, samples, eo);
      for (const auto& im : report.per_image)
        for (const auto& w : im.warnings) std::fprintf(stderr, "warning: %s: %s\n", im.id.c_str(), w.c_str());
      if (ev_report == "-") {
        metrics::write_report(std::cout, report);
      } else {
        if (fs::path(ev_report).has_parent_path()) fs::create_directories(fs::path(ev_report).parent_path());
        std::ofstream out(ev_report);
        if (!out) throw Error("cannot write " + ev_report);
        metrics::write_report(out, report);
        std::printf("Dice %.2f +- %.2f over %zu images, report in %s\n", report.summary[0].mean,
                    report.summary[0].std, report.per_image.size(), ev_report.c_str());
      }
    } else if (*pr) {
      const auto net = load_model(pr_ckpt);
      const Grid image = to_unit_gray(read_image(pr_image));
      train::EvalOptions eo;
      eo.window = pr_window;
      const Grid probs = train::predict_probabilities(*net, image, eo);
      write_png(pr_out, grid_to_image(probs));
      if (!pr_mask_out.empty()) write_png(pr_mask_out, mask_to_image(BinaryMask::threshold(probs, pr_threshold)));
    } else if (*re) {
      const Image8 img = train::render_error_map(binarize(read_image(re_pred)), binarize(read_image(re_gt)));
      write_png(re_out, img);
    } else if (*sy) {
      data::SyntheticVesselConfig sc =
          sy_config.empty() ? data::SyntheticVesselConfig{} : data::SyntheticVesselConfig::from_json(read_text(sy_config));
      data::write_dataset(sy_out, "synthetic", data::Split::training, data::generate_synthetic(sc));
      if (sy_test > 0) {
        sc.images = sy_test;
        sc.seed += 1;
        auto test = data::generate_synthetic(sc);
        for (auto& s : test) s.id = "test_" + s.id;
        data::write_dataset(sy_out, "synthetic", data::Split::test, test);
      }
      std::printf("wrote %s/synthetic\n", sy_out.c_str());
    } else if (*in) {
      std::unique_ptr<model::HrefNet> net =
          in_ckpt.empty() ? std::make_unique<model::HrefNet>(ModelConfig::preset(in_preset)) : load_model(in_ckpt);
      const auto cost = net->cost(in_size, in_size);
      std::printf("%s\n", net->config().to_json().c_str());
      std::printf("parameters %lld\nGFLOPs at %lldx%lld: %.3f\n", static_cast<long long>(cost.parameters),
                  static_cast<long long>(in_size), static_cast<long long>(in_size), cost.flops() / 1e9);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
