// Acceptance checks: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "hrefnet/core_model.hpp"
#include "hrefnet/data.hpp"
#include "hrefnet/dsvss.hpp"
#include "hrefnet/metrics.hpp"
#include "hrefnet/train.hpp"
#include "metric_oracles.hpp"
#include "test_support.hpp"

using namespace hrefnet;
namespace ht = hrefnet::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

std::vector<int> failed;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void run(int id, const char* title, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (secs > limit_s) {
    o.pass = false;
    o.detail += " (over the " + std::to_string(static_cast<int>(limit_s)) + " s budget)";
  }
  if (!o.pass) failed.push_back(id);
  std::printf("criterion %d: %s - %s [%s; %.1f s]\n", id, o.pass ? "PASS" : "FAIL", title, o.detail.c_str(), secs);
  std::fflush(stdout);
}

// Scan order built from a sort key per cell.
std::vector<std::int64_t> oracle_scan(int dir, std::int64_t h, std::int64_t w) {
  std::vector<std::int64_t> cells(static_cast<std::size_t>(h * w));
  std::iota(cells.begin(), cells.end(), 0);
  const int base = dir > 6 ? dir - 2 : dir;
  const auto key = [&](std::int64_t i) -> std::pair<std::int64_t, std::int64_t> {
    const std::int64_t r = i / w, c = i % w;
    switch (base) {
      case 1: return {r, c};
      case 2: return {r, -c};
      case 3: return {c, r};
      case 4: return {c, -r};
      case 5: return {r + c, r};
      default: return {r + (w - 1 - c), r};
    }
  };
  std::stable_sort(cells.begin(), cells.end(), [&](auto a, auto b) { return key(a) < key(b); });
  if (dir > 6) std::reverse(cells.begin(), cells.end());
  return cells;
}

Outcome scan_bijection() {
  std::mt19937_64 rng(1);
  int checked = 0;
  for (std::int64_t h = 1; h <= 24; ++h)
    for (std::int64_t w = 1; w <= 24; ++w) {
      const Tensor x = ht::random_tensor({1, 2, h, w}, rng);
      for (int d = 1; d <= 8; ++d) {
        const auto o = dsvss::ScanOrder::make(d, h, w);
        if (*o.sequence_to_grid != oracle_scan(d, h, w)) {
          return {false, "direction " + std::to_string(d) + " on " + std::to_string(h) + "x" + std::to_string(w)};
        }
        const Tensor back = dsvss::deserialize_scan(dsvss::serialize_scan(Var(x), o), o).value();
        if (!(back == x)) return {false, "round trip failed"};
        ++checked;
      }
    }
  return {true, std::to_string(checked) + " orders match the sort-key oracle and invert exactly"};
}

Outcome ssm_oracle() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> len_d(1, 64), st_d(1, 16), e_d(1, 12);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int len = len_d(rng), st = st_d(rng), e = e_d(rng);
    const Tensor u = ht::random_tensor({1, e, 1, len}, rng), delta = ht::random_tensor({1, e, 1, len}, rng);
    const Tensor a_log = ht::uniform_tensor({e, st}, rng, -1.0, 2.0);
    const Tensor b = ht::random_tensor({1, st, 1, len}, rng), c = ht::random_tensor({1, st, 1, len}, rng);
    const Tensor d = ht::random_tensor({e}, rng), bias = ht::random_tensor({e}, rng);
    const Tensor y = dsvss::selective_scan(Var(u), Var(delta), Var(a_log), Var(b), Var(c), Var(d), Var(bias)).value();
    for (int ch = 0; ch < e; ++ch) {
      std::vector<double> uu(len), dt(len), aa(st), bb(len * st), cc(len * st);
      for (int t = 0; t < len; ++t) {
        uu[t] = u.at(0, ch, 0, t);
        dt[t] = ht::softplus_d(delta.at(0, ch, 0, t) + bias[ch]);
        for (int s = 0; s < st; ++s) {
          bb[t * st + s] = b.at(0, s, 0, t);
          cc[t * st + s] = c.at(0, s, 0, t);
        }
      }
      for (int s = 0; s < st; ++s) aa[s] = -std::exp(a_log[ch * st + s]);
      const auto ref = ht::naive_scan(uu, dt, aa, bb, cc, d[ch]);
      for (int t = 0; t < len; ++t) worst = std::max(worst, std::abs(y.at(0, ch, 0, t) - ref[t]));
    }
  }
  return {worst <= 1e-5, "100 instances, max abs error " + sci(worst)};
}

Outcome snake_zero_offset() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> side(1, 12), chans(1, 4), kk(1, 4);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 * kk(rng) + 1, c = chans(rng), cout = chans(rng);
    const std::int64_t h = side(rng), w = side(rng);
    const Tensor x = ht::random_tensor({1, c, h, w}, rng);
    const Tensor wx = ht::random_tensor({cout, c * k, 1, 1}, rng), wy = ht::random_tensor({cout, c * k, 1, 1}, rng);
    const Tensor b = ht::random_tensor({cout}, rng);
    const Var zero(Tensor({1, k, h, w}));
    const Tensor y = dsvss::snake_conv_forward(Var(x), zero, zero, Var(wx), Var(wy), Var(b), 1.0).value();
    worst = std::max(worst, max_abs_diff(y, ht::straight_snake_conv(x, wx, wy, b, k)));
  }
  return {worst <= 1e-5, "50 instances, max abs error " + sci(worst)};
}

bool checked_group(const std::string& n) {
  for (const char* key : {"snake.offset", "direction_logits", ".ss2d.dir"})
    if (n.find(key) != std::string::npos) return true;
  return n.starts_with("mref") || n.starts_with("head");
}

Outcome tiny_gradients() {
  model::HrefNet net(ModelConfig::preset("tiny"));
  std::mt19937_64 rng(4);
  net.init(rng);
  for (const auto& p : net.parameters().parameters())
    if (p.name.ends_with("direction_logits")) Var(p.var).mutable_value() = ht::random_tensor({8}, rng);
  Var x(ht::random_tensor({1, 1, 16, 16}, rng));
  const Tensor probe = ht::random_tensor({1, 1, 16, 16}, rng);
  std::vector<std::pair<std::string, Var>> params;
  for (const auto& p : net.parameters().parameters())
    if (checked_group(p.name)) params.emplace_back(p.name, p.var);
  const auto loss = [&] { return ops::dot_constant(net.forward(x, true), probe); };
  const auto st = ht::grad_check(loss, params, 4, rng, 1e-3, 1e-4, 1e-6);
  char buf[256];
  std::snprintf(buf, sizeof buf, "step 1e-3: %d/%d coordinates within 1e-4 (%.2f%%), worst %s %.3g", st.passed,
                st.checked, 100.0 * st.pass_fraction(), st.worst_name.c_str(), st.worst);
  return {st.pass_fraction() >= 0.99, buf};
}

Outcome softmax_simplex() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> shift(-100, 100);
  double sum_err = 0, shift_err = 0;
  for (int i = 0; i < 10000; ++i) {
    const Tensor z = ht::random_tensor({8}, rng, 10.0);
    Tensor zs = z;
    const double s = shift(rng);
    for (auto& v : zs.values()) v += s;
    const Tensor p = dsvss::direction_softmax(Var(z)).value(), q = dsvss::direction_softmax(Var(zs)).value();
    for (double v : p.values())
      if (!(v >= 0.0)) return {false, "negative weight"};
    sum_err = std::max(sum_err, std::abs(std::accumulate(p.values().begin(), p.values().end(), 0.0) - 1.0));
    shift_err = std::max(shift_err, max_abs_diff(p, q));
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "1e4 draws, |sum - 1| <= %.2g, shift error <= %.2g", sum_err, shift_err);
  return {sum_err <= 1e-6 && shift_err <= 1e-7, buf};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> side(2, 32);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  int hd_checked = 0, auc_checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = side(rng), w = side(rng);
    const BinaryMask a = ht::random_mask(h, w, u(rng), rng), b = ht::random_mask(h, w, u(rng), rng);
    Grid probs(h, w);
    for (auto& v : probs.values) v = std::round(u(rng) * 20) / 20;  // ties on purpose
    worst = std::max(worst, std::abs(metrics::dice(a, b) - ht::brute_dice(a, b)));
    worst = std::max(worst, std::abs(metrics::cldice(a, b) -
                                     ht::brute_cldice(metrics::skeletonize(a), metrics::skeletonize(b), a, b)));
    std::int64_t agree = 0, tp = 0, fp = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
      agree += a.bits[i] == b.bits[i];
      tp += a.bits[i] && b.bits[i];
      fp += a.bits[i] && !b.bits[i];
    }
    const auto k = metrics::confusion(a, b);
    if (k.tp != tp || k.fp != fp || k.tp + k.tn != agree || k.total() != a.size()) return {false, "confusion counts differ"};
    worst = std::max(worst, std::abs(metrics::accuracy(metrics::confusion(a, b)) -
                                     100.0 * static_cast<double>(agree) / static_cast<double>(a.size())));
    if (b.count() > 0 && b.count() < b.size()) {
      worst = std::max(worst, std::abs(metrics::auc_roc(probs, b) - ht::brute_auc(probs, b)));
      ++auc_checked;
    }
    if (a.count() > 0 && b.count() > 0) {
      worst = std::max(worst, std::abs(metrics::hd95(a, b) - ht::brute_hd95(a, b)));
      ++hd_checked;
    }
  }
  return {worst <= 1e-9, "100 mask pairs (" + std::to_string(auc_checked) + " AUC, " + std::to_string(hd_checked) +
                             " HD95), max deviation " + sci(worst)};
}

Outcome perfect_prediction() {
  data::SyntheticVesselConfig cfg;
  const auto samples = data::generate_synthetic(cfg);
  std::vector<Grid> probs;
  for (const auto& s : samples) {
    Grid p(s.image.height, s.image.width);
    for (std::int64_t i = 0; i < p.size(); ++i) p.values[i] = s.vessel_mask.bits[i] ? 1.0 : 0.0;
    probs.push_back(std::move(p));
  }
  const auto rep = train::evaluate_probabilities(probs, samples);
  bool ok = rep.summary[4].mean == 0.0 && rep.summary[4].undefined == 0;
  for (int k = 0; k < 4; ++k) ok = ok && rep.summary[k].mean == 100.0 && rep.summary[k].undefined == 0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "Dice %.4f clDice %.4f ACC %.4f AUC %.4f HD95 %.4f", rep.summary[0].mean,
                rep.summary[1].mean, rep.summary[2].mean, rep.summary[3].mean, rep.summary[4].mean);
  return {ok, buf};
}

Outcome tiny_overfit() {
  data::SyntheticVesselConfig sc;  // 4 images of 64 x 64
  const auto samples = data::generate_synthetic(sc);
  model::HrefNet net(ModelConfig::preset("tiny"));
  std::mt19937_64 rng(7);
  net.init(rng);
  train::TrainConfig tc;
  tc.patch_size = 64;
  tc.patches_per_image = 8;
  tc.epochs = 6;
  tc.train_only_epochs = tc.epochs;
  tc.val_fraction = 0.0;
  tc.seed = 7;
  const auto result = train::train(net, samples, tc);
  train::EvalOptions eo;
  eo.window = 64;
  const double dice = train::evaluate(net, samples, eo).summary[0].mean;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld steps, final loss %.4f, training-set Dice %.2f (threshold 85)",
                static_cast<long long>(result.steps), result.meta.history.back().loss, dice);
  return {result.steps <= 1000 && dice >= 85.0, buf};
}

Outcome scheduler_trace() {
  const double lr = train::plateau_lr({1.0, 1.0, 1.0}, 1e-4);
  train::PlateauScheduler s(1e-4);
  std::vector<double> trace;
  for (int i = 0; i < 40; ++i) trace.push_back(s.step(1.0));
  const bool floor_ok = std::all_of(trace.begin(), trace.end(), [](double v) { return v >= 1e-5; }) && trace.back() == 1e-5;
  char buf[128];
  std::snprintf(buf, sizeof buf, "lr after (1, 1, 1) = %.3g, floor reached at %.3g", lr, trace.back());
  return {std::abs(lr - 7e-5) <= 1e-15 && floor_ok, buf};
}

Outcome presets_forward() {
  std::mt19937_64 data_rng(8);
  const Tensor x = ht::uniform_tensor({1, 1, 224, 224}, data_rng, 0.0, 1.0);
  std::string detail;
  bool ok = true;
  for (const char* name : {"tiny", "middle", "large"}) {
    Tensor out[2];
    for (int rep = 0; rep < 2; ++rep) {
      model::HrefNet net(ModelConfig::preset(name));
      std::mt19937_64 rng(9);
      net.init(rng);
      NoGradGuard guard;
      out[rep] = net.forward(Var(x), false).value();
    }
    const bool shape_ok = out[0].shape() == Shape{1, 1, 224, 224};
    const bool finite = out[0].all_finite();
    const bool same = out[0] == out[1];
    ok = ok && shape_ok && finite && same;
    detail += std::string(detail.empty() ? "" : ", ") + name + (shape_ok && finite && same ? " ok" : " bad");
  }
  return {ok, detail};
}

}  // namespace

// --allow-fail N (repeatable) keeps criterion N out of the exit status; its line still reads FAIL.
int main(int argc, char** argv) {
  std::vector<int> allowed;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--allow-fail" && i + 1 < argc) {
      allowed.push_back(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: %s [--allow-fail N]...\n", argv[0]);
      return 2;
    }
  }
  run(1, "scan orders are bijections", 10, scan_bijection);
  run(2, "selective scan matches the sequential oracle", 30, ssm_oracle);
  run(3, "zero-offset snake conv equals straight separable conv", 30, snake_zero_offset);
  run(4, "tiny model gradients match finite differences", 300, tiny_gradients);
  run(5, "direction softmax lies on the simplex", 5, softmax_simplex);
  run(6, "metrics match brute-force oracles", 120, metric_oracles);
  run(7, "perfect prediction scores perfectly", 60, perfect_prediction);
  run(8, "tiny model overfits synthetic vessels", 900, tiny_overfit);
  run(9, "plateau scheduler trace", 5, scheduler_trace);
  run(10, "all presets run at 224 and are deterministic", 120, presets_forward);
  int blocking = 0;
  for (int id : failed) blocking += std::find(allowed.begin(), allowed.end(), id) == allowed.end();
  std::printf("%zu of 10 criteria failed, %d not allowed to fail\n", failed.size(), blocking);
  return blocking == 0 ? 0 : 1;
}
