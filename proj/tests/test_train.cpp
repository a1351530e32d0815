#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "quadgate/ops.hpp"
#include "quadgate/rng.hpp"
#include "quadgate/train.hpp"

using namespace qg;

namespace {

WeightTable unit_table(Modality m, long per_level_count) {
  std::vector<long> counts(static_cast<std::size_t>(level_count(m)), per_level_count);
  return build_weight_table(counts, per_level_count * level_count(m), m);
}

Tensor image_with_mean(int side, double mean, Rng& rng) {
  Tensor t = Tensor::zeros({1, side, side});
  for (double& v : t.values()) v = std::clamp(mean + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("weight table follows N / (c_l * k)") {
  // 1878 training images, 17 levels, a level with 100 samples
  std::vector<long> counts(17, 0);
  counts[3] = 100;
  counts[0] = 1878 - 100;
  WeightTable t = build_weight_table(counts, 1878, Modality::ge);
  CHECK(std::fabs(t.weight_for(1.5) - 1878.0 / (100.0 * 17.0)) <= 1e-12);
  CHECK(t.weight_for(1.5) == doctest::Approx(1.1047058823529412).epsilon(1e-12));

  // untouched level gets weight zero
  CHECK(t.weight_for(8.0) == 0.0);

  // uniform data: every weight is exactly one
  WeightTable u = unit_table(Modality::ge, 10);
  for (double w : u.weights) CHECK(w == 1.0);

  // CIP grid size
  CHECK(unit_table(Modality::cip, 1).k == 101);

  CHECK_THROWS_AS(build_weight_table(counts, 999, Modality::ge), contract_error);
}

TEST_CASE("weighted loss equals plain MAE with unit weights, bit-exact") {
  WeightTable u = unit_table(Modality::ge, 5);
  Tensor preds = Tensor::from({2}, {1.0, 2.0});
  std::vector<double> targets{1.0, 3.0};
  Tensor loss = weighted_l1_loss(preds, targets, u);
  CHECK(loss.item() == 0.5);

  Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 1 + static_cast<int>(rng.next() % 16);
    Tensor p = Tensor::zeros({n});
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      p.values()[static_cast<std::size_t>(i)] = rng.uniform(0, 8);
      t[static_cast<std::size_t>(i)] = rng.uniform(0, 8);
    }
    // independent plain-double recomputation
    double acc = 0;
    for (int i = 0; i < n; ++i)
      acc += 1.0 * std::fabs(p.values()[static_cast<std::size_t>(i)] - t[static_cast<std::size_t>(i)]);
    double mae = acc * (1.0 / n);
    CHECK(weighted_l1_loss(p, t, u).item() == mae);
  }
}

TEST_CASE("weighted loss hand case and error paths") {
  // weights [2,1] on abs errors [0.5,1.0] -> (2*0.5 + 1*1.0)/2 = 1.0
  std::vector<long> counts(17, 0);
  counts[0] = 1;   // level 0.0 -> weight 34/(1*17) = 2
  counts[2] = 2;   // level 1.0 -> weight 34/(2*17) = 1
  counts[16] = 31;
  WeightTable t = build_weight_table(counts, 34, Modality::ge);
  CHECK(t.weight_for(0.0) == 2.0);
  CHECK(t.weight_for(1.0) == 1.0);

  Tensor preds = Tensor::from({2}, {0.5, 2.0});
  std::vector<double> targets{0.0, 1.0};
  CHECK(weighted_l1_loss(preds, targets, t).item() == doctest::Approx(1.0).epsilon(1e-15));

  // perfect predictions
  Tensor exact = Tensor::from({2}, {0.0, 1.0});
  CHECK(weighted_l1_loss(exact, targets, t).item() == 0.0);

  CHECK_THROWS_AS(weighted_l1_loss(preds, {1.0}, t), contract_error);
}

TEST_CASE("loss gradient is +-w/N away from zero error") {
  std::vector<long> counts(17, 0);
  counts[0] = 1;
  counts[2] = 2;
  counts[16] = 31;
  WeightTable t = build_weight_table(counts, 34, Modality::ge);

  TapeScope scope;
  Tensor preds = Tensor::from({2}, {0.5, 0.4}, true);
  std::vector<double> targets{0.0, 1.0};
  backward(weighted_l1_loss(preds, targets, t));
  CHECK(preds.grad()[0] == doctest::Approx(+2.0 / 2).epsilon(1e-15));   // above target
  CHECK(preds.grad()[1] == doctest::Approx(-1.0 / 2).epsilon(1e-15));   // below target

  // finite differences agree away from the kink
  Tensor p2 = Tensor::from({2}, {0.5, 0.4});
  double err = finite_diff_check(
      [&](const Tensor& x) { return weighted_l1_loss(x, targets, t); }, p2, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("adamw zero-gradient behaviour") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  ParamList params{{"p", p}};

  AdamW no_decay({0.1, 0.5, 0.99, 1e-8, 0.0}, params);
  p.ensure_grad();  // zeros
  no_decay.step(params);
  CHECK(p.values() == std::vector<double>{1.0, -2.0, 0.5});

  AdamW decay({0.1, 0.5, 0.99, 1e-8, 0.01}, params);
  decay.step(params);
  CHECK(p.values()[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.01)).epsilon(1e-15));
  CHECK(p.values()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw single step from fresh state moves by about -lr") {
  Tensor p = Tensor::from({1}, {0.0}, true);
  ParamList params{{"p", p}};
  AdamW opt({1e-3, 0.5, 0.99, 1e-8, 0.0}, params);
  p.ensure_grad()[0] = 1.0;
  opt.step(params);
  // mhat = vhat = 1 after bias correction, so the step is -lr/(1+eps)
  CHECK(p.values()[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw with zero betas and no decay is sign-SGD up to eps") {
  Tensor p = Tensor::from({4}, {1.0, 1.0, 1.0, 1.0}, true);
  ParamList params{{"p", p}};
  AdamW opt({0.01, 0.0, 0.0, 1e-12, 0.0}, params);
  auto& g = p.ensure_grad();
  g = {3.0, -0.02, 700.0, -1e-3};
  opt.step(params);
  CHECK(p.values()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(p.values()[1] == doctest::Approx(1.0 + 0.01).epsilon(1e-9));
  CHECK(p.values()[2] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(p.values()[3] == doctest::Approx(1.0 + 0.01).epsilon(1e-9));
}

TEST_CASE("adamw rejects non-finite gradients without touching parameters") {
  Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
  ParamList params{{"p", p}};
  AdamW opt({0.1, 0.5, 0.99, 1e-8, 0.01}, params);
  auto& g = p.ensure_grad();
  g[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt.step(params), numeric_error);
  CHECK(p.values() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("scheduler endpoints, midpoint and restart doubling") {
  CosineWarmRestarts s{1e-5, 0.0, 100, 0, 2};
  CHECK(s.lr() == 1e-5);

  // midpoint of the first period
  CosineWarmRestarts mid{1e-5, 0.0, 100, 50, 2};
  CHECK(mid.lr() == doctest::Approx(5e-6).epsilon(1e-15));

  // after the first restart the period doubles
  for (int i = 0; i < 100; ++i) s.tick();
  CHECK(s.t == 0);
  CHECK(s.period == 200);
  CHECK(s.lr() == 1e-5);

  for (int i = 0; i < 200; ++i) s.tick();
  CHECK(s.period == 400);
}

TEST_CASE("scheduler trace matches the closed form over three periods") {
  CosineWarmRestarts s{1e-5, 0.0, 100, 0, 2};
  long period = 100, t = 0;
  for (int step = 0; step < 700; ++step) {
    double expect = 0.0 + (1e-5 - 0.0) * (1.0 + std::cos(M_PI * static_cast<double>(t) /
                                                         static_cast<double>(period))) / 2.0;
    CHECK(std::fabs(s.lr() - expect) <= 1e-15);
    CHECK(s.lr() >= 0.0);
    CHECK(s.lr() <= 1e-5);
    s.tick();
    ++t;
    if (t == period) {
      t = 0;
      period *= 2;
    }
  }
  // restart boundaries at 100 and 300 leave t back at zero; step 700 is next
  CHECK(t == 0);
  CHECK(period == 800);
  CHECK(s.lr() == 1e-5);
}

TEST_CASE("evaluate on forced cases") {
  Metrics perfect = evaluate({1, 2, 3}, {1, 2, 3});
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.pc == doctest::Approx(1.0));
  CHECK(perfect.ae_sd == 0.0);

  // abs errors [1,0,1]: MAE 2/3, population std sqrt(2)/3
  Metrics m = evaluate({0, 4, 8}, {1, 4, 7});
  CHECK(m.mae == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(m.ae_sd == doctest::Approx(std::sqrt(2.0) / 3.0).epsilon(1e-12));

  Metrics linear = evaluate({2, 4, 6}, {1, 2, 3});
  CHECK(linear.pc == doctest::Approx(1.0).epsilon(1e-12));

  Metrics constant = evaluate({1, 2, 3}, {5, 5, 5});
  CHECK_FALSE(constant.pc_defined());

  CHECK_THROWS_AS(evaluate({}, {}), contract_error);
  CHECK_THROWS_AS(evaluate({1}, {1, 2}), contract_error);
}

TEST_CASE("evaluate is permutation invariant") {
  std::vector<double> preds{3, 1, 4, 1, 5};
  std::vector<double> targets{2, 7, 1, 8, 2};
  Metrics a = evaluate(preds, targets);
  std::vector<std::size_t> perm{4, 2, 0, 1, 3};
  std::vector<double> p2, t2;
  for (std::size_t i : perm) {
    p2.push_back(preds[i]);
    t2.push_back(targets[i]);
  }
  Metrics b = evaluate(p2, t2);
  CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-15));
  CHECK(a.pc == doctest::Approx(b.pc).epsilon(1e-15));
  CHECK(a.ae_sd == doctest::Approx(b.ae_sd).epsilon(1e-15));
}

TEST_CASE("two-epoch smoke run logs two epochs of metrics") {
  Rng rng(71);
  std::vector<Sample> data;
  for (int i = 0; i < 32; ++i) {
    double score = rng.uniform(0, 100);
    data.push_back({image_with_mean(16, score / 100.0, rng), std::round(score), "s" + std::to_string(i)});
  }
  ModelConfig cfg = ModelConfig::gradcheck_scale(16);
  Model model(cfg, 3);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 5;
  TrainResult res = train(model, data, {}, tc);
  CHECK_FALSE(res.aborted);
  REQUIRE(res.log.size() == 2);
  for (const auto& row : res.log) {
    CHECK(row.split == "train");
    CHECK(std::isfinite(row.loss));
    CHECK(std::isfinite(row.metrics.mae));
  }
}

TEST_CASE("disabling augmentation changes nothing when no sample is eligible") {
  Rng rng(73);
  std::vector<Sample> data;
  for (int i = 0; i < 8; ++i) {
    // all scores at or below the CIP threshold: nothing is eligible
    data.push_back({image_with_mean(16, 0.3, rng), static_cast<double>(i), "s" + std::to_string(i)});
  }
  ModelConfig cfg = ModelConfig::gradcheck_scale(16);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.seed = 9;

  Model with_mix(cfg, 21);
  Model without_mix(cfg, 21);
  tc.use_transmix = true;
  TrainResult a = train(with_mix, data, {}, tc);
  tc.use_transmix = false;
  TrainResult b = train(without_mix, data, {}, tc);
  CHECK(a.log[0].loss == b.log[0].loss);
}

TEST_CASE("training is bit-reproducible under a fixed seed") {
  Rng rng(79);
  std::vector<Sample> data;
  for (int i = 0; i < 12; ++i) {
    double score = rng.uniform(0, 100);
    data.push_back({image_with_mean(16, score / 100.0, rng), std::round(score), "s" + std::to_string(i)});
  }
  ModelConfig cfg = ModelConfig::gradcheck_scale(16);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 31;

  Model m1(cfg, 55), m2(cfg, 55);
  TrainResult r1 = train(m1, data, data, tc);
  TrainResult r2 = train(m2, data, data, tc);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].loss == r2.log[i].loss);
    CHECK(r1.log[i].metrics.mae == r2.log[i].metrics.mae);
    CHECK(r1.log[i].lr == r2.log[i].lr);
  }
}
