#include "quadgate/gradcheck.hpp"

#include <cstdlib>
#include <thread>

#include "quadgate/ops.hpp"

namespace qg {

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Central differences are meaningless when the step straddles a kink, so
// inputs for relu/abs checks keep a margin around zero.
Tensor random_kink_free(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) {
    const double mag = rng.uniform(0.01, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace

std::vector<GradcheckReport> gradcheck_ops(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xabc));
  std::vector<GradcheckReport> reports;
  auto run = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                 std::vector<int> shape) {
    Tensor x = random_tensor(std::move(shape), rng);
    reports.push_back({name, finite_diff_check(f, x, 1e-5)});
  };
  auto run_kink_free = [&](const std::string& name,
                           const std::function<Tensor(const Tensor&)>& f,
                           std::vector<int> shape) {
    Tensor x = random_kink_free(std::move(shape), rng);
    reports.push_back({name, finite_diff_check(f, x, 1e-5)});
  };

  Tensor m = random_tensor({4, 3}, rng);
  Tensor b32 = random_tensor({3, 2}, rng);
  Tensor v2 = random_tensor({2}, rng);
  Tensor img = random_tensor({2, 4, 4}, rng);
  Tensor kern = random_tensor({3, 2, 2, 2}, rng);
  Tensor cmap = random_tensor({1, 4, 4}, rng);
  Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({3}, rng);

  run("matmul", [&](const Tensor& t) { return sum_all(mul(matmul(t, b32), matmul(t, b32))); }, {4, 3});
  run("transpose", [&](const Tensor& t) { return sum_all(mul(transpose2d(t), transpose2d(t))); }, {4, 3});
  run("add", [&](const Tensor& t) { return sum_all(mul(add(t, m), add(t, m))); }, {4, 3});
  run("sub", [&](const Tensor& t) { return sum_all(mul(sub(t, m), sub(t, m))); }, {4, 3});
  run("mul", [&](const Tensor& t) { return sum_all(mul(t, m)); }, {4, 3});
  run("add_scalar", [&](const Tensor& t) { return sum_all(mul(add_scalar(t, 0.3), add_scalar(t, 0.3))); }, {4, 3});
  run("mul_scalar", [&](const Tensor& t) { return sum_all(mul(mul_scalar(t, -2.1), t)); }, {4, 3});
  run("add_rowwise", [&](const Tensor& t) { return sum_all(mul(add_rowwise(m, t), add_rowwise(m, t))); }, {3});
  run("add_channel_bias", [&](const Tensor& t) { return sum_all(mul(add_channel_bias(img, t), add_channel_bias(img, t))); }, {2});
  run_kink_free("relu", [&](const Tensor& t) { return sum_all(mul(relu(t), relu(t))); }, {4, 3});
  run("gelu", [&](const Tensor& t) { return sum_all(gelu(t)); }, {4, 3});
  run("sigmoid", [&](const Tensor& t) { return sum_all(mul(sigmoid(t), sigmoid(t))); }, {4, 3});
  run_kink_free("abs", [&](const Tensor& t) { return sum_all(abs_val(t)); }, {4, 3});
  run("softmax_lastdim", [&](const Tensor& t) { return sum_all(mul(softmax_lastdim(t), m)); }, {4, 3});
  run("layernorm_lastdim", [&](const Tensor& t) { return sum_all(mul(layernorm_lastdim(t, gamma, beta), m)); }, {4, 3});
  run("sum_all", [&](const Tensor& t) { return sum_all(mul(t, t)); }, {4, 3});
  run("mean_all", [&](const Tensor& t) { return mean_all(mul(t, t)); }, {4, 3});
  run("mean_spatial", [&](const Tensor& t) { return sum_all(mul(mean_spatial(t), v2)); }, {2, 4, 4});
  run("concat", [&](const Tensor& t) { return sum_all(mul(concat({t, m}, 0), concat({t, m}, 0))); }, {4, 3});
  run("slice", [&](const Tensor& t) { return sum_all(mul(slice(t, 1, 1, 2), slice(t, 1, 1, 2))); }, {4, 3});
  run("reshape", [&](const Tensor& t) { return sum_all(mul(reshape(t, {2, 6}), reshape(t, {2, 6}))); }, {4, 3});
  run("conv2d", [&](const Tensor& t) { return sum_all(mul(conv2d(t, kern, 2), conv2d(t, kern, 2))); }, {2, 4, 4});
  run("conv2d_kernel", [&](const Tensor& t) { return sum_all(mul(conv2d(img, t, 2), conv2d(img, t, 2))); }, {3, 2, 2, 2});
  run("image_to_tokens", [&](const Tensor& t) { return sum_all(mul(image_to_tokens(t), image_to_tokens(t))); }, {2, 4, 4});
  run("tokens_to_image", [&](const Tensor& t) { return sum_all(mul(tokens_to_image(t, 2, 3), tokens_to_image(t, 2, 3))); }, {6, 2});
  run("scale_by_map", [&](const Tensor& t) { return sum_all(mul(scale_by_map(t, cmap), scale_by_map(t, cmap))); }, {2, 4, 4});
  return reports;
}

namespace {

// The training init (std 0.02) attenuates tiny-width configs so strongly
// that end-to-end sensitivities of early blocks drop to ~1e-12 and central
// differences measure rounding noise instead of gradients. The check holds
// at any parameter point, so the harness re-draws every block at fan-aware
// scale (unit-gain hops) to keep the comparison well conditioned.
void condition_params(const ParamList& params, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x51ab));
  for (const auto& p : params) {
    const std::string& n = p.name;
    auto ends_with = [&](const char* suffix) {
      const std::size_t len = std::char_traits<char>::length(suffix);
      return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
    };
    auto& vals = p.tensor.values();
    if (ends_with(".weight") || ends_with(".kernel")) {
      const auto& shape = p.tensor.shape();
      long fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : vals) v = rng.normal(0.0, scale);
    } else if (ends_with(".gamma")) {
      for (double& v : vals) v = rng.uniform(0.9, 1.1);
    } else {
      for (double& v : vals) v = rng.uniform(-0.1, 0.1);
    }
  }
}

// Central differences cannot certify a derivative across a relu kink, so the
// evaluation point is also conditioned to keep every gate pre-activation a
// fixed margin away from zero. The bias enters the pre-activation additively,
// so one corrective pass is exact.
void clear_relu_margins(Model& model, const ParamList& params, const Tensor& image,
                        double margin) {
  {
    TapeScope scope;
    NoGradGuard ng;
    model.forward(image);
  }
  for (int g = 0; g < model.num_gates(); ++g) {
    const auto& pre = model.gate(g).last_preactivation();
    auto& bias = model.gate(g).conv_z_b.values();
    const std::size_t positions = pre.size() / bias.size();
    for (std::size_t u = 0; u < bias.size(); ++u) {
      // worst (closest to zero) position of this unit decides the shift
      double closest = pre[u * positions];
      for (std::size_t p = 1; p < positions; ++p) {
        if (std::fabs(pre[u * positions + p]) < std::fabs(closest)) {
          closest = pre[u * positions + p];
        }
      }
      if (std::fabs(closest) < margin) {
        bias[u] += (closest >= 0.0 ? margin - closest : -margin - closest);
      }
    }
  }
  (void)params;
}

// Checks a contiguous range of parameter blocks on its own model instance.
void check_blocks(const ModelConfig& cfg, std::uint64_t seed, double step, std::size_t begin,
                  std::size_t end, std::vector<GradcheckReport>& out) {
  Model model(cfg, seed);
  Rng img_rng(mix_seed(seed, 0x1317));
  Tensor image = Tensor::zeros({cfg.channels, cfg.input_size, cfg.input_size});
  for (double& v : image.values()) v = img_rng.uniform(0.05, 0.95);

  ParamList params = model.params();
  condition_params(params, seed);
  clear_relu_margins(model, params, image, 0.05);

  for (std::size_t i = begin; i < end && i < params.size(); ++i) {
    // Attention has structurally flat directions (shifting every key leaves
    // the softmax unchanged), where both gradient estimates are pure noise.
    // A fixed random linear probe gives each coordinate a measurable
    // baseline; a wrong model gradient still surfaces as a mismatch.
    Rng probe_rng(mix_seed(seed, 0x9e0b, static_cast<std::uint64_t>(i)));
    Tensor probe = Tensor::zeros(params[i].tensor.shape());
    for (double& v : probe.values()) {
      v = (probe_rng.uniform() < 0.5 ? -1.0 : 1.0) * probe_rng.uniform(1e-2, 2e-2);
    }
    model.zero_grad();
    const double err = finite_diff_check(
        [&](const Tensor& block) {
          return add(model.forward(image), sum_all(mul(block, probe)));
        },
        params[i].tensor, step);
    out[i] = {params[i].name, err};
  }
}

}  // namespace

std::vector<GradcheckReport> gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                                             double step, int threads) {
  cfg.validate();
  const std::size_t block_count = Model(cfg, seed).params().size();
  std::vector<GradcheckReport> reports(block_count);
  if (threads <= 1) {
    check_blocks(cfg, seed, step, 0, block_count, reports);
    return reports;
  }
  const std::size_t chunk = (block_count + static_cast<std::size_t>(threads) - 1) /
                            static_cast<std::size_t>(threads);
  std::vector<std::thread> workers;
  for (int t = 0; t < threads; ++t) {
    const std::size_t begin = static_cast<std::size_t>(t) * chunk;
    if (begin >= block_count) break;
    workers.emplace_back(check_blocks, std::cref(cfg), seed, step, begin,
                         std::min(block_count, begin + chunk), std::ref(reports));
  }
  for (auto& w : workers) w.join();
  return reports;
}

double gradcheck_corrupt_fixture(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xbad));
  Tensor x = random_tensor({8}, rng);
  // forward scales by 2 but the recorded rule claims 2.5
  auto bad_scale = [](const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape(), Tape::active().recording() && a.requires_grad());
    for (int i = 0; i < a.size(); ++i) out.values()[static_cast<std::size_t>(i)] = 2.0 * a.values()[static_cast<std::size_t>(i)];
    if (out.requires_grad()) {
      Tensor in = a;
      Tensor o = out;
      Tape::active().push([in, o]() {
        if (!o.has_grad()) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.5 * o.grad()[i];
      });
    }
    return out;
  };
  return finite_diff_check([&](const Tensor& t) { return sum_all(bad_scale(t)); }, x, 1e-5);
}

int worker_threads() {
  const char* env = std::getenv("QUADGATE_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

}  // namespace qg
