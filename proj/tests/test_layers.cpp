#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "quadgate/layers.hpp"
#include "quadgate/ops.hpp"
#include "quadgate/rng.hpp"

using namespace qg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

void zero_params(ParamList& params) {
  for (auto& p : params) std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
}

// Plain-loop multi-head attention, written independently of the tensor
// engine, used as the oracle for the reduction == 1 path.
std::vector<double> mha_reference(const Attention& a, const std::vector<double>& x, int n) {
  const int d = a.dim;
  const int dh = d / a.heads;
  auto linear = [&](const Linear& l, const std::vector<double>& in, int rows) {
    std::vector<double> out(static_cast<std::size_t>(rows) * d, 0.0);
    for (int i = 0; i < rows; ++i)
      for (int o = 0; o < d; ++o) {
        double acc = l.bias.values()[o];
        for (int j = 0; j < d; ++j) acc += in[i * d + j] * l.weight.values()[o * d + j];
        out[i * d + o] = acc;
      }
    return out;
  };
  std::vector<double> q = linear(a.q_proj, x, n);
  std::vector<double> k = linear(a.k_proj, x, n);
  std::vector<double> v = linear(a.v_proj, x, n);
  std::vector<double> heads_out(static_cast<std::size_t>(n) * d, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int hd = 0; hd < a.heads; ++hd) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> row(n);
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c)
          s += q[i * d + hd * dh + c] * k[j * d + hd * dh + c];
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      double sum = 0;
      for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (int j = 0; j < n; ++j) row[j] /= sum;
      for (int c = 0; c < dh; ++c) {
        double acc = 0;
        for (int j = 0; j < n; ++j) acc += row[j] * v[j * d + hd * dh + c];
        heads_out[i * d + hd * dh + c] = acc;
      }
    }
  }
  return linear(a.out_proj, heads_out, n);
}

}  // namespace

TEST_CASE("attention with reduction 1 matches a plain MHA computation") {
  Rng rng(41);
  Attention attn(8, 2, 1, rng);
  Tensor tokens = random_tensor({6, 8}, rng);
  Tensor out = attn.forward(tokens);
  std::vector<double> ref = mha_reference(attn, tokens.values(), 6);
  REQUIRE(out.size() == static_cast<int>(ref.size()));
  for (int i = 0; i < out.size(); ++i)
    CHECK(out.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("reduction 1 allocates no reduction parameters") {
  Rng rng(43);
  Attention plain(8, 2, 1, rng);
  Attention reduced(8, 2, 2, rng);
  ParamList p1, p2;
  plain.collect("a", p1);
  reduced.collect("a", p2);
  CHECK(p1.size() == 8);   // q,k,v,out x (weight,bias)
  CHECK(p2.size() == 12);  // + reduction kernel/bias + norm gamma/beta
}

TEST_CASE("spatial reduction shrinks keys/values only") {
  Rng rng(47);
  // 56x56 tokens with ratio 8 -> queries keep 3136 rows, keys/values get 49
  Attention attn(8, 1, 8, rng);
  Tensor tokens = random_tensor({56 * 56, 8}, rng);
  Tensor out = attn.forward(tokens, 56, 56);
  CHECK(out.shape() == std::vector<int>{3136, 8});
  auto [rows, cols] = attn.recorded_probs_dims();
  CHECK(rows == 3136);
  CHECK(cols == 49);

  CHECK_THROWS_AS(attn.forward(random_tensor({36, 8}, rng), 6, 6), config_error);
}

TEST_CASE("attention probability rows sum to one") {
  Rng rng(53);
  Attention attn(8, 2, 2, rng);
  Tensor tokens = random_tensor({16, 8}, rng, -2, 2);
  attn.forward(tokens, 4, 4);
  for (const auto& head : attn.recorded_probs()) {
    for (int r = 0; r < 16; ++r) {
      double s = 0;
      for (int c = 0; c < 4; ++c) {
        double v = head[r * 4 + c];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("transformer block with zeroed projections is the identity") {
  Rng rng(59);
  TransformerBlock block(8, 2, 1, rng);
  ParamList zero_these;
  block.attn.out_proj.collect("o", zero_these);
  block.fc2.collect("f", zero_these);
  zero_params(zero_these);
  Tensor tokens = random_tensor({5, 8}, rng);
  Tensor out = block.forward(tokens);
  for (int i = 0; i < out.size(); ++i) CHECK(out.values()[i] == tokens.values()[i]);
}

TEST_CASE("transformer block preserves token shape") {
  Rng rng(61);
  for (int reduction : {1, 2}) {
    TransformerBlock block(8, 4, reduction, rng);
    Tensor tokens = random_tensor({16, 8}, rng);
    Tensor out = block.forward(tokens, 4, 4);
    CHECK(out.shape() == tokens.shape());
  }
}

TEST_CASE("gradient check through a full block") {
  Rng rng(67);
  TransformerBlock block(4, 2, 2, rng);
  Tensor tokens = random_tensor({4, 4}, rng);
  double err = finite_diff_check(
      [&](const Tensor& t) {
        return mean_all(mul(block.forward(t, 2, 2), block.forward(t, 2, 2)));
      },
      tokens, 1e-5);
  CHECK(err < 1e-4);

  // parameters too: representative weight and layernorm blocks
  double err_w = finite_diff_check(
      [&](const Tensor&) { return mean_all(block.forward(tokens, 2, 2)); },
      block.attn.q_proj.weight, 1e-5);
  CHECK(err_w < 1e-4);
  double err_ln = finite_diff_check(
      [&](const Tensor&) { return mean_all(block.forward(tokens, 2, 2)); },
      block.norm1.gamma, 1e-5);
  CHECK(err_ln < 1e-4);
}

TEST_CASE("cls attention map from raw probabilities") {
  // single head, uniform over CLS + 4 patches
  std::vector<std::vector<double>> uniform{std::vector<double>(25, 0.2)};
  auto map = cls_attention_map_from_probs(uniform, 5, 5);
  REQUIRE(map.size() == 4);
  for (double v : map) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  // two heads concentrated on different patches average to 0.5/0.5
  std::vector<std::vector<double>> heads{
      {0, 1, 0, 0, 1, 0, 0, 0, 1},  // CLS row attends patch 1
      {0, 0, 1, 0, 1, 0, 0, 0, 1},  // CLS row attends patch 2
  };
  auto avg = cls_attention_map_from_probs(heads, 3, 3);
  REQUIRE(avg.size() == 2);
  CHECK(avg[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(avg[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cls attention map via a real block forward") {
  Rng rng(71);
  TransformerBlock block(8, 2, 1, rng);
  Tensor tokens = random_tensor({5, 8}, rng);  // CLS + 4 patches
  block.forward(tokens);
  auto map = cls_attention_map(block);
  REQUIRE(map.size() == 4);
  double s = 0;
  for (double v : map) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(std::fabs(s - 1.0) <= 1e-12);

  // zeroed q/k projections force uniform attention -> renormalized 0.25s
  ParamList qk;
  block.attn.q_proj.collect("q", qk);
  block.attn.k_proj.collect("k", qk);
  zero_params(qk);
  block.forward(tokens);
  auto flat = cls_attention_map(block);
  for (double v : flat) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("cls attention map requires a recorded forward") {
  Rng rng(73);
  TransformerBlock block(8, 2, 1, rng);
  CHECK_THROWS_AS(cls_attention_map(block), state_error);
}

TEST_CASE("patch embed token count") {
  Rng rng(79);
  PatchEmbed pe(1, 8, 4, rng);
  Tensor img = random_tensor({1, 16, 24}, rng);
  Tensor map = pe.forward(img);
  CHECK(map.shape() == std::vector<int>{8, 4, 6});
  Tensor tokens = image_to_tokens(map);
  CHECK(tokens.dim(0) == (16 / 4) * (24 / 4));
  CHECK_THROWS_AS(pe.forward(random_tensor({1, 15, 16}, rng)), config_error);
}

TEST_CASE("parameter enumeration names are unique and tensors distinct") {
  Rng rng(83);
  TransformerBlock block(8, 2, 2, rng);
  ParamList params;
  block.collect("block", params);
  std::set<std::string> names;
  std::set<const double*> storage;
  for (const auto& p : params) {
    CHECK(names.insert(p.name).second);
    CHECK(storage.insert(p.tensor.data()).second);
    CHECK(p.tensor.requires_grad());
  }
}
