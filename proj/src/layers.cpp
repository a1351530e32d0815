#include "quadgate/layers.hpp"

#include <cmath>

namespace qg {

Tensor init_weight(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.values()) v = rng.normal(0.0, 0.02);
  return t;
}

Tensor init_zeros(std::vector<int> shape) { return Tensor::zeros(std::move(shape), true); }

Tensor init_ones(std::vector<int> shape) { return Tensor::full(std::move(shape), 1.0, true); }

Linear::Linear(int in, int out, Rng& rng)
    : weight(init_weight({out, in}, rng)), bias(init_zeros({out})) {}

Tensor Linear::forward(const Tensor& x) const {
  return add_rowwise(matmul(x, transpose2d(weight)), bias);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int dim) : gamma(init_ones({dim})), beta(init_zeros({dim})) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layernorm_lastdim(x, gamma, beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

PatchEmbed::PatchEmbed(int in_channels, int out_channels, int patch_, Rng& rng)
    : patch(patch_),
      kernel(init_weight({out_channels, in_channels, patch_, patch_}, rng)),
      bias(init_zeros({out_channels})) {}

Tensor PatchEmbed::forward(const Tensor& x) const {
  if (x.dim(1) % patch != 0 || x.dim(2) % patch != 0) {
    throw config_error("patch embed: input " + shape_str(x.shape()) +
                       " not divisible by patch size " + std::to_string(patch));
  }
  return add_channel_bias(conv2d(x, kernel, patch), bias);
}

void PatchEmbed::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".kernel", kernel});
  out.push_back({prefix + ".bias", bias});
}

Attention::Attention(int dim_, int heads_, int reduction_, Rng& rng)
    : dim(dim_), heads(heads_), reduction(reduction_) {
  if (dim % heads != 0) {
    throw config_error("attention dim " + std::to_string(dim) +
                       " not divisible by heads " + std::to_string(heads));
  }
  if (reduction < 1) throw config_error("attention reduction must be >= 1");
  q_proj = Linear(dim, dim, rng);
  k_proj = Linear(dim, dim, rng);
  v_proj = Linear(dim, dim, rng);
  out_proj = Linear(dim, dim, rng);
  if (reduction > 1) {
    red_kernel = init_weight({dim, dim, reduction, reduction}, rng);
    red_bias = init_zeros({dim});
    red_norm = LayerNorm(dim);
  }
}

Tensor Attention::forward(const Tensor& tokens, int h, int w) const {
  const int n = tokens.dim(0);
  Tensor kv_src = tokens;
  if (reduction > 1) {
    if (h * w != n) {
      throw dim_error("attention: token count " + std::to_string(n) +
                      " does not match spatial " + std::to_string(h) + "x" +
                      std::to_string(w));
    }
    if (h % reduction != 0 || w % reduction != 0) {
      throw config_error("attention: spatial " + std::to_string(h) + "x" +
                         std::to_string(w) + " not divisible by reduction " +
                         std::to_string(reduction));
    }
    Tensor map = tokens_to_image(tokens, h, w);
    Tensor red = add_channel_bias(conv2d(map, red_kernel, reduction), red_bias);
    kv_src = red_norm.forward(image_to_tokens(red));
  }

  Tensor q = q_proj.forward(tokens);
  Tensor k = k_proj.forward(kv_src);
  Tensor v = v_proj.forward(kv_src);

  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int m = kv_src.dim(0);

  probs_.assign(static_cast<std::size_t>(heads), {});
  probs_rows_ = n;
  probs_cols_ = m;

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Tensor qh = slice(q, 1, hd * dh, dh);
    Tensor kh = slice(k, 1, hd * dh, dh);
    Tensor vh = slice(v, 1, hd * dh, dh);
    Tensor scores = mul_scalar(matmul(qh, transpose2d(kh)), scale);
    Tensor probs = softmax_lastdim(scores);
    probs_[static_cast<std::size_t>(hd)] = probs.values();
    head_outs.push_back(matmul(probs, vh));
  }
  return out_proj.forward(concat(head_outs, 1));
}

void Attention::collect(const std::string& prefix, ParamList& out) const {
  q_proj.collect(prefix + ".q", out);
  k_proj.collect(prefix + ".k", out);
  v_proj.collect(prefix + ".v", out);
  out_proj.collect(prefix + ".out", out);
  if (reduction > 1) {
    out.push_back({prefix + ".red.kernel", red_kernel});
    out.push_back({prefix + ".red.bias", red_bias});
    red_norm.collect(prefix + ".red.norm", out);
  }
}

void Attention::clear_recorded_probs() const {
  probs_.clear();
  probs_rows_ = probs_cols_ = 0;
}

TransformerBlock::TransformerBlock(int dim, int heads, int reduction, Rng& rng)
    : attn(dim, heads, reduction, rng),
      norm1(dim),
      norm2(dim),
      fc1(dim, 4 * dim, rng),
      fc2(4 * dim, dim, rng) {}

Tensor TransformerBlock::forward(const Tensor& tokens, int h, int w) const {
  Tensor x = add(tokens, attn.forward(norm1.forward(tokens), h, w));
  Tensor y = fc2.forward(gelu(fc1.forward(norm2.forward(x))));
  Tensor out = add(x, y);
  if (out.shape() != tokens.shape()) {
    throw dim_error("transformer block changed token shape: " + shape_str(tokens.shape()) +
                    " -> " + shape_str(out.shape()));
  }
  return out;
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  fc1.collect(prefix + ".mlp.fc1", out);
  fc2.collect(prefix + ".mlp.fc2", out);
}

std::vector<double> cls_attention_map_from_probs(
    const std::vector<std::vector<double>>& per_head, int rows, int cols) {
  if (per_head.empty()) throw state_error("cls_attention_map: no attention heads recorded");
  if (rows != cols || rows < 2) {
    throw state_error("cls_attention_map: final block must attend CLS+patches to CLS+patches");
  }
  const int p = cols - 1;
  std::vector<double> map(static_cast<std::size_t>(p), 0.0);
  for (const auto& probs : per_head) {
    for (int j = 0; j < p; ++j) map[static_cast<std::size_t>(j)] += probs[static_cast<std::size_t>(j) + 1];
  }
  double sum = 0.0;
  for (double v : map) sum += v;
  if (sum <= 0.0) throw state_error("cls_attention_map: degenerate attention row");
  for (double& v : map) v /= sum;
  return map;
}

std::vector<double> cls_attention_map(const TransformerBlock& final_block) {
  const Attention& attn = final_block.attn;
  if (!attn.has_recorded_probs()) {
    throw state_error(
        "cls_attention_map: no recorded attention probabilities; run forward first");
  }
  auto [rows, cols] = attn.recorded_probs_dims();
  return cls_attention_map_from_probs(attn.recorded_probs(), rows, cols);
}

}  // namespace qg
