#pragma once

#include <string>
#include <utility>
#include <vector>

#include "quadgate/ops.hpp"
#include "quadgate/rng.hpp"
#include "quadgate/tensor.hpp"

namespace qg {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

// Init conventions: weights ~ N(0, 0.02), biases 0, layernorm scale 1.
Tensor init_weight(std::vector<int> shape, Rng& rng);
Tensor init_zeros(std::vector<int> shape);
Tensor init_ones(std::vector<int> shape);

// Fully connected layer, weight stored [out, in].
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng);

  Tensor forward(const Tensor& x) const;  // [n,in] -> [n,out]
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight, bias;
};

// Learned affine layernorm over the last dimension.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gamma, beta;
};

// Non-overlapping patch projection: [C_in,H,W] -> [C_out, H/P, W/P].
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(int in_channels, int out_channels, int patch, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  int patch = 1;
  Tensor kernel, bias;
};

// Multi-head attention over a token sequence. With reduction > 1 the keys
// and values come from a spatially downsampled copy of the token map
// (reduction x reduction strided conv followed by layernorm); queries always
// cover all tokens. reduction == 1 is exactly standard multi-head attention
// and allocates no reduction parameters.
class Attention {
 public:
  Attention() = default;
  Attention(int dim, int heads, int reduction, Rng& rng);

  // spatial (h, w) is required when reduction > 1 and must satisfy
  // n == h*w with h, w divisible by the reduction ratio.
  Tensor forward(const Tensor& tokens, int h = 0, int w = 0) const;
  void collect(const std::string& prefix, ParamList& out) const;

  // Probabilities of the most recent forward, one [n, m] matrix per head.
  bool has_recorded_probs() const { return !probs_.empty(); }
  const std::vector<std::vector<double>>& recorded_probs() const { return probs_; }
  std::pair<int, int> recorded_probs_dims() const { return {probs_rows_, probs_cols_}; }
  void clear_recorded_probs() const;

  int dim = 0, heads = 1, reduction = 1;
  Linear q_proj, k_proj, v_proj, out_proj;
  Tensor red_kernel, red_bias;  // present only when reduction > 1
  LayerNorm red_norm;

 private:
  mutable std::vector<std::vector<double>> probs_;
  mutable int probs_rows_ = 0, probs_cols_ = 0;
};

// Pre-norm transformer block: x + attn(norm(x)), then + mlp(norm(.)).
// The MLP expands by 4x with GELU.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(int dim, int heads, int reduction, Rng& rng);

  Tensor forward(const Tensor& tokens, int h = 0, int w = 0) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Attention attn;
  LayerNorm norm1, norm2;
  Linear fc1, fc2;
};

// CLS-to-patch attention of a block whose token 0 is the CLS token:
// row 0 of the recorded probabilities, averaged over heads, the CLS-to-CLS
// entry dropped, renormalized to sum exactly 1.
std::vector<double> cls_attention_map(const TransformerBlock& final_block);

// Same reduction applied to raw per-head probability matrices ([rows x cols]
// each, row-major, token 0 = CLS).
std::vector<double> cls_attention_map_from_probs(
    const std::vector<std::vector<double>>& per_head, int rows, int cols);

}  // namespace qg
