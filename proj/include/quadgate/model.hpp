#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "quadgate/layers.hpp"
#include "quadgate/modality.hpp"

namespace qg {

enum class AggregatorKind { vit, gap, pvt };
enum class EncoderKind { pvt, vit };

std::string to_string(AggregatorKind k);
std::string to_string(EncoderKind k);
AggregatorKind parse_aggregator(const std::string& s);
EncoderKind parse_encoder(const std::string& s);

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::vit;
  int dim = 256;
  int depth = 2;
  int heads = 4;
};

// Every architectural knob in one place. desk_scale() is the small setup
// used for the synthetic experiments (64px input, single-block stages);
// paper_scale() switches to the published training geometry.
struct ModelConfig {
  int input_size = 64;  // full image side; regions tile this square
  int channels = 1;
  int patch_size = 4;
  std::vector<int> stage_channels{32, 64, 160, 256};
  std::vector<int> stage_heads{1, 2, 5, 8};
  std::vector<int> stage_depths{2, 2, 2, 2};
  std::vector<int> sra_ratios{8, 4, 2, 1};
  int num_regions = 4;
  int cag_intermediate = 0;  // 0 resolves to stage_channels.back()
  AggregatorConfig aggregator;
  int head_hidden = 128;
  EncoderKind encoder_kind = EncoderKind::pvt;
  Modality modality = Modality::cip;

  int stages() const { return static_cast<int>(stage_channels.size()); }
  int cag_channels() const { return cag_intermediate > 0 ? cag_intermediate : stage_channels.back(); }

  // Region tiling: 2 -> side-by-side halves, 4 -> 2x2, 6 -> 2x3.
  std::pair<int, int> region_grid() const;
  std::pair<int, int> region_size() const;  // (h, w) of one region

  // Spatial dims and channels per encoder stage for a region of (h, w):
  // stage k covers h / (2^(k-1) * P) by w / (...), with stage_channels[k].
  static std::vector<std::array<int, 3>> stage_shapes(const ModelConfig& cfg, int region_h,
                                                      int region_w);

  void validate() const;  // throws config_error

  static ModelConfig desk_scale();
  static ModelConfig paper_scale();
  static ModelConfig gradcheck_scale(int input_size = 16);
};

// Ordered regions of one input image, row-major over the tiling grid.
struct QuadrantSet {
  std::vector<Tensor> regions;
  int rows = 0, cols = 0;
  std::vector<std::string> tags;  // TL/TR/BL/BR for four regions, rXcY otherwise
};

QuadrantSet split_quadrants(const Tensor& image, int num_regions);
Tensor reassemble(const QuadrantSet& q);

// Sigmoid-gated fusion: the gating signal is the channel-concatenation of
// the other regions' feature maps; the gate rescales the region's own map
// by a coefficient in (0,1) per spatial position.
class CrossAttentionGate {
 public:
  CrossAttentionGate() = default;
  CrossAttentionGate(int region_channels, int gate_channels, int intermediate, Rng& rng);

  Tensor forward(const Tensor& own, const std::vector<Tensor>& others) const;
  void collect(const std::string& prefix, ParamList& out) const;

  const std::vector<double>& last_coefficients() const { return last_alpha_; }
  // Fused pre-activation of the most recent forward, [intermediate x h x w].
  const std::vector<double>& last_preactivation() const { return last_preact_; }

  Tensor conv_z_w, conv_z_b;
  Tensor conv_g_w, conv_g_b;
  Tensor conv_out_w, conv_out_b;

 private:
  mutable std::vector<double> last_alpha_;
  mutable std::vector<double> last_preact_;
};

// Per-region feature extractor contract: [C, H, W] -> [C_s, h_s, w_s].
class RegionEncoder {
 public:
  virtual ~RegionEncoder() = default;
  virtual Tensor forward(const Tensor& region) const = 0;
  virtual void collect(const std::string& prefix, ParamList& out) const = 0;
};

// Hierarchical encoder: per stage a strided patch embed, learned positional
// embeddings and transformer blocks with the stage's reduction ratio.
class PvtEncoder : public RegionEncoder {
 public:
  PvtEncoder(const ModelConfig& cfg, int region_h, int region_w, Rng& rng);

  Tensor forward(const Tensor& region) const override;
  void collect(const std::string& prefix, ParamList& out) const override;

 private:
  struct Stage {
    PatchEmbed embed;
    Tensor pos;
    std::vector<TransformerBlock> blocks;
    int h = 0, w = 0, channels = 0, reduction = 1;
  };
  std::vector<Stage> stages_;
};

// Single-resolution encoder sized to land on the same output geometry as
// the final pyramid stage; depth matches the summed stage depths.
class VitEncoder : public RegionEncoder {
 public:
  VitEncoder(const ModelConfig& cfg, int region_h, int region_w, Rng& rng);

  Tensor forward(const Tensor& region) const override;
  void collect(const std::string& prefix, ParamList& out) const override;

 private:
  PatchEmbed embed_;
  Tensor pos_;
  std::vector<TransformerBlock> blocks_;
  int h_ = 0, w_ = 0;
};

// Feature processing after reassembly: 1x1 conv to the aggregator width,
// then either a CLS'd transformer stack (vit), a miniature pyramid variant
// (pvt) or plain spatial averaging (gap). Produces one [1, dim] feature.
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(const AggregatorConfig& cfg, int in_channels, int grid_h, int grid_w, Rng& rng);

  Tensor forward(const Tensor& assembled) const;
  void collect(const std::string& prefix, ParamList& out) const;

  // CLS attention of the final block; state_error for the gap variant or
  // before any forward. The grid is the patch layout the map refers to.
  std::vector<double> cls_map() const;
  std::pair<int, int> cls_map_grid() const;
  bool has_cls_map() const;

 private:
  AggregatorConfig cfg_;
  Tensor conv_w, conv_b;  // 1x1, in_channels -> dim
  // pvt variant: blocks before CLS run on the raw grid (with reduction),
  // optionally followed by a 2x2 merge, then the CLS stage.
  std::vector<TransformerBlock> pre_blocks_;
  Tensor pre_pos_;
  Tensor merge_w, merge_b;
  std::vector<TransformerBlock> cls_blocks_;
  Tensor cls_, pos_;
  int grid_h_ = 0, grid_w_ = 0;       // assembled grid
  int final_h_ = 0, final_w_ = 0;     // grid seen by the CLS stage
  int pre_reduction_ = 1;
  bool merge_ = false;
};

class RegressionHead {
 public:
  RegressionHead() = default;
  RegressionHead(int in_dim, int hidden, Rng& rng);

  Tensor forward(const Tensor& feature) const;  // [1, in_dim] -> [1]
  void collect(const std::string& prefix, ParamList& out) const;

  Linear fc1, fc2;
};

// The full pipeline: region split, per-region encoders with independent
// parameters, cross-attention gates, spatial reassembly, aggregation and
// the scalar regression head. Forward output is a normalized severity in
// model units; predict_score() rescales to the modality's score range.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  Tensor forward(const Tensor& image) const;
  double predict_score(const Tensor& image) const;  // no-grad

  // CLS attention over the aggregator's patch grid for the most recent
  // forward, plus that grid's dimensions.
  std::vector<double> cls_attention() const { return agg_.cls_map(); }
  std::pair<int, int> attention_grid() const { return agg_.cls_map_grid(); }
  bool has_attention() const { return agg_.has_cls_map(); }

  // Gate coefficient maps of the most recent forward, one per region.
  std::vector<std::vector<double>> gate_coefficients() const;

  int num_gates() const { return static_cast<int>(gates_.size()); }
  const CrossAttentionGate& gate(int i) const { return gates_[static_cast<std::size_t>(i)]; }

  ParamList params() const;
  long long count_params() const;
  void zero_grad() const;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t init_seed() const { return seed_; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<std::unique_ptr<RegionEncoder>> encoders_;
  std::vector<CrossAttentionGate> gates_;
  Aggregator agg_;
  RegressionHead head_;
};

// Arithmetic mean of member predictions, in score units.
double ensemble_predict(const std::vector<const Model*>& members, const Tensor& image);

}  // namespace qg
