#include "quadgate/model.hpp"

#include <cmath>
#include <numeric>

namespace qg {

std::string to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::vit: return "vit";
    case AggregatorKind::gap: return "gap";
    case AggregatorKind::pvt: return "pvt";
  }
  return "?";
}

std::string to_string(EncoderKind k) {
  return k == EncoderKind::pvt ? "pvt" : "vit";
}

AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "vit") return AggregatorKind::vit;
  if (s == "gap") return AggregatorKind::gap;
  if (s == "pvt") return AggregatorKind::pvt;
  throw config_error("unknown aggregator '" + s + "' (expected vit, gap or pvt)");
}

EncoderKind parse_encoder(const std::string& s) {
  if (s == "pvt") return EncoderKind::pvt;
  if (s == "vit") return EncoderKind::vit;
  throw config_error("unknown encoder '" + s + "' (expected pvt or vit)");
}

std::pair<int, int> ModelConfig::region_grid() const {
  switch (num_regions) {
    case 2: return {1, 2};
    case 4: return {2, 2};
    case 6: return {2, 3};
    default:
      throw config_error("num_regions must be 2, 4 or 6, got " + std::to_string(num_regions));
  }
}

std::pair<int, int> ModelConfig::region_size() const {
  auto [rows, cols] = region_grid();
  if (input_size % rows != 0 || input_size % cols != 0) {
    throw config_error("input size " + std::to_string(input_size) + " not divisible by the " +
                       std::to_string(rows) + "x" + std::to_string(cols) + " region grid");
  }
  return {input_size / rows, input_size / cols};
}

std::vector<std::array<int, 3>> ModelConfig::stage_shapes(const ModelConfig& cfg, int region_h,
                                                          int region_w) {
  std::vector<std::array<int, 3>> shapes;
  for (int k = 1; k <= cfg.stages(); ++k) {
    const int div = cfg.patch_size << (k - 1);
    if (region_h % div != 0 || region_w % div != 0) {
      throw config_error("region " + std::to_string(region_h) + "x" + std::to_string(region_w) +
                         " not divisible by " + std::to_string(div) + " at stage " +
                         std::to_string(k));
    }
    shapes.push_back({region_h / div, region_w / div,
                      cfg.stage_channels[static_cast<std::size_t>(k - 1)]});
  }
  return shapes;
}

void ModelConfig::validate() const {
  if (input_size <= 0 || channels <= 0 || patch_size <= 0) {
    throw config_error("input_size, channels and patch_size must be positive");
  }
  const std::size_t s = stage_channels.size();
  if (s == 0 || stage_heads.size() != s || stage_depths.size() != s || sra_ratios.size() != s) {
    throw config_error("stage lists must be nonempty and of equal length");
  }
  auto [h, w] = region_size();
  auto shapes = stage_shapes(*this, h, w);
  for (std::size_t k = 0; k < s; ++k) {
    if (stage_channels[k] <= 0 || stage_depths[k] < 0) {
      throw config_error("stage channels must be positive and depths nonnegative");
    }
    if (stage_heads[k] <= 0 || stage_channels[k] % stage_heads[k] != 0) {
      throw config_error("stage " + std::to_string(k + 1) + ": heads " +
                         std::to_string(stage_heads[k]) + " do not divide channels " +
                         std::to_string(stage_channels[k]));
    }
    if (sra_ratios[k] < 1 || shapes[k][0] % sra_ratios[k] != 0 ||
        shapes[k][1] % sra_ratios[k] != 0) {
      throw config_error("stage " + std::to_string(k + 1) + ": spatial " +
                         std::to_string(shapes[k][0]) + "x" + std::to_string(shapes[k][1]) +
                         " not divisible by reduction ratio " + std::to_string(sra_ratios[k]));
    }
  }
  if (aggregator.dim <= 0 || aggregator.heads <= 0 ||
      aggregator.dim % aggregator.heads != 0) {
    throw config_error("aggregator heads must divide its dim");
  }
  if (aggregator.kind != AggregatorKind::gap && aggregator.depth < 1) {
    throw config_error("aggregator depth must be >= 1");
  }
  if (head_hidden <= 0) throw config_error("head_hidden must be positive");
}

ModelConfig ModelConfig::desk_scale() {
  ModelConfig cfg;
  cfg.stage_depths = {1, 1, 1, 1};
  return cfg;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig cfg;
  cfg.input_size = 448;
  cfg.channels = 3;
  cfg.stage_depths = {2, 2, 2, 2};
  cfg.modality = Modality::ge;
  return cfg;
}

ModelConfig ModelConfig::gradcheck_scale(int input_size) {
  if (input_size < 16 || (input_size / 2) % 8 != 0) {
    throw config_error("gradcheck input size must be at least 16 with regions divisible by 8");
  }
  ModelConfig cfg;
  cfg.input_size = input_size;
  cfg.patch_size = 1;
  // narrowest stage stays >= 4 wide: layernorm over a 2-vector collapses to
  // a sign pattern and zeroes out the gradients the check is meant to probe
  cfg.stage_channels = {4, 8, 10, 16};
  cfg.stage_heads = {1, 2, 5, 8};
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.sra_ratios = {8, 4, 2, 1};
  cfg.aggregator = {AggregatorKind::vit, 16, 1, 2};
  cfg.head_hidden = 8;
  return cfg;
}

QuadrantSet split_quadrants(const Tensor& image, int num_regions) {
  if (image.rank() != 3) {
    throw dim_error("split_quadrants: need [C,H,W], got " + shape_str(image.shape()));
  }
  int rows, cols;
  switch (num_regions) {
    case 2: rows = 1; cols = 2; break;
    case 4: rows = 2; cols = 2; break;
    case 6: rows = 2; cols = 3; break;
    default:
      throw config_error("num_regions must be 2, 4 or 6, got " + std::to_string(num_regions));
  }
  const int h = image.dim(1), w = image.dim(2);
  if (h % rows != 0 || w % cols != 0) {
    throw config_error("split_quadrants: " + shape_str(image.shape()) +
                       " not divisible into a " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " grid");
  }
  const int rh = h / rows, rw = w / cols;
  QuadrantSet out;
  out.rows = rows;
  out.cols = cols;
  static const char* kQuadTags[4] = {"TL", "TR", "BL", "BR"};
  for (int r = 0; r < rows; ++r) {
    Tensor band = slice(image, 1, r * rh, rh);
    for (int c = 0; c < cols; ++c) {
      out.regions.push_back(slice(band, 2, c * rw, rw));
      if (num_regions == 4) {
        out.tags.emplace_back(kQuadTags[r * 2 + c]);
      } else {
        out.tags.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
      }
    }
  }
  return out;
}

Tensor reassemble(const QuadrantSet& q) {
  if (q.regions.empty() || static_cast<int>(q.regions.size()) != q.rows * q.cols) {
    throw contract_error("reassemble: region count does not match the grid");
  }
  std::vector<Tensor> bands;
  for (int r = 0; r < q.rows; ++r) {
    std::vector<Tensor> row(q.regions.begin() + static_cast<std::ptrdiff_t>(r) * q.cols,
                            q.regions.begin() + static_cast<std::ptrdiff_t>(r + 1) * q.cols);
    bands.push_back(concat(row, 2));
  }
  return concat(bands, 1);
}

CrossAttentionGate::CrossAttentionGate(int region_channels, int gate_channels,
                                       int intermediate, Rng& rng)
    : conv_z_w(init_weight({intermediate, region_channels, 1, 1}, rng)),
      conv_z_b(init_zeros({intermediate})),
      conv_g_w(init_weight({intermediate, gate_channels, 1, 1}, rng)),
      conv_g_b(init_zeros({intermediate})),
      conv_out_w(init_weight({1, intermediate, 1, 1}, rng)),
      conv_out_b(init_zeros({1})) {}

Tensor CrossAttentionGate::forward(const Tensor& own, const std::vector<Tensor>& others) const {
  if (others.empty()) throw contract_error("cross-attention gate: no gating regions");
  for (const Tensor& o : others) {
    if (o.dim(1) != own.dim(1) || o.dim(2) != own.dim(2)) {
      throw dim_error("cross-attention gate: spatial mismatch: " + shape_str(own.shape()) +
                      " vs " + shape_str(o.shape()));
    }
  }
  Tensor gate_signal = concat(others, 0);
  Tensor z = add_channel_bias(conv2d(own, conv_z_w, 1), conv_z_b);
  Tensor g = add_channel_bias(conv2d(gate_signal, conv_g_w, 1), conv_g_b);
  Tensor pre = add(g, z);
  last_preact_ = pre.values();
  Tensor fused = relu(pre);
  Tensor alpha = sigmoid(add_channel_bias(conv2d(fused, conv_out_w, 1), conv_out_b));
  last_alpha_ = alpha.values();
  return scale_by_map(own, alpha);
}

void CrossAttentionGate::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".conv_z.kernel", conv_z_w});
  out.push_back({prefix + ".conv_z.bias", conv_z_b});
  out.push_back({prefix + ".conv_g.kernel", conv_g_w});
  out.push_back({prefix + ".conv_g.bias", conv_g_b});
  out.push_back({prefix + ".conv_out.kernel", conv_out_w});
  out.push_back({prefix + ".conv_out.bias", conv_out_b});
}

PvtEncoder::PvtEncoder(const ModelConfig& cfg, int region_h, int region_w, Rng& rng) {
  auto shapes = ModelConfig::stage_shapes(cfg, region_h, region_w);
  int in_ch = cfg.channels;
  for (int k = 0; k < cfg.stages(); ++k) {
    Stage st;
    st.h = shapes[static_cast<std::size_t>(k)][0];
    st.w = shapes[static_cast<std::size_t>(k)][1];
    st.channels = shapes[static_cast<std::size_t>(k)][2];
    st.reduction = cfg.sra_ratios[static_cast<std::size_t>(k)];
    const int patch = (k == 0) ? cfg.patch_size : 2;
    st.embed = PatchEmbed(in_ch, st.channels, patch, rng);
    st.pos = init_weight({st.h * st.w, st.channels}, rng);
    const int depth = cfg.stage_depths[static_cast<std::size_t>(k)];
    for (int b = 0; b < depth; ++b) {
      st.blocks.emplace_back(st.channels, cfg.stage_heads[static_cast<std::size_t>(k)],
                             st.reduction, rng);
    }
    in_ch = st.channels;
    stages_.push_back(std::move(st));
  }
}

Tensor PvtEncoder::forward(const Tensor& region) const {
  Tensor map = region;
  for (const Stage& st : stages_) {
    map = st.embed.forward(map);
    if (map.dim(0) != st.channels || map.dim(1) != st.h || map.dim(2) != st.w) {
      throw dim_error("stage output " + shape_str(map.shape()) +
                      " violates the stage size law (" + std::to_string(st.channels) + "x" +
                      std::to_string(st.h) + "x" + std::to_string(st.w) + ")");
    }
    Tensor tokens = add(image_to_tokens(map), st.pos);
    for (const TransformerBlock& block : st.blocks) {
      tokens = block.forward(tokens, st.h, st.w);
    }
    map = tokens_to_image(tokens, st.h, st.w);
  }
  return map;
}

void PvtEncoder::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    const std::string sp = prefix + ".stage" + std::to_string(k + 1);
    stages_[k].embed.collect(sp + ".embed", out);
    out.push_back({sp + ".pos", stages_[k].pos});
    for (std::size_t b = 0; b < stages_[k].blocks.size(); ++b) {
      stages_[k].blocks[b].collect(sp + ".block" + std::to_string(b), out);
    }
  }
}

VitEncoder::VitEncoder(const ModelConfig& cfg, int region_h, int region_w, Rng& rng) {
  auto shapes = ModelConfig::stage_shapes(cfg, region_h, region_w);
  const auto& last = shapes.back();
  h_ = last[0];
  w_ = last[1];
  const int dim = last[2];
  const int patch = cfg.patch_size << (cfg.stages() - 1);
  embed_ = PatchEmbed(cfg.channels, dim, patch, rng);
  pos_ = init_weight({h_ * w_, dim}, rng);
  const int depth = std::accumulate(cfg.stage_depths.begin(), cfg.stage_depths.end(), 0);
  for (int b = 0; b < depth; ++b) {
    blocks_.emplace_back(dim, cfg.stage_heads.back(), 1, rng);
  }
}

Tensor VitEncoder::forward(const Tensor& region) const {
  Tensor tokens = add(image_to_tokens(embed_.forward(region)), pos_);
  for (const TransformerBlock& block : blocks_) tokens = block.forward(tokens);
  return tokens_to_image(tokens, h_, w_);
}

void VitEncoder::collect(const std::string& prefix, ParamList& out) const {
  embed_.collect(prefix + ".embed", out);
  out.push_back({prefix + ".pos", pos_});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
  }
}

Aggregator::Aggregator(const AggregatorConfig& cfg, int in_channels, int grid_h, int grid_w,
                       Rng& rng)
    : cfg_(cfg), grid_h_(grid_h), grid_w_(grid_w) {
  conv_w = init_weight({cfg.dim, in_channels, 1, 1}, rng);
  conv_b = init_zeros({cfg.dim});
  if (cfg.kind == AggregatorKind::gap) return;

  int pre_depth = 0;
  final_h_ = grid_h;
  final_w_ = grid_w;
  if (cfg.kind == AggregatorKind::pvt) {
    pre_depth = cfg.depth / 2;
    const bool even = (grid_h % 2 == 0) && (grid_w % 2 == 0);
    pre_reduction_ = even ? 2 : 1;
    merge_ = even;
    if (pre_depth > 0) pre_pos_ = init_weight({grid_h * grid_w, cfg.dim}, rng);
    for (int b = 0; b < pre_depth; ++b) {
      pre_blocks_.emplace_back(cfg.dim, cfg.heads, pre_reduction_, rng);
    }
    if (merge_) {
      merge_w = init_weight({cfg.dim, cfg.dim, 2, 2}, rng);
      merge_b = init_zeros({cfg.dim});
      final_h_ = grid_h / 2;
      final_w_ = grid_w / 2;
    }
  }
  cls_ = init_weight({1, cfg.dim}, rng);
  pos_ = init_weight({final_h_ * final_w_ + 1, cfg.dim}, rng);
  for (int b = pre_depth; b < cfg.depth; ++b) {
    cls_blocks_.emplace_back(cfg.dim, cfg.heads, 1, rng);
  }
}

Tensor Aggregator::forward(const Tensor& assembled) const {
  Tensor x = add_channel_bias(conv2d(assembled, conv_w, 1), conv_b);
  if (cfg_.kind == AggregatorKind::gap) {
    return reshape(mean_spatial(x), {1, cfg_.dim});
  }
  if (cfg_.kind == AggregatorKind::pvt) {
    if (!pre_blocks_.empty()) {
      Tensor tokens = add(image_to_tokens(x), pre_pos_);
      for (const TransformerBlock& block : pre_blocks_) {
        tokens = block.forward(tokens, grid_h_, grid_w_);
      }
      x = tokens_to_image(tokens, grid_h_, grid_w_);
    }
    if (merge_) {
      x = add_channel_bias(conv2d(x, merge_w, 2), merge_b);
    }
  }
  Tensor tokens = concat({cls_, image_to_tokens(x)}, 0);
  tokens = add(tokens, pos_);
  for (const TransformerBlock& block : cls_blocks_) tokens = block.forward(tokens);
  return slice(tokens, 0, 0, 1);
}

void Aggregator::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".conv.kernel", conv_w});
  out.push_back({prefix + ".conv.bias", conv_b});
  if (cfg_.kind == AggregatorKind::gap) return;
  if (!pre_blocks_.empty()) {
    out.push_back({prefix + ".pre_pos", pre_pos_});
    for (std::size_t b = 0; b < pre_blocks_.size(); ++b) {
      pre_blocks_[b].collect(prefix + ".pre_block" + std::to_string(b), out);
    }
  }
  if (merge_) {
    out.push_back({prefix + ".merge.kernel", merge_w});
    out.push_back({prefix + ".merge.bias", merge_b});
  }
  out.push_back({prefix + ".cls", cls_});
  out.push_back({prefix + ".pos", pos_});
  for (std::size_t b = 0; b < cls_blocks_.size(); ++b) {
    cls_blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
  }
}

bool Aggregator::has_cls_map() const {
  return cfg_.kind != AggregatorKind::gap && !cls_blocks_.empty() &&
         cls_blocks_.back().attn.has_recorded_probs();
}

std::vector<double> Aggregator::cls_map() const {
  if (cfg_.kind == AggregatorKind::gap) {
    throw state_error("gap aggregator records no class attention");
  }
  return cls_attention_map(cls_blocks_.back());
}

std::pair<int, int> Aggregator::cls_map_grid() const {
  if (cfg_.kind == AggregatorKind::gap) {
    throw state_error("gap aggregator records no class attention");
  }
  return {final_h_, final_w_};
}

RegressionHead::RegressionHead(int in_dim, int hidden, Rng& rng)
    : fc1(in_dim, hidden, rng), fc2(hidden, 1, rng) {}

Tensor RegressionHead::forward(const Tensor& feature) const {
  return reshape(fc2.forward(gelu(fc1.forward(feature))), {1});
}

void RegressionHead::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
  cfg_.validate();
  Rng rng(mix_seed(seed));
  auto [region_h, region_w] = cfg_.region_size();
  auto shapes = ModelConfig::stage_shapes(cfg_, region_h, region_w);
  const int out_ch = shapes.back()[2];
  for (int i = 0; i < cfg_.num_regions; ++i) {
    if (cfg_.encoder_kind == EncoderKind::pvt) {
      encoders_.push_back(std::make_unique<PvtEncoder>(cfg_, region_h, region_w, rng));
    } else {
      encoders_.push_back(std::make_unique<VitEncoder>(cfg_, region_h, region_w, rng));
    }
  }
  const int gate_in = out_ch * (cfg_.num_regions - 1);
  for (int i = 0; i < cfg_.num_regions; ++i) {
    gates_.emplace_back(out_ch, gate_in, cfg_.cag_channels(), rng);
  }
  auto [rows, cols] = cfg_.region_grid();
  agg_ = Aggregator(cfg_.aggregator, out_ch, rows * shapes.back()[0],
                    cols * shapes.back()[1], rng);
  head_ = RegressionHead(cfg_.aggregator.dim, cfg_.head_hidden, rng);
}

Tensor Model::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.channels || image.dim(1) != cfg_.input_size ||
      image.dim(2) != cfg_.input_size) {
    throw dim_error("model input must be [" + std::to_string(cfg_.channels) + "x" +
                    std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                    "], got " + shape_str(image.shape()));
  }
  QuadrantSet split = split_quadrants(image, cfg_.num_regions);
  const int n = cfg_.num_regions;
  std::vector<Tensor> features(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    features[static_cast<std::size_t>(i)] = encoders_[static_cast<std::size_t>(i)]->forward(
        split.regions[static_cast<std::size_t>(i)]);
  }
  QuadrantSet gated;
  gated.rows = split.rows;
  gated.cols = split.cols;
  gated.tags = split.tags;
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor> others;
    others.reserve(static_cast<std::size_t>(n - 1));
    for (int j = 0; j < n; ++j) {
      if (j != i) others.push_back(features[static_cast<std::size_t>(j)]);
    }
    gated.regions.push_back(gates_[static_cast<std::size_t>(i)].forward(
        features[static_cast<std::size_t>(i)], others));
  }
  return head_.forward(agg_.forward(reassemble(gated)));
}

double Model::predict_score(const Tensor& image) const {
  TapeScope scope;
  NoGradGuard ng;
  return forward(image).item() * score_max(cfg_.modality);
}

std::vector<std::vector<double>> Model::gate_coefficients() const {
  std::vector<std::vector<double>> out;
  out.reserve(gates_.size());
  for (const auto& g : gates_) out.push_back(g.last_coefficients());
  return out;
}

ParamList Model::params() const {
  ParamList out;
  for (std::size_t i = 0; i < encoders_.size(); ++i) {
    encoders_[i]->collect("region" + std::to_string(i) + ".encoder", out);
  }
  for (std::size_t i = 0; i < gates_.size(); ++i) {
    gates_[i].collect("region" + std::to_string(i) + ".gate", out);
  }
  agg_.collect("aggregator", out);
  head_.collect("head", out);
  return out;
}

long long Model::count_params() const {
  long long total = 0;
  for (const auto& p : params()) total += p.tensor.size();
  return total;
}

void Model::zero_grad() const {
  for (const auto& p : params()) p.tensor.drop_grad();
}

double ensemble_predict(const std::vector<const Model*>& members, const Tensor& image) {
  if (members.empty()) throw contract_error("ensemble_predict: no members");
  double sum = 0.0;
  for (const Model* m : members) sum += m->predict_score(image);
  return sum / static_cast<double>(members.size());
}

}  // namespace qg
