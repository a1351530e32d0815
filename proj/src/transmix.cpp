#include "quadgate/transmix.hpp"

#include <algorithm>
#include <cmath>

namespace qg {

CutMask sample_cut_mask(int h, int w, Rng& rng) {
  if (h < 8 || w < 8) {
    throw config_error("cut mask needs at least an 8x8 image, got " + std::to_string(h) +
                       "x" + std::to_string(w));
  }
  const double total = static_cast<double>(h) * w;
  const double frac = rng.uniform(0.05, 0.5);
  const double area = frac * total;
  const double aspect = rng.uniform(0.5, 2.0);

  CutMask m;
  m.h = h;
  m.w = w;
  m.rh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, h);
  m.rw = std::clamp(static_cast<int>(std::lround(area / m.rh)), 1, w);
  // Rounding can push the integer area outside [0.05, 0.5]; nudge back in.
  while (static_cast<double>(m.rh) * m.rw > 0.5 * total) {
    if (m.rh >= m.rw && m.rh > 1) --m.rh; else --m.rw;
  }
  while (static_cast<double>(m.rh) * m.rw < 0.05 * total) {
    if (m.rh <= m.rw && m.rh < h) ++m.rh; else ++m.rw;
  }

  const int cy = rng.uniform_int(0, h - 1);
  const int cx = rng.uniform_int(0, w - 1);
  m.y0 = std::clamp(cy - m.rh / 2, 0, h - m.rh);
  m.x0 = std::clamp(cx - m.rw / 2, 0, w - m.rw);
  return m;
}

Tensor apply_cutmix(const Tensor& a, const Tensor& b, const CutMask& mask) {
  if (a.shape() != b.shape()) {
    throw dim_error("cutmix: image shapes disagree: " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  }
  if (a.rank() != 3 || a.dim(1) != mask.h || a.dim(2) != mask.w) {
    throw dim_error("cutmix: mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                    " does not match image " + shape_str(a.shape()));
  }
  Tensor out = Tensor::from(a.shape(), a.values());
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = mask.y0; y < mask.y0 + mask.rh; ++y) {
      const std::size_t row = (static_cast<std::size_t>(ch) * h + y) * w;
      for (int x = mask.x0; x < mask.x0 + mask.rw; ++x) {
        out.values()[row + x] = b.values()[row + x];
      }
    }
  }
  return out;
}

std::vector<double> downsample_mask(const CutMask& mask, int gh, int gw) {
  if (gh <= 0 || gw <= 0 || gh > mask.h || gw > mask.w) {
    throw dim_error("mask downsample: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                    " invalid for mask " + std::to_string(mask.h) + "x" +
                    std::to_string(mask.w));
  }
  std::vector<double> cells(static_cast<std::size_t>(gh) * gw, 0.0);
  for (int i = 0; i < gh; ++i) {
    // cell value = mask value at the cell-center pixel
    const int y = static_cast<int>((i + 0.5) * mask.h / gh);
    for (int j = 0; j < gw; ++j) {
      const int x = static_cast<int>((j + 0.5) * mask.w / gw);
      cells[static_cast<std::size_t>(i) * gw + j] = mask.at(y, x) ? 1.0 : 0.0;
    }
  }
  return cells;
}

double compute_lambda(const std::vector<double>& att, const CutMask& mask, int gh, int gw) {
  if (static_cast<int>(att.size()) != gh * gw) {
    throw dim_error("lambda: attention size " + std::to_string(att.size()) +
                    " does not match grid " + std::to_string(gh) + "x" + std::to_string(gw));
  }
  std::vector<double> cells = downsample_mask(mask, gh, gw);
  double lambda = 0.0;
  for (std::size_t i = 0; i < att.size(); ++i) lambda += att[i] * cells[i];
  return std::clamp(lambda, 0.0, 1.0);
}

double mixed_score(double y_a, double y_b, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) {
    throw contract_error("mixed_score: lambda " + std::to_string(lambda) + " outside [0,1]");
  }
  return lambda * y_b + (1.0 - lambda) * y_a;
}

std::vector<Sample> conditional_transmix(const std::vector<Sample>& batch,
                                         const EligibilityRule& rule,
                                         const AttentionProvider& attention,
                                         std::uint64_t seed) {
  std::vector<Sample> out = batch;
  const int n = static_cast<int>(batch.size());
  if (n < 2) return out;
  for (int i = 0; i < n; ++i) {
    const Sample& anchor = batch[static_cast<std::size_t>(i)];
    if (!rule.eligible(anchor.score)) continue;
    // independent stream per sample index, so ordering never matters
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    int partner = rng.uniform_int(0, n - 2);
    if (partner >= i) ++partner;
    const Sample& other = batch[static_cast<std::size_t>(partner)];

    CutMask mask = sample_cut_mask(anchor.image.dim(1), anchor.image.dim(2), rng);
    Tensor mixed = apply_cutmix(anchor.image, other.image, mask);
    auto [att, grid] = attention(mixed);
    const double lambda = compute_lambda(att, mask, grid.first, grid.second);

    Sample& slot = out[static_cast<std::size_t>(i)];
    slot.image = mixed;
    slot.score = mixed_score(anchor.score, other.score, lambda);
  }
  return out;
}

std::vector<long> score_histogram(const std::vector<Sample>& dataset, Modality modality) {
  std::vector<long> counts(static_cast<std::size_t>(level_count(modality)), 0);
  for (const Sample& s : dataset) {
    if (!score_in_range(modality, s.score)) {
      throw contract_error("score " + std::to_string(s.score) + " of sample '" + s.id +
                           "' outside the " + to_string(modality) + " range");
    }
    counts[static_cast<std::size_t>(nearest_level(modality, s.score))]++;
  }
  return counts;
}

}  // namespace qg
