#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "quadgate/modality.hpp"
#include "quadgate/rng.hpp"
#include "quadgate/tensor.hpp"

namespace qg {

// One labeled image.
struct Sample {
  Tensor image;  // [C, H, W], values in [0,1]
  double score = 0.0;
  std::string id;
};

// Axis-aligned rectangle mask over an H x W image; 1 inside the rectangle
// (pixels taken from the pasted image), 0 outside.
struct CutMask {
  int h = 0, w = 0;
  int y0 = 0, x0 = 0, rh = 0, rw = 0;

  bool at(int y, int x) const {
    return y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw;
  }
  double area_fraction() const {
    return static_cast<double>(rh) * rw / (static_cast<double>(h) * w);
  }
};

// Rectangle with area fraction uniform in [0.05, 0.5] and a jittered aspect
// ratio; the center is sampled uniformly and clamped so the rectangle stays
// in bounds (the area is preserved under clamping).
CutMask sample_cut_mask(int h, int w, Rng& rng);

// out = (1-M) * a + M * b, pixelwise over every channel.
Tensor apply_cutmix(const Tensor& a, const Tensor& b, const CutMask& mask);

// Nearest-neighbor downsample of the mask onto a gh x gw patch grid: each
// cell takes the mask value at its center pixel.
std::vector<double> downsample_mask(const CutMask& mask, int gh, int gw);

// lambda = sum_j att[j] * downsampled_mask[j]; att must sum to 1.
double compute_lambda(const std::vector<double>& att, const CutMask& mask, int gh, int gw);

// Relabeling of the mixed image: lambda * y_b + (1 - lambda) * y_a.
double mixed_score(double y_a, double y_b, double lambda);

// Predicate selecting the underrepresented score ranges of a modality.
struct EligibilityRule {
  Modality modality = Modality::cip;
  bool eligible(double score) const { return transmix_eligible(modality, score); }
};

struct MixedSample {
  Tensor image;
  double lambda = 0.0;
  double mixed = 0.0;
  double score_a = 0.0, score_b = 0.0;
};

// Class-attention source for the mixed image: returns the head-averaged,
// renormalized CLS-to-patch map and its grid. Implementations must not
// record gradients.
using AttentionProvider =
    std::function<std::pair<std::vector<double>, std::pair<int, int>>(const Tensor& image)>;

// Applies attention-guided mixing to every eligible sample of the batch:
// a partner is drawn uniformly from the rest of the batch, the CutMix image
// is built, the provider yields the mixed image's class attention, and the
// sample is replaced by the mixed image with its relabeled score.
// Ineligible samples pass through untouched. Eligibility is decided on the
// anchor's pre-mix score. A single-sample batch passes through unchanged.
std::vector<Sample> conditional_transmix(const std::vector<Sample>& batch,
                                         const EligibilityRule& rule,
                                         const AttentionProvider& attention,
                                         std::uint64_t seed);

// Per-level sample counts over the modality's score grid (nearest level).
std::vector<long> score_histogram(const std::vector<Sample>& dataset, Modality modality);

}  // namespace qg
