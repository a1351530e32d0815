#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "quadgate/model.hpp"
#include "quadgate/transmix.hpp"

namespace qg {

// Synthetic severity task: dark background with bright elliptical blobs plus
// uniform noise. The severity score is exactly the blob-pixel fraction times
// the modality's score range (the generator counts the pixels it paints).
// The target coverage distribution is skewed per modality to mirror the
// clinical histograms: mostly small scores for cip, mostly large for ge,
// mid-heavy for lo.
struct SyntheticSpec {
  int count = 100;
  int side = 64;
  Modality modality = Modality::cip;
  double noise = 0.05;  // uniform amplitude, pixels clamped to [0,1]
  std::uint64_t seed = 0;
};

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec);

// Binary portable graymap (magic P5, maxval <= 255).
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);

// Bilinear resize with the half-pixel-center convention (sample coordinate
// (i+0.5)*src/dst - 0.5, edges clamped).
Tensor bilinear_resize(const Tensor& image, int out_h, int out_w);

// scores.csv: header line, then one `id,score` row per sample.
void write_scores_csv(const std::string& path, const std::vector<Sample>& samples);

// Loads `<id>.pgm` for every row of the score file, validates the score
// range, rescales pixels to [0,1], resizes to target_size and replicates
// the gray channel when the model expects more than one. Samples come back
// sorted by id.
std::vector<Sample> load_dataset(const std::string& image_dir, const std::string& score_file,
                                 int target_size, int channels, Modality modality);

// Checkpoint layout: 8-byte little-endian manifest length, JSON manifest
// (format version, config echo, parameter names/shapes/offsets), then the
// raw little-endian float64 payload. Round trips are bit-exact.
void save_checkpoint(const Model& model, const std::string& path);
std::unique_ptr<Model> load_checkpoint(const std::string& path);

}  // namespace qg
