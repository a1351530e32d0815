#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "quadgate/error.hpp"

namespace qg {

// Severity score families. GE and LO live on 0..8 in steps of 0.5
// (17 levels); CIP is a percentage on 0..100 in steps of 1 (101 levels).
enum class Modality { ge, lo, cip };

inline double score_max(Modality m) { return m == Modality::cip ? 100.0 : 8.0; }

inline int level_count(Modality m) { return m == Modality::cip ? 101 : 17; }

inline double level_step(Modality m) { return m == Modality::cip ? 1.0 : 0.5; }

inline std::vector<double> score_levels(Modality m) {
  const int k = level_count(m);
  const double step = level_step(m);
  std::vector<double> levels(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) levels[static_cast<std::size_t>(i)] = i * step;
  return levels;
}

inline bool score_in_range(Modality m, double score) {
  return score >= 0.0 && score <= score_max(m);
}

// Index of the closest level; ties round up with the grid.
inline int nearest_level(Modality m, double score) {
  int idx = static_cast<int>(std::lround(score / level_step(m)));
  if (idx < 0) idx = 0;
  const int k = level_count(m);
  if (idx >= k) idx = k - 1;
  return idx;
}

inline double snap_to_level(Modality m, double score) {
  return nearest_level(m, score) * level_step(m);
}

// Underrepresented score ranges that trigger augmentation, per modality:
// GE at or below 4, LO below 2 or above 6, CIP above 10.
inline bool transmix_eligible(Modality m, double score) {
  switch (m) {
    case Modality::ge:
      return score <= 4.0;
    case Modality::lo:
      return score < 2.0 || score > 6.0;
    case Modality::cip:
      return score > 10.0;
  }
  return false;
}

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::ge:
      return "ge";
    case Modality::lo:
      return "lo";
    case Modality::cip:
      return "cip";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "ge") return Modality::ge;
  if (s == "lo") return Modality::lo;
  if (s == "cip") return Modality::cip;
  throw config_error("unknown modality '" + s + "' (expected ge, lo or cip)");
}

}  // namespace qg
