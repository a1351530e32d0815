#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadgate/model.hpp"

namespace qg {

struct GradcheckReport {
  std::string name;
  double max_rel_err = 0.0;
};

// Battery of per-operation checks: each registered op wrapped into a scalar
// function and run through the central-difference oracle on random inputs.
std::vector<GradcheckReport> gradcheck_ops(std::uint64_t seed);

// Central-difference check of the full model prediction against the tape
// gradients, one report per parameter block. `threads` > 1 distributes the
// blocks over identically-seeded model copies.
std::vector<GradcheckReport> gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                                             double step, int threads);

// Negative control: a check with a deliberately wrong backward rule. The
// returned error must be large; the harness fails if a broken rule slips
// through the oracle.
double gradcheck_corrupt_fixture(std::uint64_t seed);

// Worker cap from QUADGATE_THREADS, default 1.
int worker_threads();

}  // namespace qg
