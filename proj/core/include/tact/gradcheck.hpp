#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tact/rng.hpp"
#include "tact/tensor.hpp"

namespace tact {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  int probes = 0;
  int shapes = 0;
};

struct GradCheckOptions {
  std::uint64_t seed = 20240501;
  double h = 1e-6;            // central difference step
  double denom_floor = 1e-3;  // relative-error denominator floor
  int shapes_per_op = 12;
  int max_probes_per_case = 120;
  int model_probes = 120;  // parameter probes for the end-to-end case
};

// Central finite differences at 64-bit against the tape gradients of every
// leaf, for a loss rebuilt from scratch on each evaluation. Returns the
// maximum relative error over the probed coordinates.
double finite_difference_check(std::vector<Tensor<double>> leaves,
                               const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                               const GradCheckOptions& opts, Rng& probe_rng, int max_probes,
                               int* probes_out = nullptr);

// Runs the whole differentiable-operation suite plus the 2-block model
// end-to-end, each over randomized small shapes.
std::vector<GradCheckCase> run_gradcheck(const GradCheckOptions& opts = {});

}  // namespace tact
