// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>

namespace shadowspec::testing {

struct GeneratorOptions {
  int max_helpers = 2;
  int max_blocks_per_fn = 5;
  int max_body_ops = 10;
  bool allow_indirect = true;   // materialized-label callr/jmpr
  bool allow_externals = true;  // fence / write_output on random paths
  bool straight_line_only = false;
};

// Emits a random, assembler-valid program. Deterministic per seed. Programs
// read input, do bounded loops, call helpers, touch a global arena and a heap
// object (including out-of-bounds offsets) and always halt.
std::string generate_program(uint64_t seed, const GeneratorOptions& opt = {});

// A single straight-line block body operating on the arena, used by the
// batched-vs-per-instruction tag differential.
std::string generate_straight_line(uint64_t seed, int n_ops);

}  // namespace shadowspec::testing
