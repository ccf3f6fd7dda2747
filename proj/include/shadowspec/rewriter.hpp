// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "shadowspec/isa.hpp"

namespace shadowspec {

struct RewriteConfig {
  Policy policy = Policy::kasper;
  InstrMode mode = InstrMode::shadows;
  bool nesting = true;
  int rob_budget = 250;
  int check_interval = 50;
  int max_nest_depth = 6;
  int full_depth_runs = 5;

  void validate() const;
};

// Individual passes. They assume build_cfg() and stamp_sites() have run and
// keep the program finalized; instrument() composes them in the fixed order
// duplicate -> retarget -> trampolines -> sim-entries -> restore-points ->
// harden-indirect -> memory-ops -> coverage.
void duplicate_functions(Program& p);
void retarget_direct_transfers(Program& p);
void build_trampolines(Program& p);
void insert_simulation_entries(Program& p, const RewriteConfig& cfg);
void insert_restore_points(Program& p, const RewriteConfig& cfg);
void harden_indirect_transfers(Program& p);
void instrument_memory_ops(Program& p, const RewriteConfig& cfg);
void insert_coverage_guards(Program& p);

// Baseline single-copy instrumentation: the same hooks, each behind a dynamic
// mode guard.
void instrument_mixed(Program& p, const RewriteConfig& cfg);

// Full pipeline over a plain program.
Program instrument(const Program& input, const RewriteConfig& cfg);

}  // namespace shadowspec
