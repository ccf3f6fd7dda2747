// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <span>

#include "shadowspec/policy.hpp"
#include "shadowspec/vm.hpp"

namespace shadowspec {

// Independent verification oracle: a direct interpreter over the plain
// (uninstrumented) program that forks an explicit speculative interpreter on
// copy-on-write state down the wrong path at every conditional branch, with
// the same policy checks, budgets and nesting decisions as the rewritten
// pipeline. Shares nothing with the rewriter or the instrumented execution
// path beyond the ISA data model, the external-call models and the policy
// classification rules.
struct OracleConfig {
  Policy policy = Policy::kasper;
  bool nesting = true;
  int rob_budget = 250;
  int check_interval = 50;
  int max_nest_depth = 6;
  int full_depth_runs = 5;
  uint64_t max_steps = 1'000'000;

  static OracleConfig from_meta(const ProgramMeta& m, Policy policy) {
    OracleConfig c;
    c.policy = policy;
    c.nesting = m.nesting;
    c.rob_budget = m.rob_budget;
    c.check_interval = m.check_interval;
    c.max_nest_depth = m.max_nest_depth;
    c.full_depth_runs = m.full_depth_runs;
    return c;
  }
};

struct OracleResult {
  std::set<ReportKey> keys;
  ExitStatus status = ExitStatus::halted;
  uint32_t exit_code = 0;
  uint64_t episodes = 0;
};

OracleResult oracle_explore(const Program& plain, std::span<const uint8_t> input,
                            const OracleConfig& cfg);

}  // namespace shadowspec
