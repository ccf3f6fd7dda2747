// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "shadowspec/sanitizers.hpp"

namespace shadowspec {

struct MemLogEntry {
  uint32_t addr = 0;
  uint8_t width = 0;
  std::array<uint8_t, 4> old{};  // pre-write content; replayed newest-first
};

struct Checkpoint {
  std::array<uint32_t, kNumRegs> regs{};
  Flags flags;
  std::array<TagSet, kNumRegs> reg_tags{};
  TagSet flags_tag = 0;
  uint32_t pc = 0;  // the pending conditional branch; rollback resumes here
  int branch_id = -1;
  size_t mem_watermark = 0;
  size_t tag_watermark = 0;
  size_t cov_watermark = 0;
  uint64_t originals_at_entry = 0;
  int depth = 1;  // simulation stack depth after this push
};

// Per-branch nesting heuristic state; global across a fuzzing session.
struct BranchStat {
  uint64_t encounters = 0;
  int permitted_depth = 1;
};

// Depth schedule after the first `full_depth_runs` encounters: starts at 1 and
// grows by one every time the encounter count doubles.
//   encounters <= 10 -> 1, <= 20 -> 2, <= 40 -> 3, <= 80 -> 4, <= 160 -> 5, beyond -> 6
// (capped at max_depth).
int permitted_depth_for(uint64_t encounters, int max_depth);

class BranchStatsTable {
 public:
  explicit BranchStatsTable(size_t n = 0) : stats_(n) {}

  BranchStat& at(int id) {
    if (static_cast<size_t>(id) >= stats_.size()) stats_.resize(id + 1);
    return stats_[id];
  }
  const std::vector<BranchStat>& all() const { return stats_; }

  // Registers one start-simulation evaluation and refreshes the schedule.
  BranchStat& bump(int id, int max_depth) {
    BranchStat& s = at(id);
    s.encounters++;
    s.permitted_depth = permitted_depth_for(s.encounters, max_depth);
    return s;
  }

  void merge_counts(const std::vector<std::pair<int, uint64_t>>& deltas, int max_depth) {
    for (const auto& [id, n] : deltas) {
      BranchStat& s = at(id);
      s.encounters += n;
      s.permitted_depth = permitted_depth_for(s.encounters, max_depth);
    }
  }

 private:
  std::vector<BranchStat> stats_;
};

// True when a nested misprediction at `current_depth` active checkpoints may
// be simulated. Depth-0 entries do not consult this (they always simulate).
bool nesting_decision(const BranchStat& stat, int current_depth, int max_depth,
                      int full_depth_runs);

// Conditional-restore placement, shared by the rewriter and the oracle so the
// discrete budget checks land at identical points: a check fires after every
// `interval`-th original in a block body and once more right before the
// terminator (unless the interval check already sits there).
inline bool interval_check_due(int body_originals_executed, int interval) {
  return body_originals_executed > 0 && body_originals_executed % interval == 0;
}
inline bool end_check_due(int body_originals_executed, int interval) {
  return body_originals_executed == 0 || body_originals_executed % interval != 0;
}

}  // namespace shadowspec
