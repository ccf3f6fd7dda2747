// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/runtime.hpp"

#include <algorithm>

namespace shadowspec {

int permitted_depth_for(uint64_t encounters, int max_depth) {
  int depth = 1;
  uint64_t threshold = 10;
  while (encounters > threshold && depth < max_depth) {
    ++depth;
    threshold *= 2;
  }
  return std::min(depth, max_depth);
}

bool nesting_decision(const BranchStat& stat, int current_depth, int max_depth,
                      int full_depth_runs) {
  if (current_depth >= max_depth) return false;
  return stat.encounters <= static_cast<uint64_t>(full_depth_runs) ||
         current_depth < stat.permitted_depth;
}

}  // namespace shadowspec
