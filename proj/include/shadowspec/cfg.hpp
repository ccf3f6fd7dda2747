// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "shadowspec/isa.hpp"

namespace shadowspec {

// Computes block terminators, successor labels and indirect-target flags.
// Indirect targets are the blocks following call sites (return targets) plus
// every block whose label is materialized by `mov rN, label` or stored in a
// data initializer. Label materialization is syntactically visible in this
// ISA, so the flag set is exact. Idempotent.
void build_cfg(Program& program);

// Real-copy conditional branch sites in program order. Branch ids are indexes
// into this list; the rewriter and the oracle share the enumeration.
std::vector<SiteRef> enumerate_branches(const Program& program);

// Resolves a label that may name a function to its entry block label.
std::string resolve_block_label(const Program& program, const std::string& label);

}  // namespace shadowspec
