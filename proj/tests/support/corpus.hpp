// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "shadowspec/isa.hpp"
#include "shadowspec/rewriter.hpp"
#include "shadowspec/vm.hpp"

namespace shadowspec::testing {

std::string corpus_path(const std::string& name);
std::string corpus_text(const std::string& name);
Program corpus_program(const std::string& name);

// All regression programs, gadget-bearing and otherwise.
const std::vector<std::string>& corpus_names();

std::vector<uint8_t> bytes(std::initializer_list<int> v);

RewriteConfig config_for(Policy policy, InstrMode mode = InstrMode::shadows, bool nesting = true,
                         int max_depth = 6);

RunResult run_program(const Program& instrumented, const std::vector<uint8_t>& input,
                      const RunConfig& rc = {});

}  // namespace shadowspec::testing
