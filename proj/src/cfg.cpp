// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/cfg.hpp"

#include <set>

namespace shadowspec {

std::string resolve_block_label(const Program& program, const std::string& label) {
  if (program.find_block(label)) return label;
  if (const Function* fn = program.find_function(label); fn && !fn->blocks.empty())
    return fn->blocks.front().label;
  return label;
}

void build_cfg(Program& program) {
  std::set<std::string> indirect;

  for (auto& fn : program.functions) {
    for (size_t i = 0; i < fn.blocks.size(); ++i) {
      BasicBlock& b = fn.blocks[i];
      b.term = b.insns.empty() ? TermKind::fallthrough : terminator_kind(b.insns.back().op);
      b.succ.clear();
      const std::string next =
          i + 1 < fn.blocks.size() ? fn.blocks[i + 1].label : std::string();
      auto need_next = [&](const char* what) {
        if (next.empty())
          throw std::runtime_error("block " + b.label + ": " + what + " at end of function");
        return next;
      };
      switch (b.term) {
        case TermKind::fallthrough:
          b.succ.push_back(need_next("fallthrough"));
          break;
        case TermKind::jmp:
          b.succ.push_back(resolve_block_label(program, b.insns.back().ops[0].label));
          break;
        case TermKind::jcc:
          b.succ.push_back(resolve_block_label(program, b.insns.back().ops[0].label));
          b.succ.push_back(need_next("conditional branch"));
          break;
        case TermKind::call:
        case TermKind::callr:
          b.succ.push_back(need_next("call"));
          indirect.insert(next);  // return target
          break;
        case TermKind::jmpr:
        case TermKind::ret:
        case TermKind::halt:
          break;
      }
    }
  }

  auto flag_code_label = [&](const std::string& label) {
    std::string resolved = resolve_block_label(program, label);
    if (program.find_block(resolved)) indirect.insert(resolved);
  };

  for (const auto& fn : program.functions)
    for (const auto& b : fn.blocks)
      for (const auto& in : b.insns) {
        if (in.op == Opcode::mov && in.ops.size() == 2 && in.ops[1].kind == OperandKind::label)
          flag_code_label(in.ops[1].label);
      }
  for (const auto& d : program.data)
    for (const auto& [off, label] : d.label_words) flag_code_label(label);

  for (auto& fn : program.functions)
    for (auto& b : fn.blocks) b.indirect_target = indirect.count(b.label) > 0;
}

std::vector<SiteRef> enumerate_branches(const Program& program) {
  std::vector<SiteRef> out;
  for (const auto& fn : program.functions) {
    if (fn.copy != CopyKind::real) continue;
    for (const auto& b : fn.blocks) {
      int ord = 0;
      for (const auto& in : b.insns) {
        if (in.origin != Origin::original) continue;
        if (in.op == Opcode::jcc) out.push_back(SiteRef{b.label, ord});
        ++ord;
      }
    }
  }
  return out;
}

}  // namespace shadowspec
