// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/rewriter.hpp"

#include <algorithm>
#include <map>

#include "shadowspec/cfg.hpp"
#include "shadowspec/runtime.hpp"

namespace shadowspec {

namespace {

constexpr const char* kSpecSuffix = "$spec";

Instruction make_intrinsic(IntrinsicKind k, SiteRef site, std::vector<Operand> ops = {},
                           uint8_t width = 4) {
  Instruction in;
  in.op = Opcode::intrinsic;
  in.intr = k;
  in.origin = Origin::instrumentation;
  in.ops = std::move(ops);
  in.width = width;
  in.site = std::move(site);
  return in;
}

bool has_shadow_symbol(const Program& p, const std::string& name) {
  return p.symbols.count(name + kSpecSuffix) > 0;
}

bool is_extern_symbol(const Program& p, const std::string& name) {
  return std::any_of(p.externs.begin(), p.externs.end(),
                     [&](const ExternDecl& e) { return e.name == name; });
}

// Index of the first instruction of the terminator group: the terminator plus
// the instrumentation instructions already attached in front of it.
size_t tail_start(const BasicBlock& b) {
  if (b.insns.empty()) return 0;
  size_t t = b.insns.size();
  if (!is_terminator(b.insns.back().op)) return t;
  --t;
  while (t > 0 && b.insns[t - 1].origin == Origin::instrumentation) --t;
  return t;
}

// Insertion point right before the end-of-block check_restore, falling back to
// just before the terminator.
size_t before_end_check(const BasicBlock& b) {
  size_t t = b.insns.size();
  if (t == 0) return 0;
  if (is_terminator(b.insns.back().op)) --t;
  size_t g = t;
  while (g > 0 && b.insns[g - 1].origin == Origin::instrumentation) {
    --g;
    if (b.insns[g].is_intrinsic(IntrinsicKind::check_restore)) return g;
  }
  return t;
}

SiteRef first_site(const BasicBlock& b) {
  for (const auto& in : b.insns)
    if (in.site.valid()) return in.site;
  return {};
}

void require_mode(const Program& p, InstrMode mode, const char* pass) {
  if (p.meta.mode != mode)
    throw RewriteError(std::string(pass) + ": program is not in the expected rewrite state");
}

Instruction make_guard(int want, int skip, SiteRef site) {
  return make_intrinsic(IntrinsicKind::guard, std::move(site),
                        {Operand::make_imm(want), Operand::make_imm(skip)});
}

}  // namespace

void RewriteConfig::validate() const {
  if (rob_budget <= 0) throw RewriteError("rob_budget must be positive");
  if (check_interval <= 0 || check_interval > rob_budget)
    throw RewriteError("check_interval must be in [1, rob_budget]");
  if (max_nest_depth < 1) throw RewriteError("max_nest_depth must be at least 1");
  if (full_depth_runs < 0) throw RewriteError("full_depth_runs must be non-negative");
}

void duplicate_functions(Program& p) {
  std::vector<Function> shadows;
  for (const auto& fn : p.functions) {
    if (fn.copy != CopyKind::real) throw RewriteError("duplicate_functions: already duplicated");
    if (has_shadow_symbol(p, fn.name))
      throw RewriteError("symbol collision: " + fn.name + kSpecSuffix + " already exists");
    Function g;
    g.name = fn.name + kSpecSuffix;
    g.copy = CopyKind::shadow;
    for (const auto& b : fn.blocks) {
      if (has_shadow_symbol(p, b.label))
        throw RewriteError("symbol collision: " + b.label + kSpecSuffix + " already exists");
      BasicBlock sb = b;  // byte-to-byte copy; sites inherited
      sb.label = b.label + kSpecSuffix;
      sb.copy = CopyKind::shadow;
      sb.indirect_target = false;
      sb.marked = false;
      for (auto& s : sb.succ) s += kSpecSuffix;
      g.blocks.push_back(std::move(sb));
    }
    shadows.push_back(std::move(g));
  }
  for (auto& g : shadows) p.functions.push_back(std::move(g));
  p.finalize();
}

void retarget_direct_transfers(Program& p) {
  for (auto& fn : p.functions) {
    if (fn.copy != CopyKind::shadow) continue;
    for (auto& b : fn.blocks) {
      if (b.insns.empty()) continue;
      Instruction& t = b.insns.back();
      switch (t.op) {
        case Opcode::jmp:
        case Opcode::jcc:
          t.ops[0].label += kSpecSuffix;
          break;
        case Opcode::call: {
          const std::string& target = t.ops[0].label;
          if (is_extern_symbol(p, target)) {
            // External library call: the simulation cannot continue past it.
            Instruction r = make_intrinsic(IntrinsicKind::rollback, t.site,
                                           {Operand::make_imm(static_cast<int32_t>(
                                               RollbackReason::external_call))});
            t = std::move(r);
            b.term = TermKind::fallthrough;
          } else {
            t.ops[0].label += kSpecSuffix;
          }
          break;
        }
        default:
          break;
      }
    }
  }
  p.finalize();
}

void build_trampolines(Program& p) {
  require_mode(p, InstrMode::none, "build_trampolines");
  std::vector<SiteRef> sites = enumerate_branches(p);
  p.branches.clear();
  for (size_t id = 0; id < sites.size(); ++id) {
    const SiteRef& site = sites[id];
    BasicBlock* b = p.find_block(site.block);
    if (!b || b->insns.empty() || b->insns.back().op != Opcode::jcc)
      throw RewriteError("branch enumeration out of sync at " + site.str());
    const Instruction& jcc = b->insns.back();

    Function* owner = nullptr;
    size_t block_ix = 0;
    for (auto& fn : p.functions) {
      for (size_t i = 0; i < fn.blocks.size(); ++i)
        if (&fn.blocks[i] == b) {
          owner = &fn;
          block_ix = i;
        }
      if (owner) break;
    }
    if (block_ix + 1 >= owner->blocks.size())
      throw RewriteError("conditional branch without fallthrough at " + site.str());

    BranchInfo info;
    info.id = static_cast<int>(id);
    info.site = site;
    info.function = owner->name;
    info.cond = jcc.cond;
    info.taken_label = resolve_block_label(p, jcc.ops[0].label);
    info.fall_label = owner->blocks[block_ix + 1].label;
    info.tramp_label = b->label + "$tramp";

    // Same condition, destinations swapped: the taken outcome lands on the
    // shadow fallthrough block and vice versa. Two transfer instructions as a
    // block pair, so every block keeps a single terminator.
    BasicBlock t1;
    t1.label = info.tramp_label;
    t1.copy = CopyKind::shadow;
    t1.is_trampoline = true;
    Instruction j1;
    j1.op = Opcode::jcc;
    j1.cond = jcc.cond;
    j1.origin = Origin::instrumentation;
    j1.ops = {Operand::make_label(info.fall_label + kSpecSuffix)};
    j1.site = site;
    t1.insns = {j1};
    t1.term = TermKind::jcc;
    BasicBlock t2;
    t2.label = info.tramp_label + "$j";
    t2.copy = CopyKind::shadow;
    t2.is_trampoline = true;
    Instruction j2;
    j2.op = Opcode::jmp;
    j2.origin = Origin::instrumentation;
    j2.ops = {Operand::make_label(info.taken_label + kSpecSuffix)};
    j2.site = site;
    t2.insns = {j2};
    t2.term = TermKind::jmp;

    Function* shadow_fn = p.find_function(owner->name + kSpecSuffix);
    if (!shadow_fn) throw RewriteError("missing shadow copy for " + owner->name);
    shadow_fn->blocks.push_back(std::move(t1));
    shadow_fn->blocks.push_back(std::move(t2));
    p.branches.push_back(std::move(info));
  }
  p.meta.num_branches = static_cast<int>(p.branches.size());
  p.finalize();
}

void insert_simulation_entries(Program& p, const RewriteConfig& cfg) {
  std::map<SiteRef, int> id_by_site;
  for (const auto& br : p.branches) id_by_site[br.site] = br.id;

  for (auto& fn : p.functions) {
    for (auto& b : fn.blocks) {
      if (b.is_trampoline || b.insns.empty()) continue;
      Instruction& t = b.insns.back();
      if (t.op != Opcode::jcc) continue;
      if (b.copy == CopyKind::shadow && !cfg.nesting) continue;
      auto it = id_by_site.find(t.site);
      if (it == id_by_site.end())
        throw RewriteError("conditional branch without trampoline at " + t.site.str());
      Instruction entry = make_intrinsic(IntrinsicKind::start_sim, t.site,
                                         {Operand::make_imm(it->second)});
      b.insns.insert(b.insns.end() - 1, std::move(entry));
    }
  }
  p.finalize();
}

void insert_restore_points(Program& p, const RewriteConfig& cfg) {
  for (auto& fn : p.functions) {
    if (fn.copy != CopyKind::shadow) continue;
    for (auto& b : fn.blocks) {
      if (b.is_trampoline) continue;

      // Unconditional restore points before externals, serializing
      // instructions and halt.
      for (size_t i = 0; i < b.insns.size(); ++i) {
        const Instruction& in = b.insns[i];
        if (in.origin != Origin::original) continue;
        if (in.op == Opcode::ext || in.op == Opcode::fence || in.op == Opcode::halt) {
          RollbackReason reason = in.op == Opcode::ext ? RollbackReason::external_call
                                                       : RollbackReason::serialize;
          b.insns.insert(b.insns.begin() + i,
                         make_intrinsic(IntrinsicKind::rollback, in.site,
                                        {Operand::make_imm(static_cast<int32_t>(reason))}));
          ++i;
        }
      }

      // Interval checks: one after every `check_interval` body originals.
      bool has_term = !b.insns.empty() && is_terminator(b.insns.back().op);
      size_t limit = b.insns.size() - (has_term ? 1 : 0);
      int count = 0;
      for (size_t i = 0; i < limit; ++i) {
        if (b.insns[i].origin != Origin::original) continue;
        ++count;
        if (interval_check_due(count, cfg.check_interval)) {
          b.insns.insert(b.insns.begin() + i + 1,
                         make_intrinsic(IntrinsicKind::check_restore, b.insns[i].site));
          ++i;
          ++limit;
        }
      }
      // End-of-block check unless an interval check already sits at the tail.
      if (end_check_due(count, cfg.check_interval)) {
        size_t pos = tail_start(b);
        b.insns.insert(b.insns.begin() + pos,
                       make_intrinsic(IntrinsicKind::check_restore, first_site(b)));
      }
    }
  }
  p.finalize();
}

void harden_indirect_transfers(Program& p) {
  for (auto& fn : p.functions) {
    if (fn.copy == CopyKind::real) {
      for (auto& b : fn.blocks) {
        if (!b.indirect_target || b.marked) continue;
        SiteRef site = first_site(b);
        Instruction marker;
        marker.op = Opcode::marker_nop;
        marker.origin = Origin::instrumentation;
        marker.site = site;
        Instruction redirect = make_intrinsic(IntrinsicKind::mode_redirect, site,
                                              {Operand::make_label(b.label + kSpecSuffix)});
        b.insns.insert(b.insns.begin(), {marker, redirect});
        b.marked = true;
      }
    } else {
      for (auto& b : fn.blocks) {
        if (b.is_trampoline || b.insns.empty()) continue;
        Instruction& t = b.insns.back();
        if (t.op != Opcode::ret && t.op != Opcode::jmpr && t.op != Opcode::callr) continue;
        std::vector<Operand> ops;
        if (t.op != Opcode::ret) ops.push_back(t.ops[0]);
        b.insns.insert(b.insns.end() - 1,
                       make_intrinsic(IntrinsicKind::escape_check, t.site, std::move(ops)));
      }
    }
  }
  p.finalize();
}

void instrument_memory_ops(Program& p, const RewriteConfig& cfg) {
  const bool kasper = cfg.policy == Policy::kasper;

  auto src_tag_ops = [](const Instruction& in) {
    return std::vector<Operand>{in.ops[0], in.ops[1]};
  };

  for (auto& fn : p.functions) {
    for (auto& b : fn.blocks) {
      if (b.is_trampoline) continue;

      if (fn.copy == CopyKind::shadow) {
        // Per-instruction sanitizer and taint instrumentation.
        for (size_t i = 0; i < b.insns.size(); ++i) {
          const Instruction in = b.insns[i];
          if (in.origin != Origin::original) continue;
          std::vector<Instruction> pre;
          switch (in.op) {
            case Opcode::load: {
              bool allow = in.ops[1].reg == kStackReg;
              if (!allow)
                pre.push_back(make_intrinsic(IntrinsicKind::asan_check, in.site, {in.ops[1]},
                                             in.width));
              if (kasper)
                pre.push_back(make_intrinsic(
                    IntrinsicKind::taint_load, in.site,
                    {in.ops[0], in.ops[1], Operand::make_imm(allow ? 1 : 0)}, in.width));
              break;
            }
            case Opcode::store: {
              bool allow = in.ops[1].reg == kStackReg;
              if (!allow)
                pre.push_back(make_intrinsic(IntrinsicKind::asan_check, in.site, {in.ops[1]},
                                             in.width));
              pre.push_back(make_intrinsic(IntrinsicKind::mem_log, in.site, {in.ops[1]}, in.width));
              if (kasper)
                pre.push_back(make_intrinsic(IntrinsicKind::tag_store, in.site,
                                             {in.ops[0], in.ops[1]}, in.width));
              break;
            }
            case Opcode::push:
              pre.push_back(make_intrinsic(IntrinsicKind::mem_log, in.site,
                                           {Operand::make_mem(kStackReg, -4)}, 4));
              if (kasper)
                pre.push_back(make_intrinsic(IntrinsicKind::tag_store, in.site,
                                             {in.ops[0], Operand::make_mem(kStackReg, -4)}, 4));
              break;
            case Opcode::pop:
              if (kasper)
                pre.push_back(make_intrinsic(
                    IntrinsicKind::taint_load, in.site,
                    {in.ops[0], Operand::make_mem(kStackReg, 0), Operand::make_imm(1)}, 4));
              break;
            case Opcode::call:
            case Opcode::callr:
              pre.push_back(make_intrinsic(IntrinsicKind::mem_log, in.site,
                                           {Operand::make_mem(kStackReg, -4)}, 4));
              if (kasper)
                pre.push_back(make_intrinsic(IntrinsicKind::tag_clear, in.site,
                                             {Operand::make_mem(kStackReg, -4)}, 4));
              break;
            case Opcode::mov:
              if (kasper)
                pre.push_back(
                    make_intrinsic(IntrinsicKind::tag_mov, in.site, src_tag_ops(in)));
              break;
            case Opcode::add:
            case Opcode::sub:
            case Opcode::and_:
            case Opcode::or_:
            case Opcode::xor_:
            case Opcode::shl:
            case Opcode::shr:
              if (kasper)
                pre.push_back(
                    make_intrinsic(IntrinsicKind::tag_alu, in.site, src_tag_ops(in)));
              break;
            case Opcode::cmp:
              if (kasper)
                pre.push_back(
                    make_intrinsic(IntrinsicKind::tag_cmp, in.site, src_tag_ops(in)));
              break;
            case Opcode::ret:
              pre.push_back(make_intrinsic(IntrinsicKind::frame_unpoison, in.site));
              break;
            case Opcode::jcc:
              if (kasper)
                pre.push_back(make_intrinsic(IntrinsicKind::port_check, in.site));
              break;
            default:
              break;
          }
          if (pre.empty()) continue;
          size_t pos = i;
          // ret's unpoison and jcc's port check belong before the end-of-block
          // budget check; plain memory hooks sit right before their
          // instruction.
          if (in.op == Opcode::ret || in.op == Opcode::jcc) pos = before_end_check(b);
          b.insns.insert(b.insns.begin() + pos, pre.begin(), pre.end());
          i += pre.size();
        }
        if (&b == &fn.blocks.front())
          b.insns.insert(b.insns.begin(),
                         make_intrinsic(IntrinsicKind::frame_poison, first_site(b)));
      } else {
        // Real copy: no sanitizer hooks. Frame poisoning plus, under the
        // kasper policy, one batched tag summary per ext-free segment.
        std::vector<size_t> summary_positions;
        if (kasper) {
          bool segment_open = false;
          for (size_t i = 0; i < b.insns.size(); ++i) {
            const Instruction& in = b.insns[i];
            if (in.origin != Origin::original) continue;
            if (in.op == Opcode::ext) {
              segment_open = false;
              continue;
            }
            if (!segment_open) {
              summary_positions.push_back(i);
              segment_open = true;
            }
          }
        }
        for (size_t k = summary_positions.size(); k-- > 0;) {
          size_t pos = summary_positions[k];
          b.insns.insert(b.insns.begin() + pos,
                         make_intrinsic(IntrinsicKind::tag_block, b.insns[pos].site));
        }
        for (size_t i = 0; i < b.insns.size(); ++i) {
          if (b.insns[i].origin == Origin::original && b.insns[i].op == Opcode::ret) {
            b.insns.insert(b.insns.begin() + i,
                           make_intrinsic(IntrinsicKind::frame_unpoison, b.insns[i].site));
            ++i;
          }
        }
        if (&b == &fn.blocks.front()) {
          size_t pos = b.marked ? 2 : 0;
          b.insns.insert(b.insns.begin() + pos,
                         make_intrinsic(IntrinsicKind::frame_poison, first_site(b)));
        }
      }
    }
  }
  p.finalize();
}

void insert_coverage_guards(Program& p) {
  int guard_id = 0;
  for (auto& fn : p.functions) {
    for (auto& b : fn.blocks) {
      if (b.is_trampoline) continue;
      if (fn.copy == CopyKind::shadow) {
        b.insns.insert(b.insns.begin(),
                       make_intrinsic(IntrinsicKind::cov_spec, first_site(b),
                                      {Operand::make_imm(guard_id++)}));
      } else if (!b.insns.empty() && b.insns.back().op == Opcode::jcc) {
        // Right before the start_sim entry.
        size_t pos = b.insns.size() - 1;
        while (pos > 0 && b.insns[pos - 1].is_intrinsic(IntrinsicKind::start_sim)) --pos;
        const BranchInfo* info = nullptr;
        for (const auto& br : p.branches)
          if (br.site == b.insns.back().site) info = &br;
        if (!info) throw RewriteError("missing branch info for " + b.label);
        b.insns.insert(b.insns.begin() + pos,
                       make_intrinsic(IntrinsicKind::cov_branch, b.insns.back().site,
                                      {Operand::make_imm(info->id)}));
      }
    }
  }
  p.meta.num_spec_guards = guard_id;
  p.finalize();
}

void instrument_mixed(Program& p, const RewriteConfig& cfg) {
  require_mode(p, InstrMode::none, "instrument_mixed");
  const bool kasper = cfg.policy == Policy::kasper;
  constexpr int kNormal = 0, kSim = 1, kBoth = 2;

  // Branch table without trampolines.
  std::vector<SiteRef> sites = enumerate_branches(p);
  p.branches.clear();
  for (size_t id = 0; id < sites.size(); ++id) {
    BasicBlock* b = p.find_block(sites[id].block);
    Function* owner = nullptr;
    size_t block_ix = 0;
    for (auto& fn : p.functions)
      for (size_t i = 0; i < fn.blocks.size(); ++i)
        if (&fn.blocks[i] == b) {
          owner = &fn;
          block_ix = i;
        }
    if (!owner || block_ix + 1 >= owner->blocks.size())
      throw RewriteError("conditional branch without fallthrough at " + sites[id].str());
    BranchInfo info;
    info.id = static_cast<int>(id);
    info.site = sites[id];
    info.function = owner->name;
    info.cond = b->insns.back().cond;
    info.taken_label = resolve_block_label(p, b->insns.back().ops[0].label);
    info.fall_label = owner->blocks[block_ix + 1].label;
    p.branches.push_back(std::move(info));
  }
  std::map<SiteRef, int> id_by_site;
  for (const auto& br : p.branches) id_by_site[br.site] = br.id;

  int guard_id = 0;
  for (auto& fn : p.functions) {
    for (auto& b : fn.blocks) {
      std::vector<Instruction> out;
      auto hook = [&](int want, Instruction in) {
        out.push_back(make_guard(want, 1, in.site));
        out.push_back(std::move(in));
      };

      SiteRef bsite = first_site(b);
      hook(kSim, make_intrinsic(IntrinsicKind::cov_spec, bsite,
                                {Operand::make_imm(guard_id++)}));
      if (&b == &fn.blocks.front())
        hook(kBoth, make_intrinsic(IntrinsicKind::frame_poison, bsite));

      bool has_term = !b.insns.empty() && is_terminator(b.insns.back().op);
      size_t body_end = b.insns.size() - (has_term ? 1 : 0);
      int count = 0;

      auto emit_checks_if_due = [&](bool at_end) {
        bool due = at_end ? end_check_due(count, cfg.check_interval)
                          : interval_check_due(count, cfg.check_interval);
        if (due)
          hook(kSim, make_intrinsic(IntrinsicKind::check_restore,
                                    out.empty() ? bsite : out.back().site));
      };

      for (size_t i = 0; i < body_end; ++i) {
        const Instruction& in = b.insns[i];
        switch (in.op) {
          case Opcode::load: {
            bool allow = in.ops[1].reg == kStackReg;
            if (!allow)
              hook(kSim,
                   make_intrinsic(IntrinsicKind::asan_check, in.site, {in.ops[1]}, in.width));
            if (kasper)
              hook(kBoth, make_intrinsic(
                              IntrinsicKind::taint_load, in.site,
                              {in.ops[0], in.ops[1], Operand::make_imm(allow ? 1 : 0)}, in.width));
            break;
          }
          case Opcode::store: {
            bool allow = in.ops[1].reg == kStackReg;
            if (!allow)
              hook(kSim,
                   make_intrinsic(IntrinsicKind::asan_check, in.site, {in.ops[1]}, in.width));
            hook(kSim, make_intrinsic(IntrinsicKind::mem_log, in.site, {in.ops[1]}, in.width));
            if (kasper)
              hook(kBoth, make_intrinsic(IntrinsicKind::tag_store, in.site,
                                         {in.ops[0], in.ops[1]}, in.width));
            break;
          }
          case Opcode::push:
            hook(kSim, make_intrinsic(IntrinsicKind::mem_log, in.site,
                                      {Operand::make_mem(kStackReg, -4)}, 4));
            if (kasper)
              hook(kBoth, make_intrinsic(IntrinsicKind::tag_store, in.site,
                                         {in.ops[0], Operand::make_mem(kStackReg, -4)}, 4));
            break;
          case Opcode::pop:
            if (kasper)
              hook(kBoth, make_intrinsic(
                              IntrinsicKind::taint_load, in.site,
                              {in.ops[0], Operand::make_mem(kStackReg, 0), Operand::make_imm(1)},
                              4));
            break;
          case Opcode::mov:
            if (kasper)
              hook(kBoth, make_intrinsic(IntrinsicKind::tag_mov, in.site, {in.ops[0], in.ops[1]}));
            break;
          case Opcode::add:
          case Opcode::sub:
          case Opcode::and_:
          case Opcode::or_:
          case Opcode::xor_:
          case Opcode::shl:
          case Opcode::shr:
            if (kasper)
              hook(kBoth, make_intrinsic(IntrinsicKind::tag_alu, in.site, {in.ops[0], in.ops[1]}));
            break;
          case Opcode::cmp:
            if (kasper)
              hook(kBoth, make_intrinsic(IntrinsicKind::tag_cmp, in.site, {in.ops[0], in.ops[1]}));
            break;
          case Opcode::ext:
            hook(kSim, make_intrinsic(IntrinsicKind::rollback, in.site,
                                      {Operand::make_imm(
                                          static_cast<int32_t>(RollbackReason::external_call))}));
            break;
          case Opcode::fence:
            hook(kSim, make_intrinsic(IntrinsicKind::rollback, in.site,
                                      {Operand::make_imm(
                                          static_cast<int32_t>(RollbackReason::serialize))}));
            break;
          default:
            break;
        }
        out.push_back(in);
        if (in.origin == Origin::original) {
          ++count;
          emit_checks_if_due(false);
        }
      }

      if (has_term) {
        const Instruction& t = b.insns.back();
        switch (t.op) {
          case Opcode::jcc: {
            if (kasper) hook(kSim, make_intrinsic(IntrinsicKind::port_check, t.site));
            emit_checks_if_due(true);
            auto it = id_by_site.find(t.site);
            if (it == id_by_site.end())
              throw RewriteError("conditional branch without info at " + t.site.str());
            hook(kNormal, make_intrinsic(IntrinsicKind::cov_branch, t.site,
                                         {Operand::make_imm(it->second)}));
            hook(cfg.nesting ? kBoth : kNormal,
                 make_intrinsic(IntrinsicKind::start_sim, t.site,
                                {Operand::make_imm(it->second)}));
            break;
          }
          case Opcode::ret:
            hook(kBoth, make_intrinsic(IntrinsicKind::frame_unpoison, t.site));
            emit_checks_if_due(true);
            hook(kSim, make_intrinsic(IntrinsicKind::escape_check, t.site));
            break;
          case Opcode::jmpr:
            emit_checks_if_due(true);
            hook(kSim, make_intrinsic(IntrinsicKind::escape_check, t.site, {t.ops[0]}));
            break;
          case Opcode::callr:
          case Opcode::call: {
            emit_checks_if_due(true);
            bool external = t.op == Opcode::call && is_extern_symbol(p, t.ops[0].label);
            if (external) {
              hook(kSim, make_intrinsic(IntrinsicKind::rollback, t.site,
                                        {Operand::make_imm(static_cast<int32_t>(
                                            RollbackReason::external_call))}));
            } else {
              if (t.op == Opcode::callr)
                hook(kSim, make_intrinsic(IntrinsicKind::escape_check, t.site, {t.ops[0]}));
              hook(kSim, make_intrinsic(IntrinsicKind::mem_log, t.site,
                                        {Operand::make_mem(kStackReg, -4)}, 4));
              if (kasper)
                hook(kBoth, make_intrinsic(IntrinsicKind::tag_clear, t.site,
                                           {Operand::make_mem(kStackReg, -4)}, 4));
            }
            break;
          }
          case Opcode::halt:
            hook(kSim, make_intrinsic(IntrinsicKind::rollback, t.site,
                                      {Operand::make_imm(
                                          static_cast<int32_t>(RollbackReason::serialize))}));
            emit_checks_if_due(true);
            break;
          default:
            emit_checks_if_due(true);
            break;
        }
        out.push_back(t);
      } else {
        emit_checks_if_due(true);
      }
      b.insns = std::move(out);
    }
  }

  p.meta.mode = InstrMode::mixed;
  p.meta.policy = cfg.policy;
  p.meta.nesting = cfg.nesting;
  p.meta.rob_budget = cfg.rob_budget;
  p.meta.check_interval = cfg.check_interval;
  p.meta.max_nest_depth = cfg.max_nest_depth;
  p.meta.full_depth_runs = cfg.full_depth_runs;
  p.meta.num_branches = static_cast<int>(p.branches.size());
  p.meta.num_spec_guards = guard_id;
  p.finalize();
}

Program instrument(const Program& input, const RewriteConfig& cfg) {
  cfg.validate();
  if (input.meta.mode != InstrMode::none)
    throw RewriteError("program is already instrumented");
  Program p = input;
  build_cfg(p);
  p.stamp_sites();
  p.finalize();

  if (cfg.mode == InstrMode::mixed) {
    instrument_mixed(p, cfg);
    return p;
  }

  duplicate_functions(p);
  retarget_direct_transfers(p);
  build_trampolines(p);
  insert_simulation_entries(p, cfg);
  insert_restore_points(p, cfg);
  harden_indirect_transfers(p);
  instrument_memory_ops(p, cfg);
  insert_coverage_guards(p);

  p.meta.mode = InstrMode::shadows;
  p.meta.policy = cfg.policy;
  p.meta.nesting = cfg.nesting;
  p.meta.rob_budget = cfg.rob_budget;
  p.meta.check_interval = cfg.check_interval;
  p.meta.max_nest_depth = cfg.max_nest_depth;
  p.meta.full_depth_runs = cfg.full_depth_runs;
  p.finalize();
  return p;
}

}  // namespace shadowspec
