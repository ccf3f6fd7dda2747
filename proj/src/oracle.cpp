// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/oracle.hpp"

#include <algorithm>
#include <unordered_map>

#include "shadowspec/cfg.hpp"

namespace shadowspec {

namespace {

using layout::in_heap;
using layout::in_user_data;

struct BlockRef {
  const Function* fn = nullptr;
  const BasicBlock* block = nullptr;
  size_t index = 0;
  bool valid() const { return block != nullptr; }
};

// Byte view with an optional copy-on-write overlay. The overlay carries every
// speculative write (user memory, poison shadow and tag shadow alike) and is
// dropped when the episode ends.
struct View {
  MemoryStore* base;
  std::unordered_map<uint32_t, uint8_t>* overlay;

  uint8_t load8(uint32_t a) const {
    if (overlay) {
      auto it = overlay->find(a);
      if (it != overlay->end()) return it->second;
    }
    return base->load8(a);
  }
  void store8(uint32_t a, uint8_t v) {
    if (overlay)
      (*overlay)[a] = v;
    else
      base->store8(a, v);
  }
  uint32_t load(uint32_t a, uint8_t w) const {
    uint32_t v = 0;
    for (int i = 0; i < w; ++i) v |= static_cast<uint32_t>(load8(a + i)) << (8 * i);
    return v;
  }
  void store(uint32_t a, uint32_t v, uint8_t w) {
    for (int i = 0; i < w; ++i) store8(a + i, static_cast<uint8_t>(v >> (8 * i)));
  }
  uint8_t poison(uint32_t a, uint8_t w) const {
    for (uint32_t slot = a >> 3; slot <= ((a + w - 1) >> 3); ++slot) {
      uint8_t v = load8(layout::kAsanShadowBase + slot);
      if (v != layout::kShadowOk) return v;
    }
    return layout::kShadowOk;
  }
  void set_poison(uint32_t a, uint32_t len, uint8_t v) {
    for (uint32_t slot = a >> 3; slot <= ((a + len - 1) >> 3); ++slot)
      store8(layout::kAsanShadowBase + slot, v);
  }
  TagSet tags(uint32_t a, uint8_t w) const {
    TagSet t = 0;
    for (int i = 0; i < w; ++i) t |= load8(layout::tag_shadow(a + i));
    return t;
  }
  void set_tags(uint32_t a, uint8_t w, TagSet t) {
    for (int i = 0; i < w; ++i) store8(layout::tag_shadow(a + i), t);
  }
};

struct MachineState {
  std::array<uint32_t, kNumRegs> regs{};
  Flags flags;
  std::array<TagSet, kNumRegs> reg_tags{};
  TagSet flags_tag = 0;
};

struct Explorer {
  Program p;
  OracleConfig cfg;
  bool kasper;
  bool massage_enabled;
  bool taint_sources;

  std::map<std::string, BlockRef> by_label;
  std::vector<const BasicBlock*> by_addr;
  std::map<const BasicBlock*, BlockRef> next_block;
  std::map<SiteRef, int> branch_ids;
  std::map<uint32_t, std::string> extern_addrs;

  MemoryStore mem;
  MachineState st;
  uint32_t heap_bump = layout::kHeapBase;
  std::map<uint32_t, uint32_t> allocations;
  std::span<const uint8_t> input;
  size_t cursor = 0;
  bool input_short = false;

  BranchStatsTable stats;
  uint64_t originals = 0;
  OracleResult res;

  Explorer(const Program& plain, const OracleConfig& config) : p(plain), cfg(config) {
    build_cfg(p);
    p.stamp_sites();
    p.finalize();
    kasper = cfg.policy == Policy::kasper;
    massage_enabled = kasper && !p.meta.harness_mode;
    taint_sources = kasper && !p.meta.harness_mode;

    for (const auto& fn : p.functions) {
      for (size_t i = 0; i < fn.blocks.size(); ++i) {
        const BasicBlock& b = fn.blocks[i];
        by_label[b.label] = BlockRef{&fn, &b, 0};
        by_addr.push_back(&b);
        next_block[&b] =
            i + 1 < fn.blocks.size() ? BlockRef{&fn, &fn.blocks[i + 1], 0} : BlockRef{};
      }
      if (!fn.blocks.empty() && !by_label.count(fn.name))
        by_label[fn.name] = BlockRef{&fn, &fn.blocks.front(), 0};
    }
    std::sort(by_addr.begin(), by_addr.end(),
              [](const BasicBlock* a, const BasicBlock* b) { return a->addr < b->addr; });
    auto sites = enumerate_branches(p);
    for (size_t i = 0; i < sites.size(); ++i) branch_ids[sites[i]] = static_cast<int>(i);
    for (const auto& e : p.externs) extern_addrs[e.addr] = e.binding;
  }

  BlockRef block_at_addr(uint32_t addr) const {
    auto it = std::upper_bound(by_addr.begin(), by_addr.end(), addr,
                               [](uint32_t a, const BasicBlock* b) { return a < b->addr; });
    if (it == by_addr.begin()) return {};
    const BasicBlock* b = *(it - 1);
    uint32_t off = addr - b->addr;
    if (addr >= b->addr + b->insns.size() * layout::kInsnStride ||
        off % layout::kInsnStride != 0)
      return {};
    BlockRef ref = by_label.at(b->label);
    ref.index = off / layout::kInsnStride;
    return ref;
  }

  BlockRef block_of_label(const std::string& label) const {
    auto it = by_label.find(label);
    if (it == by_label.end()) return {};
    return it->second;
  }

  bool flagged_block_start(uint32_t addr) const {
    BlockRef r = block_at_addr(addr);
    return r.valid() && r.index == 0 && r.block->indirect_target;
  }

  static uint32_t src_value(const MachineState& m, const Instruction& in, const Program& p) {
    const Operand& o = in.ops[1];
    switch (o.kind) {
      case OperandKind::reg: return m.regs[o.reg];
      case OperandKind::imm: return static_cast<uint32_t>(o.imm);
      case OperandKind::label: return p.symbol_addr(o.label);
      default: return 0;
    }
  }
  static TagSet src_tag(const MachineState& m, const Instruction& in) {
    const Operand& o = in.ops[1];
    return o.kind == OperandKind::reg ? m.reg_tags[o.reg] : 0;
  }

  uint32_t arch_load(const View& v, uint32_t addr, uint8_t w) const {
    if (in_heap(addr) && v.poison(addr, w) != layout::kShadowOk) return 0;
    return v.load(addr, w);
  }

  void report(GadgetClass cls, const SiteRef& site, const std::vector<int>& chain) {
    res.keys.insert(ReportKey{cls, site, chain});
  }

  // Sink checks + tag update for a load-shaped access (load or pop) during
  // simulation; mirrors the instrumented asan_check + taint_load pair.
  void spec_load_sinks(MachineState& m, const View& v, const Instruction& in, int value_reg,
                       int base_reg, uint32_t addr, uint8_t w, bool allow, bool user,
                       const std::vector<int>& chain) {
    bool oob = !allow && user && v.poison(addr, w) != layout::kShadowOk;
    if (!kasper) {
      if (oob) report(GadgetClass::sf_oob, in.site, chain);
      return;
    }
    TagSet addr_tag = m.reg_tags[base_reg];
    AddrUseResult au = kasper_on_addr_use(addr_tag);
    if (au.user_cache) report(GadgetClass::user_cache, in.site, chain);
    if (au.massage_cache) report(GadgetClass::massage_cache, in.site, chain);
    LoadSinkResult lr =
        kasper_on_load({addr_tag, user ? v.tags(addr, w) : TagSet{0}, oob, massage_enabled});
    if (lr.user_mds) report(GadgetClass::user_mds, in.site, chain);
    if (lr.massage_mds) report(GadgetClass::massage_mds, in.site, chain);
    m.reg_tags[value_reg] = lr.value_tag;
  }

  void spec_store_sinks(MachineState& m, const View& v, const Instruction& in, int base_reg,
                        uint32_t addr, uint8_t w, bool allow, const std::vector<int>& chain) {
    if (!kasper) {
      if (!allow && v.poison(addr, w) != layout::kShadowOk)
        report(GadgetClass::sf_oob, in.site, chain);
      return;
    }
    AddrUseResult au = kasper_on_addr_use(m.reg_tags[base_reg]);
    if (au.user_cache) report(GadgetClass::user_cache, in.site, chain);
    if (au.massage_cache) report(GadgetClass::massage_cache, in.site, chain);
  }

  struct StepOutcome {
    bool fault = false;
  };

  // One straight-line instruction: value semantics plus tag propagation, with
  // sinks when speculative.
  StepOutcome exec_plain(MachineState& m, View& v, const Instruction& in, bool speculative,
                         const std::vector<int>* chain) {
    StepOutcome out;
    switch (in.op) {
      case Opcode::mov:
        if (kasper) m.reg_tags[in.ops[0].reg] = src_tag(m, in);
        m.regs[in.ops[0].reg] = src_value(m, in, p);
        break;
      case Opcode::add:
      case Opcode::sub:
      case Opcode::and_:
      case Opcode::or_:
      case Opcode::xor_:
      case Opcode::shl:
      case Opcode::shr: {
        if (kasper) m.reg_tags[in.ops[0].reg] |= src_tag(m, in);
        uint32_t b = src_value(m, in, p);
        uint32_t& a = m.regs[in.ops[0].reg];
        switch (in.op) {
          case Opcode::add: a += b; break;
          case Opcode::sub: a -= b; break;
          case Opcode::and_: a &= b; break;
          case Opcode::or_: a |= b; break;
          case Opcode::xor_: a ^= b; break;
          case Opcode::shl: a <<= (b & 31); break;
          default: a >>= (b & 31); break;
        }
        break;
      }
      case Opcode::cmp: {
        if (kasper) m.flags_tag = m.reg_tags[in.ops[0].reg] | src_tag(m, in);
        uint32_t a = m.regs[in.ops[0].reg];
        uint32_t b = src_value(m, in, p);
        m.flags.z = a == b;
        m.flags.n = static_cast<int32_t>(a) < static_cast<int32_t>(b);
        m.flags.c = a < b;
        break;
      }
      case Opcode::load: {
        uint32_t addr = m.regs[in.ops[1].reg] + static_cast<uint32_t>(in.ops[1].imm);
        uint8_t w = in.width;
        bool user = in_user_data(addr) && in_user_data(addr + w - 1);
        bool code = layout::in_code(addr) && layout::in_code(addr + w - 1);
        if (!user && !code) {
          out.fault = true;
          return out;
        }
        bool allow = in.ops[1].reg == kStackReg;
        if (speculative)
          spec_load_sinks(m, v, in, in.ops[0].reg, in.ops[1].reg, addr, w, allow, user, *chain);
        else if (kasper)
          m.reg_tags[in.ops[0].reg] = user ? v.tags(addr, w) : TagSet{0};
        m.regs[in.ops[0].reg] = code ? 0 : arch_load(v, addr, w);
        break;
      }
      case Opcode::store: {
        uint32_t addr = m.regs[in.ops[1].reg] + static_cast<uint32_t>(in.ops[1].imm);
        uint8_t w = in.width;
        if (!in_user_data(addr) || !in_user_data(addr + w - 1)) {
          out.fault = true;
          return out;
        }
        bool allow = in.ops[1].reg == kStackReg;
        if (speculative) spec_store_sinks(m, v, in, in.ops[1].reg, addr, w, allow, *chain);
        if (kasper) v.set_tags(addr, w, m.reg_tags[in.ops[0].reg]);
        v.store(addr, m.regs[in.ops[0].reg], w);
        break;
      }
      case Opcode::push: {
        uint32_t addr = m.regs[kStackReg] - 4;
        if (!in_user_data(addr) || !in_user_data(addr + 3)) {
          out.fault = true;
          return out;
        }
        if (speculative) spec_store_sinks(m, v, in, kStackReg, addr, 4, true, *chain);
        if (kasper) v.set_tags(addr, 4, m.reg_tags[in.ops[0].reg]);
        m.regs[kStackReg] = addr;
        v.store(addr, m.regs[in.ops[0].reg], 4);
        break;
      }
      case Opcode::pop: {
        uint32_t addr = m.regs[kStackReg];
        if (!in_user_data(addr) || !in_user_data(addr + 3)) {
          out.fault = true;
          return out;
        }
        if (speculative)
          spec_load_sinks(m, v, in, in.ops[0].reg, kStackReg, addr, 4, true, true, *chain);
        else if (kasper)
          m.reg_tags[in.ops[0].reg] = v.tags(addr, 4);
        m.regs[in.ops[0].reg] = arch_load(v, addr, 4);
        m.regs[kStackReg] += 4;
        break;
      }
      default:
        break;  // nop, fence (architectural no-op), marker never present
    }
    return out;
  }

  StepOutcome do_ext(const std::string& binding, bool* halted, uint32_t* code) {
    StepOutcome out;
    auto b = builtin_from_name(binding);
    if (!b) {
      out.fault = true;
      return out;
    }
    ExtCallState ctx{mem,       st.regs,     input,  cursor, taint_sources,
                     heap_bump, allocations, nullptr, &input_short};
    ExtCallOutcome r = run_builtin(*b, ctx);
    if (!r.fault.empty()) out.fault = true;
    *halted = r.halted;
    *code = r.exit_code;
    return out;
  }

  // --- speculative episodes ---

  void run_episode(const MachineState& m0, int first_branch, BlockRef wrong) {
    MachineState m = m0;
    std::unordered_map<uint32_t, uint8_t> overlay;
    View v{&mem, &overlay};
    std::vector<int> chain{first_branch};
    uint64_t episode_originals = 0;
    res.episodes++;

    auto over_budget = [&] { return episode_originals >= static_cast<uint64_t>(cfg.rob_budget); };
    auto over_limit = [&] { return originals >= cfg.max_steps; };

    BlockRef cur = wrong;
    while (true) {
      if (!cur.valid()) return;  // fault-shaped end
      const BasicBlock& b = *cur.block;
      bool has_term = !b.insns.empty() && is_terminator(b.insns.back().op);
      size_t body_end = b.insns.size() - (has_term ? 1 : 0);
      int count = 0;

      for (size_t i = cur.index; i < body_end; ++i) {
        const Instruction& in = b.insns[i];
        if (over_limit()) return;
        if (in.op == Opcode::ext || in.op == Opcode::fence) return;  // unconditional restore
        ++originals;
        ++episode_originals;
        if (exec_plain(m, v, in, true, &chain).fault) return;
        ++count;
        if (interval_check_due(count, cfg.check_interval) && over_budget()) return;
      }

      if (!has_term) {
        if (end_check_due(count, cfg.check_interval) && over_budget()) return;
        cur = next_block.at(&b);
        cur.index = 0;
        continue;
      }

      const Instruction& t = b.insns.back();
      if (over_limit()) return;
      switch (t.op) {
        case Opcode::jcc: {
          if (kasper) {
            BranchSinkResult br = kasper_on_branch(m.flags_tag);
            if (br.user_port) report(GadgetClass::user_port, t.site, chain);
            if (br.massage_port) report(GadgetClass::massage_port, t.site, chain);
          }
          if (end_check_due(count, cfg.check_interval) && over_budget()) return;
          int id = branch_ids.at(t.site);
          bool taken = cond_holds(t.cond, m.flags);
          BlockRef taken_ref = block_of_label(t.ops[0].label);
          BlockRef fall_ref = next_block.at(&b);
          if (cfg.nesting) {
            BranchStat& s = stats.bump(id, cfg.max_nest_depth);
            if (nesting_decision(s, static_cast<int>(chain.size()), cfg.max_nest_depth,
                                 cfg.full_depth_runs)) {
              chain.push_back(id);
              cur = taken ? fall_ref : taken_ref;  // the wrong path, again
              cur.index = 0;
              continue;
            }
          }
          ++originals;
          ++episode_originals;
          cur = taken ? taken_ref : fall_ref;
          cur.index = 0;
          continue;
        }
        case Opcode::ret: {
          if (in_user_data(m.regs[kStackReg]))
            v.set_poison(m.regs[kStackReg], 4, layout::kShadowOk);
          if (end_check_due(count, cfg.check_interval) && over_budget()) return;
          uint32_t target = v.load(m.regs[kStackReg], 4);
          if (!flagged_block_start(target)) return;  // indirect escape
          ++originals;
          ++episode_originals;
          m.regs[kStackReg] += 4;
          cur = block_at_addr(target);
          continue;
        }
        case Opcode::jmpr: {
          if (end_check_due(count, cfg.check_interval) && over_budget()) return;
          uint32_t target = m.regs[t.ops[0].reg];
          if (!flagged_block_start(target)) return;
          ++originals;
          ++episode_originals;
          cur = block_at_addr(target);
          continue;
        }
        case Opcode::callr:
        case Opcode::call: {
          if (end_check_due(count, cfg.check_interval) && over_budget()) return;
          uint32_t target;
          if (t.op == Opcode::call) {
            target = p.symbol_addr(t.ops[0].label);
            if (extern_addrs.count(target)) return;  // external library call
          } else {
            target = m.regs[t.ops[0].reg];
            if (extern_addrs.count(target)) return;
            if (!flagged_block_start(target)) return;
          }
          ++originals;
          ++episode_originals;
          uint32_t slot = m.regs[kStackReg] - 4;
          if (!in_user_data(slot)) return;
          if (kasper) v.set_tags(slot, 4, 0);
          BlockRef cont = next_block.at(&b);
          v.store(slot, cont.valid() ? cont.block->addr : 0, 4);
          m.regs[kStackReg] = slot;
          v.set_poison(slot, 4, layout::kShadowRetSlot);  // callee prologue
          cur = block_at_addr(target);
          continue;
        }
        case Opcode::jmp:
          ++originals;
          ++episode_originals;
          cur = block_of_label(t.ops[0].label);
          cur.index = 0;
          continue;
        case Opcode::halt:
          if (end_check_due(count, cfg.check_interval) && over_budget()) return;
          return;  // serializing end
        default:
          return;
      }
    }
  }

  // --- normal execution ---

  void run(std::span<const uint8_t> in_bytes) {
    verify_shadow_layout();
    input = in_bytes;
    st.regs.fill(0);
    st.regs[kStackReg] = layout::kStackTop;

    for (const auto& d : p.data) {
      std::vector<uint8_t> bytes = d.bytes;
      for (const auto& [off, label] : d.label_words) {
        uint32_t w = p.symbol_addr(label);
        for (int k = 0; k < 4; ++k) bytes[off + k] = static_cast<uint8_t>(w >> (8 * k));
      }
      for (size_t i = 0; i < bytes.size(); ++i)
        mem.store8(d.addr + static_cast<uint32_t>(i), bytes[i]);
    }
    if (p.meta.harness_mode && !p.meta.user_global.empty()) {
      uint32_t base = p.symbol_addr(p.meta.user_global);
      for (uint32_t i = 0; i < p.meta.user_global_bytes && i < input.size(); ++i)
        mem.store8(base + i, input[i]);
      if (kasper && p.meta.user_global_bytes)
        taint_union(mem, base, p.meta.user_global_bytes, tag::kUser, nullptr);
    }

    BlockRef cur = block_of_label(p.entry);
    if (!cur.valid()) {
      res.status = ExitStatus::fault;
      return;
    }
    poison_ret_slot(mem, st.regs[kStackReg], nullptr);  // entry prologue

    View direct{&mem, nullptr};
    while (true) {
      if (!cur.valid()) {
        res.status = ExitStatus::fault;
        return;
      }
      if (originals >= cfg.max_steps) {
        res.status = ExitStatus::limit_exceeded;
        return;
      }
      const BasicBlock& b = *cur.block;
      if (cur.index >= b.insns.size()) {
        cur = next_block.at(&b);
        continue;
      }
      const Instruction& in = b.insns[cur.index];

      switch (in.op) {
        case Opcode::jcc: {
          int id = branch_ids.at(in.site);
          stats.bump(id, cfg.max_nest_depth);
          bool taken = cond_holds(in.cond, st.flags);
          BlockRef taken_ref = block_of_label(in.ops[0].label);
          BlockRef fall_ref = next_block.at(&b);
          run_episode(st, id, taken ? fall_ref : taken_ref);
          ++originals;  // the branch itself retires after the episode
          cur = taken ? taken_ref : fall_ref;
          cur.index = 0;
          continue;
        }
        case Opcode::jmp:
          ++originals;
          cur = block_of_label(in.ops[0].label);
          cur.index = 0;
          continue;
        case Opcode::jmpr:
          ++originals;
          cur = block_at_addr(st.regs[in.ops[0].reg]);
          continue;
        case Opcode::call:
        case Opcode::callr: {
          ++originals;
          uint32_t target = in.op == Opcode::call ? p.symbol_addr(in.ops[0].label)
                                                  : st.regs[in.ops[0].reg];
          auto ext_it = extern_addrs.find(target);
          if (ext_it != extern_addrs.end()) {
            bool halted = false;
            uint32_t code = 0;
            if (do_ext(ext_it->second, &halted, &code).fault) {
              res.status = ExitStatus::fault;
              return;
            }
            if (halted) {
              res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
              res.exit_code = code;
              return;
            }
            cur.index++;
            continue;
          }
          uint32_t slot = st.regs[kStackReg] - 4;
          if (!in_user_data(slot)) {
            res.status = ExitStatus::fault;
            return;
          }
          if (kasper) taint_assign(mem, slot, 4, 0, nullptr);
          BlockRef cont = next_block.at(&b);
          mem.store(slot, cont.valid() ? cont.block->addr : 0, 4);
          st.regs[kStackReg] = slot;
          poison_ret_slot(mem, slot, nullptr);  // callee prologue
          cur = block_at_addr(target);
          continue;
        }
        case Opcode::ret: {
          ++originals;
          if (!in_user_data(st.regs[kStackReg])) {
            res.status = ExitStatus::fault;
            return;
          }
          unpoison_range(mem, st.regs[kStackReg], 4, nullptr);
          uint32_t target = mem.load(st.regs[kStackReg], 4);
          st.regs[kStackReg] += 4;
          cur = block_at_addr(target);
          continue;
        }
        case Opcode::ext: {
          ++originals;
          bool halted = false;
          uint32_t code = 0;
          if (do_ext(in.ext_name, &halted, &code).fault) {
            res.status = ExitStatus::fault;
            return;
          }
          if (halted) {
            res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
            res.exit_code = code;
            return;
          }
          cur.index++;
          continue;
        }
        case Opcode::halt:
          ++originals;
          res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
          res.exit_code = st.regs[0];
          return;
        default: {
          ++originals;
          if (exec_plain(st, direct, in, false, nullptr).fault) {
            res.status = ExitStatus::fault;
            return;
          }
          cur.index++;
          continue;
        }
      }
    }
  }
};

}  // namespace

OracleResult oracle_explore(const Program& plain, std::span<const uint8_t> input,
                            const OracleConfig& cfg) {
  Explorer ex(plain, cfg);
  ex.run(input);
  return ex.res;
}

}  // namespace shadowspec
