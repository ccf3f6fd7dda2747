// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/vm.hpp"

#include <algorithm>
#include <cstring>

namespace shadowspec {

std::optional<BuiltinExt> builtin_from_name(const std::string& name) {
  if (name == "read_input") return BuiltinExt::read_input;
  if (name == "write_output") return BuiltinExt::write_output;
  if (name == "malloc") return BuiltinExt::malloc_fn;
  if (name == "free") return BuiltinExt::free_fn;
  if (name == "exit") return BuiltinExt::exit_fn;
  return std::nullopt;
}

const char* exit_status_name(ExitStatus s) {
  switch (s) {
    case ExitStatus::halted: return "halted";
    case ExitStatus::input_exhausted: return "input-exhausted";
    case ExitStatus::limit_exceeded: return "limit-exceeded";
    case ExitStatus::fault: return "fault";
  }
  return "?";
}

// --- ExecImage -----------------------------------------------------------------

int ExecImage::site_index(const SiteRef& s) {
  if (!s.valid()) return -1;
  auto it = site_ids_.find(s);
  if (it != site_ids_.end()) return it->second;
  int ix = static_cast<int>(sites.size());
  SiteInfo info;
  info.ref = s;
  if (auto addr = program_.site_addr(s)) {
    info.addr = *addr;
    info.symbol = program_.symbolize(*addr);
  }
  sites.push_back(std::move(info));
  site_ids_.emplace(s, ix);
  return ix;
}

ExecImage::ExecImage(Program program) : program_(std::move(program)) {
  if (!program_.finalized) program_.finalize();
  const Program& p = program_;

  for (const auto& fn : p.functions) {
    for (const auto& b : fn.blocks) {
      ExecBlock eb;
      eb.start = b.addr;
      eb.end = b.addr + static_cast<uint32_t>(b.insns.size()) * layout::kInsnStride;
      eb.first = static_cast<uint32_t>(insns.size());
      eb.count = static_cast<uint32_t>(b.insns.size());
      eb.copy = fn.copy;
      eb.trampoline = b.is_trampoline;
      eb.marked = b.marked;
      eb.indirect_target = b.indirect_target;
      uint32_t block_ix = static_cast<uint32_t>(blocks.size());

      for (size_t i = 0; i < b.insns.size(); ++i) {
        const Instruction& in = b.insns[i];
        DecodedInsn d;
        d.op = in.op;
        d.cond = in.cond;
        d.intr = in.intr;
        d.origin = in.origin;
        d.width = in.width;
        d.block_ix = block_ix;
        d.site_ix = site_index(in.site);
        d.preamble = b.marked && i < 2;

        auto resolve = [&](const std::string& label) {
          auto a = p.try_symbol_addr(label);
          if (!a) throw std::runtime_error("unresolved label in program: " + label);
          return *a;
        };
        auto decode_src = [&](const Operand& o) {
          switch (o.kind) {
            case OperandKind::reg:
              d.src_kind = 1;
              d.r1 = static_cast<int8_t>(o.reg);
              break;
            case OperandKind::imm:
              d.src_kind = 2;
              d.imm0 = o.imm;
              break;
            case OperandKind::label:
              d.src_kind = 3;
              d.target = resolve(o.label);
              break;
            case OperandKind::mem:
              throw std::runtime_error("unexpected memory operand");
          }
        };
        auto decode_mem = [&](const Operand& o) {
          d.has_mem = true;
          d.mem_base = static_cast<int8_t>(o.reg);
          d.mem_disp = o.imm;
        };

        switch (in.op) {
          case Opcode::mov:
          case Opcode::add:
          case Opcode::sub:
          case Opcode::and_:
          case Opcode::or_:
          case Opcode::xor_:
          case Opcode::shl:
          case Opcode::shr:
          case Opcode::cmp:
            d.r0 = static_cast<int8_t>(in.ops[0].reg);
            decode_src(in.ops[1]);
            break;
          case Opcode::load:
          case Opcode::store:
            d.r0 = static_cast<int8_t>(in.ops[0].reg);
            decode_mem(in.ops[1]);
            break;
          case Opcode::jmp:
          case Opcode::call:
            d.target = resolve(in.ops[0].label);
            break;
          case Opcode::jcc:
            d.target = resolve(in.ops[0].label);
            break;
          case Opcode::jmpr:
          case Opcode::callr:
          case Opcode::push:
          case Opcode::pop:
            d.r0 = static_cast<int8_t>(in.ops[0].reg);
            break;
          case Opcode::ext: {
            auto b_ext = builtin_from_name(in.ext_name);
            if (!b_ext) throw std::runtime_error("unknown external: " + in.ext_name);
            d.ext = static_cast<uint16_t>(*b_ext);
            break;
          }
          case Opcode::intrinsic:
            switch (in.intr) {
              case IntrinsicKind::start_sim:
              case IntrinsicKind::cov_branch:
              case IntrinsicKind::cov_spec:
              case IntrinsicKind::rollback:
                d.imm0 = in.ops[0].imm;
                break;
              case IntrinsicKind::mem_log:
              case IntrinsicKind::asan_check:
              case IntrinsicKind::tag_clear:
                decode_mem(in.ops[0]);
                break;
              case IntrinsicKind::taint_load:
                d.r0 = static_cast<int8_t>(in.ops[0].reg);
                decode_mem(in.ops[1]);
                d.imm0 = in.ops[2].imm;  // allowlisted
                break;
              case IntrinsicKind::tag_store:
                d.r0 = static_cast<int8_t>(in.ops[0].reg);
                decode_mem(in.ops[1]);
                break;
              case IntrinsicKind::tag_alu:
              case IntrinsicKind::tag_mov:
              case IntrinsicKind::tag_cmp:
                d.r0 = static_cast<int8_t>(in.ops[0].reg);
                decode_src(in.ops[1]);
                break;
              case IntrinsicKind::mode_redirect:
                d.target = resolve(in.ops[0].label);
                break;
              case IntrinsicKind::escape_check:
                if (!in.ops.empty()) d.r0 = static_cast<int8_t>(in.ops[0].reg);
                break;
              case IntrinsicKind::guard:
                d.imm0 = in.ops[0].imm;
                d.imm1 = in.ops[1].imm;
                break;
              default:
                break;
            }
            break;
          default:
            break;
        }
        insns.push_back(d);
      }
      blocks.push_back(eb);
    }
  }

  // Blocks must be searchable by address; trampolines live out of line.
  std::vector<uint32_t> order(blocks.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<uint32_t>(i);
  std::sort(order.begin(), order.end(),
            [&](uint32_t a, uint32_t b) { return blocks[a].start < blocks[b].start; });
  std::vector<ExecBlock> sorted;
  sorted.reserve(blocks.size());
  std::vector<uint32_t> new_ix(blocks.size());
  for (uint32_t i : order) {
    new_ix[i] = static_cast<uint32_t>(sorted.size());
    sorted.push_back(blocks[i]);
  }
  for (auto& d : insns) d.block_ix = new_ix[d.block_ix];
  blocks = std::move(sorted);

  for (const auto& br : p.branches) {
    DecodedBranch db;
    db.cond = br.cond;
    db.site = br.site;
    db.taken = p.symbol_addr(br.taken_label);
    db.fall = p.symbol_addr(br.fall_label);
    db.tramp = br.tramp_label.empty() ? 0 : p.symbol_addr(br.tramp_label);
    branches.push_back(db);
  }

  for (const auto& e : p.externs) {
    auto b = builtin_from_name(e.binding);
    if (!b) throw std::runtime_error("unknown extern binding: " + e.binding);
    extern_bindings[e.addr] = *b;
  }

  for (const auto& d : p.data) {
    std::vector<uint8_t> bytes = d.bytes;
    for (const auto& [off, label] : d.label_words) {
      uint32_t v = p.symbol_addr(label);
      for (int k = 0; k < 4; ++k) bytes[off + k] = static_cast<uint8_t>(v >> (8 * k));
    }
    if (!bytes.empty()) data_init.emplace_back(d.addr, std::move(bytes));
  }

  auto entry = p.try_symbol_addr(p.entry);
  if (!entry) throw std::runtime_error("program has no entry symbol '" + p.entry + "'");
  entry_pc = *entry;

  if (p.meta.harness_mode && !p.meta.user_global.empty())
    user_global_addr = p.symbol_addr(p.meta.user_global);
}

const ExecBlock* ExecImage::block_of(uint32_t addr) const {
  auto it = std::upper_bound(blocks.begin(), blocks.end(), addr,
                             [](uint32_t a, const ExecBlock& b) { return a < b.start; });
  if (it == blocks.begin()) return nullptr;
  --it;
  if (addr >= it->end) return nullptr;
  return &*it;
}

const DecodedInsn* ExecImage::at(uint32_t addr) const {
  const ExecBlock* b = block_of(addr);
  if (!b || (addr - b->start) % layout::kInsnStride != 0) return nullptr;
  return &insns[b->first + (addr - b->start) / layout::kInsnStride];
}

bool ExecImage::marker_at(uint32_t addr) const {
  const DecodedInsn* in = at(addr);
  return in && in->op == Opcode::marker_nop;
}

bool ExecImage::flagged_block_start(uint32_t addr) const {
  const ExecBlock* b = block_of(addr);
  return b && b->start == addr && b->indirect_target;
}

// --- External-call models --------------------------------------------------------

ExtCallOutcome run_builtin(BuiltinExt which, ExtCallState& st) {
  ExtCallOutcome out;
  auto& r = st.regs;
  switch (which) {
    case BuiltinExt::read_input: {
      uint32_t dst = r[0];
      uint32_t want = r[1];
      if (want > 1u << 20) want = 1u << 20;
      uint32_t avail = static_cast<uint32_t>(st.input.size() - st.input_cursor);
      uint32_t n = std::min(want, avail);
      if (n > 0) {
        if (!layout::in_user_data(dst) || !layout::in_user_data(dst + n - 1)) {
          out.fault = "read_input: destination outside user memory";
          return out;
        }
        for (uint32_t i = 0; i < n; ++i)
          st.mem.store8(dst + i, st.input[st.input_cursor + i]);
        if (st.taint_user) taint_union(st.mem, dst, n, tag::kUser, nullptr);
      }
      st.input_cursor += n;
      if (n < want && st.input_short) *st.input_short = true;
      r[0] = n;
      break;
    }
    case BuiltinExt::write_output: {
      uint32_t src = r[0];
      uint32_t len = std::min<uint32_t>(r[1], 1u << 16);
      if (len > 0 && (!layout::in_user_data(src) || !layout::in_user_data(src + len - 1))) {
        out.fault = "write_output: source outside user memory";
        return out;
      }
      if (st.output)
        for (uint32_t i = 0; i < len; ++i) st.output->push_back(st.mem.load8(src + i));
      break;
    }
    case BuiltinExt::malloc_fn: {
      uint32_t size = r[0];
      uint32_t rounded = std::max<uint32_t>(8, (size + 7u) & ~7u);
      uint32_t base = st.heap_bump + layout::kRedZoneBytes;
      if (base + rounded + layout::kRedZoneBytes >= layout::kHeapEnd) {
        out.fault = "malloc: heap exhausted";
        return out;
      }
      unpoison_range(st.mem, base, rounded, nullptr);
      st.allocations[base] = rounded;
      st.heap_bump = base + rounded;
      r[0] = base;
      break;
    }
    case BuiltinExt::free_fn: {
      auto it = st.allocations.find(r[0]);
      if (it == st.allocations.end()) {
        out.fault = "free: address was never allocated";
        return out;
      }
      poison_range(st.mem, it->first, it->second, nullptr);
      st.allocations.erase(it);
      break;
    }
    case BuiltinExt::exit_fn:
      out.halted = true;
      out.exit_code = r[0];
      break;
  }
  return out;
}

// --- Vm ---------------------------------------------------------------------------

namespace {

struct VmFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Snapshot {
  MemoryStore mem;
  std::array<uint32_t, kNumRegs> regs;
  Flags flags;
  std::array<TagSet, kNumRegs> reg_tags;
  TagSet flags_tag;
  uint32_t pc;
};

}  // namespace

struct Vm::Impl {
  const ExecImage& img;
  const ProgramMeta& meta;
  RunConfig cfg;

  // architectural + policy state
  MemoryStore mem;
  std::array<uint32_t, kNumRegs> regs{};
  Flags flags;
  std::array<TagSet, kNumRegs> reg_tags{};
  TagSet flags_tag = 0;
  uint32_t pc = 0;

  // simulation machinery
  std::vector<Checkpoint> simstack;
  std::vector<MemLogEntry> mem_log;
  TagLog tag_log;
  std::vector<uint32_t> cov_buffer;
  uint64_t episode_originals = 0;
  int episode_max_depth = 0;
  std::unique_ptr<Snapshot> snapshot;

  // run context
  std::span<const uint8_t> input;
  size_t input_cursor = 0;
  bool input_short = false;
  uint32_t heap_bump = layout::kHeapBase;
  std::map<uint32_t, uint32_t> allocations;
  BranchStatsTable stats;
  std::map<int, uint64_t> stat_deltas;

  RunResult res;
  ReportStore run_reports;
  std::map<std::pair<SiteRef, uint8_t>, AsanEvent> violations;

  int rob_budget;
  int max_depth;
  int full_runs;
  bool kasper;
  bool massage_enabled;
  bool taint_sources;

  Impl(const ExecImage& image, const RunConfig& config, const BranchStatsTable* session)
      : img(image), meta(image.meta()), cfg(config), stats(session ? *session : BranchStatsTable{}) {
    rob_budget = cfg.rob_budget.value_or(meta.rob_budget);
    max_depth = cfg.max_nest_depth.value_or(meta.max_nest_depth);
    full_runs = meta.full_depth_runs;
    kasper = meta.policy == Policy::kasper;
    massage_enabled = kasper && !meta.harness_mode;
    taint_sources = kasper && meta.mode != InstrMode::none && !meta.harness_mode;
  }

  bool simulating() const { return !simstack.empty(); }

  uint32_t src_value(const DecodedInsn& in) const {
    switch (in.src_kind) {
      case 1: return regs[in.r1];
      case 2: return static_cast<uint32_t>(in.imm0);
      case 3: return in.target;
      default: return 0;
    }
  }
  TagSet src_tag(const DecodedInsn& in) const {
    return in.src_kind == 1 ? reg_tags[in.r1] : 0;
  }
  uint32_t mem_addr(const DecodedInsn& in) const {
    return regs[in.mem_base] + static_cast<uint32_t>(in.mem_disp);
  }

  static bool range_in(uint32_t addr, uint32_t w, bool (*pred)(uint32_t)) {
    return pred(addr) && pred(addr + w - 1);
  }

  uint32_t checked_load(uint32_t addr, uint8_t w) {
    if (range_in(addr, w, layout::in_user_data)) return arch_load_value(addr, w);
    if (range_in(addr, w, layout::in_code)) return 0;  // code reads have no defined content
    throw VmFault("load access violation at 0x" + hex(addr));
  }

  // Loads from poisoned heap bytes (red zones, unallocated heap) read as zero;
  // the leaked value's content is carried by tags, not data.
  uint32_t arch_load_value(uint32_t addr, uint8_t w) const {
    if (layout::in_heap(addr) && poison_at(mem, addr, w) != layout::kShadowOk) return 0;
    return mem.load(addr, w);
  }

  void checked_store(uint32_t addr, uint32_t value, uint8_t w) {
    if (!range_in(addr, w, layout::in_user_data))
      throw VmFault("store access violation at 0x" + hex(addr));
    if (simulating() && meta.mode == InstrMode::none)
      throw InvariantViolation("store during simulation without memory log");
    mem.store(addr, value, w);
  }

  static std::string hex(uint32_t v) {
    char buf[12];
    std::snprintf(buf, sizeof(buf), "%08x", v);
    return buf;
  }

  SiteRef site_of(const DecodedInsn& in) const {
    return in.site_ix >= 0 ? img.sites[in.site_ix].ref : SiteRef{};
  }

  // Values in the code ranges are layout-dependent (labels move when code is
  // inserted), so traces fold them to a fixed token. Wrong code pointers still
  // surface through the site sequence and data addresses.
  static uint64_t trace_value(uint32_t v) {
    if (layout::in_code(v) || layout::in_extern(v)) return 0xC0DE'0000'0000'0000ull;
    return v;
  }

  std::vector<int> current_chain() const {
    std::vector<int> chain;
    chain.reserve(simstack.size());
    for (const auto& ck : simstack) chain.push_back(ck.branch_id);
    return chain;
  }

  void emit_report(GadgetClass cls, int site_ix, uint32_t addr = 0, uint8_t w = 0) {
    GadgetReport r;
    r.policy = meta.policy;
    r.cls = cls;
    if (site_ix >= 0) {
      const SiteInfo& info = img.sites[site_ix];
      r.site = info.ref;
      r.resolved_pc = info.addr;
      r.symbol = info.symbol;
    }
    r.chain = current_chain();
    r.depth = static_cast<int>(simstack.size());
    r.episode_originals = static_cast<uint32_t>(episode_originals);
    r.access_addr = addr;
    r.access_width = w;
    r.input_hash = res.input_hash;
    run_reports.add(r);
  }

  void record_violation(const SiteRef& site, uint8_t shadow_byte, uint32_t addr, uint8_t w) {
    auto key = std::make_pair(site, shadow_byte);
    auto it = violations.find(key);
    if (it == violations.end())
      violations.emplace(key, AsanEvent{site, shadow_byte, addr, w, 1});
    else
      it->second.count++;
  }

  // --- simulation entry/exit ---

  void take_snapshot() {
    snapshot = std::make_unique<Snapshot>();
    snapshot->mem.copy_from(mem);
    snapshot->regs = regs;
    snapshot->flags = flags;
    snapshot->reg_tags = reg_tags;
    snapshot->flags_tag = flags_tag;
    snapshot->pc = simstack.front().pc;
  }

  void check_snapshot() {
    if (!snapshot) return;
    std::string diff;
    if (!snapshot->mem.equals(mem, &diff))
      throw InvariantViolation("rollback snapshot: " + diff);
    if (snapshot->regs != regs) throw InvariantViolation("rollback snapshot: registers differ");
    if (!(snapshot->flags == flags)) throw InvariantViolation("rollback snapshot: flags differ");
    if (snapshot->reg_tags != reg_tags)
      throw InvariantViolation("rollback snapshot: register tags differ");
    if (snapshot->flags_tag != flags_tag)
      throw InvariantViolation("rollback snapshot: flags tag differs");
    if (snapshot->pc != pc) throw InvariantViolation("rollback snapshot: pc differs");
    snapshot.reset();
  }

  void push_checkpoint(int branch_id, uint32_t resume_pc) {
    Checkpoint ck;
    ck.regs = regs;
    ck.flags = flags;
    ck.reg_tags = reg_tags;
    ck.flags_tag = flags_tag;
    ck.pc = resume_pc;
    ck.branch_id = branch_id;
    ck.mem_watermark = mem_log.size();
    ck.tag_watermark = tag_log.size();
    ck.cov_watermark = cov_buffer.size();
    ck.originals_at_entry = episode_originals;
    ck.depth = static_cast<int>(simstack.size()) + 1;
    simstack.push_back(std::move(ck));
    episode_max_depth = std::max(episode_max_depth, static_cast<int>(simstack.size()));
  }

  // Full rollback to the depth-0 checkpoint; nested checkpoints unwind with it.
  uint32_t rollback_all(bool budget, RollbackReason reason) {
    const Checkpoint& ck = simstack.front();
    for (size_t i = mem_log.size(); i-- > ck.mem_watermark;) {
      const MemLogEntry& e = mem_log[i];
      for (int b = 0; b < e.width; ++b) mem.store8(e.addr + b, e.old[b]);
    }
    mem_log.resize(ck.mem_watermark);
    for (size_t i = tag_log.size(); i-- > ck.tag_watermark;)
      mem.store8(tag_log[i].addr, tag_log[i].old_byte);
    tag_log.resize(ck.tag_watermark);

    // Speculative coverage is flushed lazily, right before the rollback.
    for (size_t i = ck.cov_watermark; i < cov_buffer.size(); ++i)
      res.coverage.spec.insert(cov_buffer[i]);
    cov_buffer.resize(ck.cov_watermark);

    regs = ck.regs;
    flags = ck.flags;
    reg_tags = ck.reg_tags;
    flags_tag = ck.flags_tag;
    uint32_t resume = ck.pc;
    pc = resume;

    res.episodes.episodes++;
    if (budget)
      res.episodes.budget_ends++;
    else
      res.episodes.forced[static_cast<size_t>(reason)]++;
    size_t d = std::min<size_t>(episode_max_depth, res.episodes.depth_histogram.size() - 1);
    res.episodes.depth_histogram[d]++;
    res.episodes.max_episode_originals =
        std::max(res.episodes.max_episode_originals, episode_originals);

    simstack.clear();
    if (cfg.debug_snapshots) check_snapshot();
    episode_originals = 0;
    episode_max_depth = 0;
    return resume;
  }

  TagLog* sim_tag_log() { return simulating() ? &tag_log : nullptr; }

  TagSet mem_tag_of(uint32_t addr, uint8_t w) {
    return range_in(addr, w, layout::in_user_data) ? taint_get(mem, addr, w) : 0;
  }

  void tag_write(uint32_t addr, uint8_t w, TagSet t) {
    if (range_in(addr, w, layout::in_user_data)) taint_assign(mem, addr, w, t, sim_tag_log());
  }

  // --- the interpreter ---

  RunResult run(std::span<const uint8_t> in_bytes);
  uint32_t exec(const DecodedInsn& in, uint32_t pc_now);
  uint32_t exec_intrinsic(const DecodedInsn& in, uint32_t pc_now);
  void run_block_summary(const DecodedInsn& self, uint32_t pc_now);
  ExtCallOutcome call_builtin(BuiltinExt which) {
    ExtCallState st{mem,       regs,        input,  input_cursor, taint_sources,
                    heap_bump, allocations, &res.output, &input_short};
    return run_builtin(which, st);
  }
};

uint32_t Vm::Impl::exec_intrinsic(const DecodedInsn& in, uint32_t pc_now) {
  uint32_t next = pc_now + layout::kInsnStride;
  switch (in.intr) {
    case IntrinsicKind::guard: {
      res.counters.guard_checks++;
      bool match = in.imm0 == 2 || (in.imm0 == 1) == simulating();
      if (!match) next = pc_now + layout::kInsnStride * (1 + in.imm1);
      break;
    }
    case IntrinsicKind::mode_redirect:
      res.counters.guard_checks++;
      if (simulating()) next = in.target;
      break;
    case IntrinsicKind::start_sim: {
      int id = in.imm0;
      BranchStat& s = stats.bump(id, max_depth);
      stat_deltas[id]++;
      const DecodedBranch& br = img.branches[id];
      uint32_t resume = pc_now + layout::kInsnStride;  // the conditional branch itself
      uint32_t flip = br.tramp ? br.tramp
                               : (cond_holds(br.cond, flags) ? br.fall : br.taken);
      if (!simulating()) {
        push_checkpoint(id, resume);
        episode_originals = 0;
        episode_max_depth = 1;
        if (cfg.debug_snapshots) take_snapshot();
        next = flip;
      } else if (nesting_decision(s, static_cast<int>(simstack.size()), max_depth, full_runs)) {
        push_checkpoint(id, resume);
        next = flip;
      }
      break;
    }
    case IntrinsicKind::check_restore:
      if (simulating() && episode_originals >= static_cast<uint64_t>(rob_budget))
        next = rollback_all(true, RollbackReason::fault);
      break;
    case IntrinsicKind::rollback:
      if (simulating())
        next = rollback_all(false, static_cast<RollbackReason>(in.imm0));
      break;
    case IntrinsicKind::mem_log:
      if (simulating()) {
        MemLogEntry e;
        e.addr = mem_addr(in);
        e.width = in.width;
        for (int b = 0; b < in.width; ++b) e.old[b] = mem.load8(e.addr + b);
        mem_log.push_back(e);
      }
      break;
    case IntrinsicKind::asan_check: {
      uint32_t addr = mem_addr(in);
      uint8_t v = poison_at(mem, addr, in.width);
      if (v != layout::kShadowOk) {
        record_violation(site_of(in), v, addr, in.width);
        if (!kasper && simulating()) emit_report(GadgetClass::sf_oob, in.site_ix, addr, in.width);
      }
      break;
    }
    case IntrinsicKind::taint_load: {
      uint32_t addr = mem_addr(in);
      TagSet value = mem_tag_of(addr, in.width);
      if (simulating()) {
        TagSet addr_tag = reg_tags[in.mem_base];
        AddrUseResult au = kasper_on_addr_use(addr_tag);
        if (au.user_cache) emit_report(GadgetClass::user_cache, in.site_ix, addr, in.width);
        if (au.massage_cache) emit_report(GadgetClass::massage_cache, in.site_ix, addr, in.width);
        bool oob = in.imm0 == 0 && poison_at(mem, addr, in.width) != layout::kShadowOk;
        LoadSinkResult r = kasper_on_load({addr_tag, value, oob, massage_enabled});
        if (r.user_mds) emit_report(GadgetClass::user_mds, in.site_ix, addr, in.width);
        if (r.massage_mds) emit_report(GadgetClass::massage_mds, in.site_ix, addr, in.width);
        value = r.value_tag;
      }
      reg_tags[in.r0] = value;
      break;
    }
    case IntrinsicKind::tag_store: {
      uint32_t addr = mem_addr(in);
      if (simulating()) {
        AddrUseResult au = kasper_on_addr_use(reg_tags[in.mem_base]);
        if (au.user_cache) emit_report(GadgetClass::user_cache, in.site_ix, addr, in.width);
        if (au.massage_cache) emit_report(GadgetClass::massage_cache, in.site_ix, addr, in.width);
      }
      tag_write(addr, in.width, reg_tags[in.r0]);
      break;
    }
    case IntrinsicKind::tag_clear:
      tag_write(mem_addr(in), in.width, 0);
      break;
    case IntrinsicKind::tag_alu:
      reg_tags[in.r0] |= src_tag(in);
      break;
    case IntrinsicKind::tag_mov:
      reg_tags[in.r0] = src_tag(in);
      break;
    case IntrinsicKind::tag_cmp:
      flags_tag = reg_tags[in.r0] | src_tag(in);
      break;
    case IntrinsicKind::port_check:
      if (simulating()) {
        BranchSinkResult br = kasper_on_branch(flags_tag);
        if (br.user_port) emit_report(GadgetClass::user_port, in.site_ix);
        if (br.massage_port) emit_report(GadgetClass::massage_port, in.site_ix);
      }
      break;
    case IntrinsicKind::tag_block:
      run_block_summary(in, pc_now);
      break;
    case IntrinsicKind::cov_branch:
      if (!simulating()) {
        const DecodedBranch& br = img.branches[in.imm0];
        uint32_t elem = (static_cast<uint32_t>(in.imm0) << 1) |
                        (cond_holds(br.cond, flags) ? 1u : 0u);
        res.coverage.normal.insert(elem);
      }
      break;
    case IntrinsicKind::cov_spec:
      if (simulating()) {
        if (cfg.eager_coverage)
          res.coverage.spec.insert(static_cast<uint32_t>(in.imm0));
        else
          cov_buffer.push_back(static_cast<uint32_t>(in.imm0));
      }
      break;
    case IntrinsicKind::frame_poison:
      if (layout::in_user_data(regs[kStackReg]))
        poison_ret_slot(mem, regs[kStackReg], sim_tag_log());
      break;
    case IntrinsicKind::frame_unpoison:
      if (layout::in_user_data(regs[kStackReg]))
        unpoison_range(mem, regs[kStackReg], 4, sim_tag_log());
      break;
    case IntrinsicKind::escape_check: {
      if (!simulating()) break;
      uint32_t target = in.r0 >= 0 ? regs[in.r0] : mem.load(regs[kStackReg], 4);
      bool ok;
      if (meta.mode == InstrMode::shadows) {
        ok = layout::in_shadow_copy(target) ||
             (layout::in_real_copy(target) && img.marker_at(target));
      } else {
        ok = img.flagged_block_start(target);
      }
      if (!ok) next = rollback_all(false, RollbackReason::indirect_escape);
      break;
    }
  }
  return next;
}

void Vm::Impl::run_block_summary(const DecodedInsn& self, uint32_t pc_now) {
  const ExecBlock& blk = img.blocks[self.block_ix];
  uint32_t ix = blk.first + (pc_now - blk.start) / layout::kInsnStride + 1;
  std::array<uint32_t, kNumRegs> vr = regs;
  std::vector<std::pair<uint32_t, uint8_t>> buffer;  // forwarded store bytes

  auto vload8 = [&](uint32_t a) -> uint8_t {
    for (size_t i = buffer.size(); i-- > 0;)
      if (buffer[i].first == a) return buffer[i].second;
    return mem.load8(a);
  };
  auto vload = [&](uint32_t a, uint8_t w) {
    uint32_t v = 0;
    for (int i = 0; i < w; ++i) v |= static_cast<uint32_t>(vload8(a + i)) << (8 * i);
    return v;
  };
  auto vstore = [&](uint32_t a, uint32_t v, uint8_t w) {
    for (int i = 0; i < w; ++i)
      buffer.emplace_back(a + i, static_cast<uint8_t>(v >> (8 * i)));
  };
  auto vsrc = [&](const DecodedInsn& in) -> uint32_t {
    switch (in.src_kind) {
      case 1: return vr[in.r1];
      case 2: return static_cast<uint32_t>(in.imm0);
      case 3: return in.target;
      default: return 0;
    }
  };
  auto vsrc_tag = [&](const DecodedInsn& in) -> TagSet {
    return in.src_kind == 1 ? reg_tags[in.r1] : 0;
  };

  for (; ix < blk.first + blk.count; ++ix) {
    const DecodedInsn& in = img.insns[ix];
    if (in.origin != Origin::original) continue;
    uint32_t addr;
    switch (in.op) {
      case Opcode::mov:
        reg_tags[in.r0] = vsrc_tag(in);
        vr[in.r0] = vsrc(in);
        break;
      case Opcode::add:
      case Opcode::sub:
      case Opcode::and_:
      case Opcode::or_:
      case Opcode::xor_:
      case Opcode::shl:
      case Opcode::shr: {
        reg_tags[in.r0] |= vsrc_tag(in);
        uint32_t b = vsrc(in);
        uint32_t a = vr[in.r0];
        switch (in.op) {
          case Opcode::add: a += b; break;
          case Opcode::sub: a -= b; break;
          case Opcode::and_: a &= b; break;
          case Opcode::or_: a |= b; break;
          case Opcode::xor_: a ^= b; break;
          case Opcode::shl: a <<= (b & 31); break;
          default: a >>= (b & 31); break;
        }
        vr[in.r0] = a;
        break;
      }
      case Opcode::cmp:
        flags_tag = reg_tags[in.r0] | vsrc_tag(in);
        break;
      case Opcode::load:
        addr = vr[in.mem_base] + static_cast<uint32_t>(in.mem_disp);
        reg_tags[in.r0] = mem_tag_of(addr, in.width);
        if (!range_in(addr, in.width, layout::in_user_data) ||
            (layout::in_heap(addr) && poison_at(mem, addr, in.width) != layout::kShadowOk))
          vr[in.r0] = 0;
        else
          vr[in.r0] = vload(addr, in.width);
        break;
      case Opcode::store:
        addr = vr[in.mem_base] + static_cast<uint32_t>(in.mem_disp);
        tag_write(addr, in.width, reg_tags[in.r0]);
        vstore(addr, vr[in.r0], in.width);
        break;
      case Opcode::push:
        vr[kStackReg] -= 4;
        tag_write(vr[kStackReg], 4, reg_tags[in.r0]);
        vstore(vr[kStackReg], vr[in.r0], 4);
        break;
      case Opcode::pop:
        reg_tags[in.r0] = mem_tag_of(vr[kStackReg], 4);
        vr[in.r0] = vload(vr[kStackReg], 4);
        vr[kStackReg] += 4;
        break;
      case Opcode::call:
      case Opcode::callr:
        if (in.op == Opcode::call && img.extern_bindings.count(in.target)) return;
        vr[kStackReg] -= 4;
        tag_write(vr[kStackReg], 4, 0);
        return;  // terminator
      case Opcode::ext:
      case Opcode::jmp:
      case Opcode::jcc:
      case Opcode::jmpr:
      case Opcode::ret:
      case Opcode::halt:
        return;  // segment or block end
      default:
        break;
    }
  }
}

uint32_t Vm::Impl::exec(const DecodedInsn& in, uint32_t pc_now) {
  uint32_t next = pc_now + layout::kInsnStride;
  switch (in.op) {
    case Opcode::mov:
      regs[in.r0] = src_value(in);
      break;
    case Opcode::add:
      regs[in.r0] += src_value(in);
      break;
    case Opcode::sub:
      regs[in.r0] -= src_value(in);
      break;
    case Opcode::and_:
      regs[in.r0] &= src_value(in);
      break;
    case Opcode::or_:
      regs[in.r0] |= src_value(in);
      break;
    case Opcode::xor_:
      regs[in.r0] ^= src_value(in);
      break;
    case Opcode::shl:
      regs[in.r0] <<= (src_value(in) & 31);
      break;
    case Opcode::shr:
      regs[in.r0] >>= (src_value(in) & 31);
      break;
    case Opcode::cmp: {
      uint32_t a = regs[in.r0];
      uint32_t b = src_value(in);
      flags.z = a == b;
      flags.n = static_cast<int32_t>(a) < static_cast<int32_t>(b);
      flags.c = a < b;
      break;
    }
    case Opcode::load:
      regs[in.r0] = checked_load(mem_addr(in), in.width);
      break;
    case Opcode::store:
      checked_store(mem_addr(in), regs[in.r0], in.width);
      break;
    case Opcode::push:
      regs[kStackReg] -= 4;
      checked_store(regs[kStackReg], regs[in.r0], 4);
      break;
    case Opcode::pop:
      regs[in.r0] = checked_load(regs[kStackReg], 4);
      regs[kStackReg] += 4;
      break;
    case Opcode::jmp:
      next = in.target;
      break;
    case Opcode::jcc:
      if (cond_holds(in.cond, flags)) next = in.target;
      break;
    case Opcode::jmpr:
      next = regs[in.r0];
      if (!simulating()) res.observed_indirect.insert(next);
      break;
    case Opcode::call:
    case Opcode::callr: {
      uint32_t target = in.op == Opcode::call ? in.target : regs[in.r0];
      auto ext = img.extern_bindings.find(target);
      if (ext != img.extern_bindings.end()) {
        if (simulating()) {
          next = rollback_all(false, RollbackReason::external_call);
          break;
        }
        ExtCallOutcome out = call_builtin(ext->second);
        if (!out.fault.empty()) throw VmFault(out.fault);
        if (out.halted) {
          res.exit_code = out.exit_code;
          res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
          next = 0;
        }
        break;
      }
      regs[kStackReg] -= 4;
      checked_store(regs[kStackReg], pc_now + layout::kInsnStride, 4);
      next = target;
      if (in.op == Opcode::callr && !simulating()) res.observed_indirect.insert(next);
      break;
    }
    case Opcode::ret:
      next = checked_load(regs[kStackReg], 4);
      regs[kStackReg] += 4;
      if (!simulating()) res.observed_indirect.insert(next);
      break;
    case Opcode::ext: {
      if (simulating()) {
        next = rollback_all(false, RollbackReason::external_call);
        break;
      }
      ExtCallOutcome out = call_builtin(static_cast<BuiltinExt>(in.ext));
      if (!out.fault.empty()) throw VmFault(out.fault);
      if (out.halted) {
        res.exit_code = out.exit_code;
        res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
        next = 0;  // caller stops via status
      }
      break;
    }
    case Opcode::fence:
    case Opcode::nop:
    case Opcode::marker_nop:
      break;
    case Opcode::halt:
      if (simulating()) {
        next = rollback_all(false, RollbackReason::serialize);
        break;
      }
      res.exit_code = regs[0];
      res.status = input_short ? ExitStatus::input_exhausted : ExitStatus::halted;
      next = 0;
      break;
    case Opcode::intrinsic:
      next = exec_intrinsic(in, pc_now);
      break;
  }
  return next;
}

RunResult Vm::Impl::run(std::span<const uint8_t> in_bytes) {
  verify_shadow_layout();
  input = in_bytes;
  res.input_hash = fnv1a64(in_bytes.data(), in_bytes.size());
  regs.fill(0);
  regs[kStackReg] = layout::kStackTop;
  for (const auto& [addr, bytes] : img.data_init)
    for (size_t i = 0; i < bytes.size(); ++i) mem.store8(addr + static_cast<uint32_t>(i), bytes[i]);

  if (meta.harness_mode && img.user_global_addr) {
    uint32_t k = meta.user_global_bytes;
    for (uint32_t i = 0; i < k && i < in_bytes.size(); ++i)
      mem.store8(img.user_global_addr + i, in_bytes[i]);
    if (kasper && k > 0) taint_union(mem, img.user_global_addr, k, tag::kUser, nullptr);
  }

  pc = img.entry_pc;
  const ExecBlock* cur_blk = nullptr;
  while (true) {
    if (res.counters.originals >= cfg.max_steps) {
      if (simulating()) rollback_all(false, RollbackReason::fault);
      res.status = ExitStatus::limit_exceeded;
      break;
    }
    const DecodedInsn* in;
    if (cur_blk && pc >= cur_blk->start && pc < cur_blk->end) {
      in = &img.insns[cur_blk->first + (pc - cur_blk->start) / layout::kInsnStride];
    } else {
      in = img.at(pc);
      cur_blk = in ? &img.blocks[in->block_ix] : nullptr;
    }
    if (!in) {
      if (simulating()) {
        pc = rollback_all(false, RollbackReason::fault);
        continue;
      }
      res.status = ExitStatus::fault;
      res.fault_message = "decode fault at 0x" + hex(pc);
      break;
    }

    if (simulating() && meta.mode == InstrMode::shadows) {
      const ExecBlock& blk = img.blocks[in->block_ix];
      bool confined = blk.copy == CopyKind::shadow || blk.trampoline ||
                      (blk.marked && in->preamble);
      if (!confined)
        throw InvariantViolation("mode confinement violated at 0x" + hex(pc));
    }

    res.counters.steps++;
    bool original = in->origin == Origin::original;
    if (original) {
      res.counters.originals++;
      if (simulating()) episode_originals++;
    } else {
      res.counters.instrumentation++;
    }

    bool stopped = false;
    try {
      uint32_t next = exec(*in, pc);
      if (next == 0) {
        stopped = true;  // halt or exit; status already set
      } else {
        pc = next;
      }
    } catch (const VmFault& f) {
      if (simulating()) {
        pc = rollback_all(false, RollbackReason::fault);
        continue;
      }
      res.status = ExitStatus::fault;
      res.fault_message = f.what();
      break;
    }

    if (cfg.record_trace && original && simstack.empty()) {
      uint64_t digest = 0xcbf29ce484222325ull;
      for (int r = 0; r < kNumRegs; ++r) {
        uint64_t v = trace_value(regs[r]);
        digest = fnv1a64(&v, sizeof(v), digest);
      }
      uint8_t fl = static_cast<uint8_t>(flags.z | (flags.n << 1) | (flags.c << 2));
      digest = fnv1a64(&fl, 1, digest);
      if (in->op == Opcode::store || in->op == Opcode::push) {
        uint32_t a = in->op == Opcode::push ? regs[kStackReg] : mem_addr(*in);
        digest = fnv1a64(&a, sizeof(a), digest);
        uint64_t v = trace_value(regs[in->r0]);
        digest = fnv1a64(&v, sizeof(v), digest);
      }
      res.trace.push_back(TraceEntry{site_of(*in), digest});
    }
    if (stopped) break;
  }

  res.final_regs = regs;
  res.final_reg_tags = reg_tags;
  res.final_flags_tag = flags_tag;
  res.reports = run_reports.sorted();
  for (const auto& [k, v] : violations) res.violations.push_back(v);
  for (const auto& [id, n] : stat_deltas) res.branch_entry_deltas.emplace_back(id, n);
  return res;
}

Vm::Vm(const ExecImage& img) : img_(img) {}

RunResult Vm::run(std::span<const uint8_t> input, const RunConfig& cfg,
                  const BranchStatsTable* session_stats) {
  Impl impl(img_, cfg, session_stats);
  return impl.run(input);
}

std::string run_summary_text(const RunResult& r, const ProgramMeta& meta) {
  char buf[128];
  std::string out = "shadowspec-summary v1\n";
  out += std::string("status ") + exit_status_name(r.status) + "\n";
  out += "exit_code " + std::to_string(r.exit_code) + "\n";
  if (!r.fault_message.empty()) out += "fault " + r.fault_message + "\n";
  out += "steps " + std::to_string(r.counters.steps) + "\n";
  out += "originals " + std::to_string(r.counters.originals) + "\n";
  out += "instrumentation " + std::to_string(r.counters.instrumentation) + "\n";
  out += "guard_checks " + std::to_string(r.counters.guard_checks) + "\n";
  int normal_total = 2 * meta.num_branches;
  double normal_pct =
      normal_total ? 100.0 * static_cast<double>(r.coverage.normal.size()) / normal_total : 0.0;
  double spec_pct = meta.num_spec_guards
                        ? 100.0 * static_cast<double>(r.coverage.spec.size()) / meta.num_spec_guards
                        : 0.0;
  std::snprintf(buf, sizeof(buf), "coverage_real %zu/%d %.2f%%\n", r.coverage.normal.size(),
                normal_total, normal_pct);
  out += buf;
  std::snprintf(buf, sizeof(buf), "coverage_shadow %zu/%d %.2f%%\n", r.coverage.spec.size(),
                meta.num_spec_guards, spec_pct);
  out += buf;
  out += "episodes " + std::to_string(r.episodes.episodes) + "\n";
  out += "episode_budget_ends " + std::to_string(r.episodes.budget_ends) + "\n";
  out += "episode_forced";
  for (int i = 0; i < kNumRollbackReasons; ++i) {
    std::snprintf(buf, sizeof(buf), " %s=%llu", rollback_reason_name(static_cast<RollbackReason>(i)),
                  static_cast<unsigned long long>(r.episodes.forced[i]));
    out += buf;
  }
  out += "\ndepth_histogram";
  for (size_t i = 1; i < r.episodes.depth_histogram.size(); ++i)
    if (r.episodes.depth_histogram[i]) {
      std::snprintf(buf, sizeof(buf), " %zu:%llu", i,
                    static_cast<unsigned long long>(r.episodes.depth_histogram[i]));
      out += buf;
    }
  out += "\nmax_episode_originals " + std::to_string(r.episodes.max_episode_originals) + "\n";
  out += "gadget_records " + std::to_string(r.reports.size()) + "\n";
  return out;
}

}  // namespace shadowspec
