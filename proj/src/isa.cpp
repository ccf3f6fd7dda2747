// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/isa.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

namespace shadowspec {

namespace {

struct OpcodeName {
  Opcode op;
  const char* name;
};

constexpr std::array<OpcodeName, 25> kOpcodeNames{{
    {Opcode::mov, "mov"},       {Opcode::add, "add"},
    {Opcode::sub, "sub"},       {Opcode::and_, "and"},
    {Opcode::or_, "or"},        {Opcode::xor_, "xor"},
    {Opcode::shl, "shl"},       {Opcode::shr, "shr"},
    {Opcode::cmp, "cmp"},       {Opcode::load, "load"},
    {Opcode::store, "store"},   {Opcode::jmp, "jmp"},
    {Opcode::jcc, "jcc"},       {Opcode::jmpr, "jmpr"},
    {Opcode::call, "call"},     {Opcode::callr, "callr"},
    {Opcode::ret, "ret"},       {Opcode::push, "push"},
    {Opcode::pop, "pop"},       {Opcode::fence, "fence"},
    {Opcode::ext, "ext"},       {Opcode::marker_nop, "marker_nop"},
    {Opcode::nop, "nop"},       {Opcode::halt, "halt"},
    {Opcode::intrinsic, "intrinsic"},
}};

constexpr std::array<const char*, 6> kCondNames{"z", "nz", "lt", "ge", "ltu", "geu"};

constexpr std::array<const char*, 20> kIntrinsicNames{
    "start_sim",  "check_restore", "rollback",   "mem_log",       "asan_check",
    "taint_load", "tag_store",     "tag_clear",  "tag_alu",       "tag_mov",
    "tag_cmp",    "port_check",    "tag_block",  "cov_branch",    "cov_spec",
    "frame_poison", "frame_unpoison", "mode_redirect", "escape_check", "guard",
};

constexpr std::array<const char*, 4> kReasonNames{"external-call", "serialize", "indirect-escape",
                                                  "fault"};

}  // namespace

bool is_terminator(Opcode op) {
  switch (op) {
    case Opcode::jmp:
    case Opcode::jcc:
    case Opcode::jmpr:
    case Opcode::call:
    case Opcode::callr:
    case Opcode::ret:
    case Opcode::halt:
      return true;
    default:
      return false;
  }
}

TermKind terminator_kind(Opcode op) {
  switch (op) {
    case Opcode::jmp: return TermKind::jmp;
    case Opcode::jcc: return TermKind::jcc;
    case Opcode::jmpr: return TermKind::jmpr;
    case Opcode::call: return TermKind::call;
    case Opcode::callr: return TermKind::callr;
    case Opcode::ret: return TermKind::ret;
    case Opcode::halt: return TermKind::halt;
    default: return TermKind::fallthrough;
  }
}

const char* opcode_name(Opcode op) {
  for (const auto& e : kOpcodeNames)
    if (e.op == op) return e.name;
  return "?";
}

const char* cond_name(Cond c) { return kCondNames[static_cast<size_t>(c)]; }
const char* intrinsic_name(IntrinsicKind k) { return kIntrinsicNames[static_cast<size_t>(k)]; }
const char* rollback_reason_name(RollbackReason r) { return kReasonNames[static_cast<size_t>(r)]; }
const char* policy_name(Policy p) { return p == Policy::kasper ? "kasper" : "specfuzz"; }

const char* mode_name(InstrMode m) {
  switch (m) {
    case InstrMode::none: return "none";
    case InstrMode::shadows: return "shadows";
    case InstrMode::mixed: return "mixed";
  }
  return "?";
}

std::optional<Opcode> opcode_from_name(const std::string& s) {
  for (const auto& e : kOpcodeNames)
    if (s == e.name) return e.op;
  return std::nullopt;
}

std::optional<Cond> cond_from_name(const std::string& s) {
  for (size_t i = 0; i < kCondNames.size(); ++i)
    if (s == kCondNames[i]) return static_cast<Cond>(i);
  return std::nullopt;
}

std::optional<IntrinsicKind> intrinsic_from_name(const std::string& s) {
  for (size_t i = 0; i < kIntrinsicNames.size(); ++i)
    if (s == kIntrinsicNames[i]) return static_cast<IntrinsicKind>(i);
  return std::nullopt;
}

std::optional<Policy> policy_from_name(const std::string& s) {
  if (s == "kasper") return Policy::kasper;
  if (s == "specfuzz") return Policy::specfuzz;
  return std::nullopt;
}

std::optional<InstrMode> mode_from_name(const std::string& s) {
  if (s == "none") return InstrMode::none;
  if (s == "shadows") return InstrMode::shadows;
  if (s == "mixed") return InstrMode::mixed;
  return std::nullopt;
}

bool is_builtin_external(const std::string& name) {
  return name == "read_input" || name == "write_output" || name == "malloc" || name == "free" ||
         name == "exit";
}

bool cond_holds(Cond c, const Flags& f) {
  switch (c) {
    case Cond::z: return f.z;
    case Cond::nz: return !f.z;
    case Cond::lt: return f.n;
    case Cond::ge: return !f.n;
    case Cond::ltu: return f.c;
    case Cond::geu: return !f.c;
  }
  return false;
}

Function* Program::find_function(const std::string& name) {
  for (auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}

const Function* Program::find_function(const std::string& name) const {
  return const_cast<Program*>(this)->find_function(name);
}

BasicBlock* Program::find_block(const std::string& label) {
  for (auto& f : functions)
    for (auto& b : f.blocks)
      if (b.label == label) return &b;
  return nullptr;
}

const BasicBlock* Program::find_block(const std::string& label) const {
  return const_cast<Program*>(this)->find_block(label);
}

const BranchInfo* Program::branch_by_id(int id) const {
  for (const auto& b : branches)
    if (b.id == id) return &b;
  return nullptr;
}

uint32_t Program::symbol_addr(const std::string& name) const {
  auto it = symbols.find(name);
  if (it == symbols.end()) throw std::runtime_error("unknown symbol: " + name);
  return it->second;
}

std::optional<uint32_t> Program::try_symbol_addr(const std::string& name) const {
  auto it = symbols.find(name);
  if (it == symbols.end()) return std::nullopt;
  return it->second;
}

void Program::finalize() {
  symbols.clear();
  auto define = [this](const std::string& name, uint32_t addr) {
    auto [it, inserted] = symbols.emplace(name, addr);
    if (!inserted) throw std::runtime_error("duplicate symbol: " + name);
  };

  uint32_t ext_cursor = layout::kExternBase;
  for (auto& e : externs) {
    e.addr = ext_cursor;
    ext_cursor += 16;
    define(e.name, e.addr);
  }

  uint32_t real_cursor = layout::kRealCodeBase;
  uint32_t shadow_cursor = layout::kShadowCodeBase;
  uint32_t tramp_cursor = layout::kTrampolineBase;
  max_block_originals = 0;
  for (auto& fn : functions) {
    for (auto& b : fn.blocks) {
      uint32_t size = static_cast<uint32_t>(b.insns.size()) * layout::kInsnStride;
      uint32_t* cursor = b.is_trampoline ? &tramp_cursor
                         : fn.copy == CopyKind::real ? &real_cursor
                                                     : &shadow_cursor;
      b.addr = *cursor;
      *cursor += size;
      if (*cursor > (b.is_trampoline || fn.copy == CopyKind::shadow ? layout::kShadowCodeEnd
                                                                    : layout::kRealCodeEnd))
        throw std::runtime_error("code address overflow in block " + b.label);
      if (b.is_trampoline && tramp_cursor > layout::kShadowCodeEnd)
        throw std::runtime_error("trampoline address overflow");
      define(b.label, b.addr);
      max_block_originals = std::max(max_block_originals, b.original_count());
    }
    // The function name aliases its entry block unless they coincide.
    if (!fn.blocks.empty() && fn.blocks.front().label != fn.name)
      define(fn.name, fn.blocks.front().addr);
  }

  uint32_t data_cursor = layout::kGlobalBase;
  for (auto& d : data) {
    d.addr = data_cursor;
    data_cursor += (d.size + 7u) & ~7u;
    if (data_cursor > layout::kGlobalEnd) throw std::runtime_error("data address overflow");
    define(d.name, d.addr);
  }

  finalized = true;
}

void Program::stamp_sites() {
  for (auto& fn : functions) {
    if (fn.copy != CopyKind::real) continue;
    for (auto& b : fn.blocks) {
      int ord = 0;
      for (auto& in : b.insns) {
        if (in.origin == Origin::original) in.site = SiteRef{b.label, ord++};
      }
    }
  }
}

std::optional<uint32_t> Program::site_addr(const SiteRef& site) const {
  const BasicBlock* b = find_block(site.block);
  if (!b) return std::nullopt;
  int ord = 0;
  for (size_t i = 0; i < b->insns.size(); ++i) {
    if (b->insns[i].origin != Origin::original) continue;
    if (ord == site.ordinal) return b->addr + static_cast<uint32_t>(i) * layout::kInsnStride;
    ++ord;
  }
  return std::nullopt;
}

std::string Program::symbolize(uint32_t addr) const {
  const Function* best = nullptr;
  uint32_t best_base = 0;
  for (const auto& fn : functions) {
    if (fn.blocks.empty()) continue;
    uint32_t base = fn.blocks.front().addr;
    for (const auto& b : fn.blocks) {
      if (addr >= b.addr && addr < b.addr + b.insns.size() * layout::kInsnStride) {
        if (!best || base > best_base) {
          best = &fn;
          best_base = base;
        }
      }
    }
  }
  char buf[64];
  if (best) {
    std::snprintf(buf, sizeof(buf), "%s+0x%x", best->name.c_str(), addr - best_base);
  } else {
    std::snprintf(buf, sizeof(buf), "0x%08x", addr);
  }
  return buf;
}

int Program::count_instructions(Origin origin) const {
  int n = 0;
  for (const auto& fn : functions)
    for (const auto& b : fn.blocks)
      for (const auto& in : b.insns) n += in.origin == origin;
  return n;
}

}  // namespace shadowspec
