// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace shadowspec {

// Address space layout. Real and shadow code occupy disjoint contiguous
// ranges so copy-membership tests are plain range compares. The tag shadow
// is the user address with bit 30 flipped; the poison shadow maps 8:1.
namespace layout {
constexpr uint32_t kExternBase = 0x0000'1000;
constexpr uint32_t kExternEnd = 0x0001'0000;
constexpr uint32_t kRealCodeBase = 0x0001'0000;
constexpr uint32_t kRealCodeEnd = 0x0100'0000;
constexpr uint32_t kShadowCodeBase = 0x0100'0000;
constexpr uint32_t kTrampolineBase = 0x0180'0000;
constexpr uint32_t kShadowCodeEnd = 0x0200'0000;
constexpr uint32_t kGlobalBase = 0x0200'0000;
constexpr uint32_t kGlobalEnd = 0x0300'0000;
constexpr uint32_t kHeapBase = 0x0300'0000;
constexpr uint32_t kHeapEnd = 0x0400'0000;
constexpr uint32_t kStackBase = 0x6000'0000;
constexpr uint32_t kStackEnd = 0x7000'0000;
constexpr uint32_t kStackTop = 0x6FFF'FFF0;
constexpr uint32_t kAsanShadowBase = 0x8000'0000;
constexpr uint32_t kTagFlipBit = 0x4000'0000;

constexpr uint32_t asan_shadow(uint32_t addr) { return (addr >> 3) + kAsanShadowBase; }
constexpr uint32_t tag_shadow(uint32_t addr) { return addr ^ kTagFlipBit; }

constexpr bool in_extern(uint32_t a) { return a >= kExternBase && a < kExternEnd; }
constexpr bool in_real_copy(uint32_t a) { return a >= kRealCodeBase && a < kRealCodeEnd; }
constexpr bool in_shadow_copy(uint32_t a) { return a >= kShadowCodeBase && a < kShadowCodeEnd; }
constexpr bool in_code(uint32_t a) { return a >= kRealCodeBase && a < kShadowCodeEnd; }
constexpr bool in_global(uint32_t a) { return a >= kGlobalBase && a < kGlobalEnd; }
constexpr bool in_heap(uint32_t a) { return a >= kHeapBase && a < kHeapEnd; }
constexpr bool in_stack(uint32_t a) { return a >= kStackBase && a < kStackEnd; }
// Regions a program load/store may touch.
constexpr bool in_user_data(uint32_t a) { return in_global(a) || in_heap(a) || in_stack(a); }

// Poison shadow byte values.
constexpr uint8_t kShadowOk = 0x00;
constexpr uint8_t kShadowRedZone = 0xFF;
constexpr uint8_t kShadowRetSlot = 0xFE;

constexpr uint32_t kRedZoneBytes = 16;
constexpr uint32_t kInsnStride = 4;  // every instruction occupies one 4-byte slot
}  // namespace layout

constexpr int kNumRegs = 16;
constexpr int kStackReg = 15;  // rsp analog; +const accesses are ASan-allowlisted

enum class Opcode : uint8_t {
  mov, add, sub, and_, or_, xor_, shl, shr, cmp,
  load, store,
  jmp, jcc, jmpr, call, callr, ret,
  push, pop,
  fence, ext, marker_nop, nop, halt, intrinsic,
};

enum class Cond : uint8_t { z, nz, lt, ge, ltu, geu };

enum class Origin : uint8_t { original, instrumentation };

enum class IntrinsicKind : uint8_t {
  start_sim,       // #branch_id: checkpoint + enter trampoline (or flip inline in mixed mode)
  check_restore,   // conditional restore point (instruction budget)
  rollback,        // #reason: unconditional restore point
  mem_log,         // [mem], #w: log pre-store bytes
  asan_check,      // [mem], #w: poison test
  taint_load,      // rd, [mem], #w, #allowlisted: sink checks + loaded-value tag
  tag_store,       // rs, [mem], #w: write register tag to memory tag bytes (logged)
  tag_clear,       // [mem], #w: clear memory tag bytes (logged)
  tag_alu,         // rd, src: rd tag |= src tag
  tag_mov,         // rd, src: rd tag = src tag
  tag_cmp,         // a, b: flags tag = union
  port_check,      // secret flags before a conditional branch
  tag_block,       // batched per-block tag update (real copy)
  cov_branch,      // #branch_id: normal coverage
  cov_spec,        // #guard_id: speculative coverage (buffered)
  frame_poison,    // poison return-slot shadow at [r15]
  frame_unpoison,  // clear it before ret
  mode_redirect,   // label: bounce to shadow counterpart when simulating
  escape_check,    // [] for ret target, [reg] for jmpr/callr target
  guard,           // #want(0=normal,1=sim,2=both), #skip: mixed-mode dynamic mode gate
};

// Forced-rollback reasons (imm operand of IntrinsicKind::rollback and run stats keys).
enum class RollbackReason : uint8_t { external_call = 0, serialize = 1, indirect_escape = 2, fault = 3 };
constexpr int kNumRollbackReasons = 4;

enum class OperandKind : uint8_t { reg, imm, label, mem };

struct Operand {
  OperandKind kind = OperandKind::imm;
  uint8_t reg = 0;      // reg index, or mem base register
  int32_t imm = 0;      // immediate, or mem displacement
  std::string label;

  static Operand make_reg(int r) { return {OperandKind::reg, static_cast<uint8_t>(r), 0, {}}; }
  static Operand make_imm(int32_t v) { return {OperandKind::imm, 0, v, {}}; }
  static Operand make_label(std::string name) { return {OperandKind::label, 0, 0, std::move(name)}; }
  static Operand make_mem(int base, int32_t disp) {
    return {OperandKind::mem, static_cast<uint8_t>(base), disp, {}};
  }
  bool operator==(const Operand&) const = default;
};

// Stable identity of a real-copy instruction: owning real block label plus the
// ordinal among original-origin instructions in that block. Survives
// instrumentation (which only inserts) and is the key gadget reports carry.
struct SiteRef {
  std::string block;
  int32_t ordinal = -1;

  bool valid() const { return ordinal >= 0; }
  bool operator==(const SiteRef&) const = default;
  auto operator<=>(const SiteRef&) const = default;
  std::string str() const { return block + ":" + std::to_string(ordinal); }
};

struct Instruction {
  Opcode op = Opcode::nop;
  Cond cond = Cond::z;                       // jcc only
  uint8_t width = 4;                         // load/store and memory intrinsics
  Origin origin = Origin::original;
  IntrinsicKind intr = IntrinsicKind::guard; // op == intrinsic only
  std::string ext_name;                      // op == ext only
  std::vector<Operand> ops;
  SiteRef site;
  int line = 0;  // source line, diagnostics only

  bool is_intrinsic(IntrinsicKind k) const { return op == Opcode::intrinsic && intr == k; }
  bool same_structure(const Instruction& o) const {
    return op == o.op && cond == o.cond && width == o.width && origin == o.origin &&
           (op != Opcode::intrinsic || intr == o.intr) && ext_name == o.ext_name && ops == o.ops;
  }
};

enum class CopyKind : uint8_t { real, shadow };

enum class TermKind : uint8_t { fallthrough, jmp, jcc, jmpr, call, callr, ret, halt };

struct BasicBlock {
  std::string label;
  std::vector<Instruction> insns;
  CopyKind copy = CopyKind::real;
  bool is_trampoline = false;
  bool indirect_target = false;  // may be reached by an indirect transfer
  bool marked = false;           // carries the marker-nop redirect preamble
  TermKind term = TermKind::fallthrough;
  std::vector<std::string> succ;  // jcc: [taken, fallthrough]
  uint32_t addr = 0;              // assigned by finalize()

  int original_count() const {
    int n = 0;
    for (const auto& in : insns) n += in.origin == Origin::original;
    return n;
  }
};

struct Function {
  std::string name;
  std::vector<BasicBlock> blocks;  // blocks[0] is the entry
  CopyKind copy = CopyKind::real;
};

struct DataSegment {
  std::string name;
  uint32_t size = 0;
  std::vector<uint8_t> bytes;                           // initializer prefix
  std::vector<std::pair<uint32_t, std::string>> label_words;  // offset -> label (LE word)
  uint32_t addr = 0;
};

struct ExternDecl {
  std::string name;     // symbol used by call sites
  std::string binding;  // built-in external it maps to
  uint32_t addr = 0;
};

enum class Policy : uint8_t { kasper, specfuzz };
enum class InstrMode : uint8_t { none, shadows, mixed };

// One real-copy conditional branch. Ids are dense in program order.
struct BranchInfo {
  int id = 0;
  SiteRef site;            // site of the jcc
  std::string function;    // real function name
  Cond cond = Cond::z;
  std::string taken_label;  // real-copy labels
  std::string fall_label;
  std::string tramp_label;  // shadows mode only
};

struct ProgramMeta {
  InstrMode mode = InstrMode::none;
  Policy policy = Policy::kasper;
  bool nesting = true;
  int rob_budget = 250;
  int check_interval = 50;
  int max_nest_depth = 6;
  int full_depth_runs = 5;
  // Injection-harness fields: taint sources off, only `user_global` tagged USER,
  // massage promotion disabled.
  bool harness_mode = false;
  std::string user_global;
  uint32_t user_global_bytes = 0;
  int num_branches = 0;    // normal-coverage denominator is 2x this
  int num_spec_guards = 0;
};

struct Program {
  std::vector<Function> functions;
  std::vector<DataSegment> data;
  std::vector<ExternDecl> externs;
  std::string entry = "main";
  std::vector<BranchInfo> branches;
  ProgramMeta meta;

  // Derived by finalize():
  std::map<std::string, uint32_t> symbols;
  int max_block_originals = 0;
  bool finalized = false;

  Function* find_function(const std::string& name);
  const Function* find_function(const std::string& name) const;
  BasicBlock* find_block(const std::string& label);
  const BasicBlock* find_block(const std::string& label) const;
  const BranchInfo* branch_by_id(int id) const;

  uint32_t symbol_addr(const std::string& name) const;
  std::optional<uint32_t> try_symbol_addr(const std::string& name) const;

  // Assigns block/data/extern addresses, rebuilds the symbol table (checked
  // injective) and derived metadata. Idempotent; reruns after every pass.
  void finalize();

  // Stamps SiteRefs: real-copy originals get (their block, ordinal); must run
  // before duplication so copies inherit provenance.
  void stamp_sites();

  // Resolves a site to the current address of that original instruction, or
  // nullopt if the block/ordinal no longer exists.
  std::optional<uint32_t> site_addr(const SiteRef& site) const;
  // Symbolizes a code address as function+offset.
  std::string symbolize(uint32_t addr) const;

  int count_instructions(Origin origin) const;
};

struct AssemblyError : std::runtime_error {
  int line;
  AssemblyError(int line_, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_) + ": " + msg), line(line_) {}
};

struct RewriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// True for opcodes that end a basic block.
bool is_terminator(Opcode op);
TermKind terminator_kind(Opcode op);

const char* opcode_name(Opcode op);
const char* cond_name(Cond c);
const char* intrinsic_name(IntrinsicKind k);
const char* rollback_reason_name(RollbackReason r);
const char* policy_name(Policy p);
const char* mode_name(InstrMode m);
std::optional<Opcode> opcode_from_name(const std::string& s);
std::optional<Cond> cond_from_name(const std::string& s);
std::optional<IntrinsicKind> intrinsic_from_name(const std::string& s);
std::optional<Policy> policy_from_name(const std::string& s);
std::optional<InstrMode> mode_from_name(const std::string& s);

// Built-in externals understood by the VM.
bool is_builtin_external(const std::string& name);

// Evaluates a branch condition against cmp flags.
struct Flags {
  bool z = false, n = false, c = false;
  bool operator==(const Flags&) const = default;
};
bool cond_holds(Cond c, const Flags& f);

}  // namespace shadowspec
