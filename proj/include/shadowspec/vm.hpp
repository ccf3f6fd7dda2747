// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <span>

#include "shadowspec/memory.hpp"
#include "shadowspec/policy.hpp"
#include "shadowspec/runtime.hpp"

namespace shadowspec {

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

enum class BuiltinExt : uint8_t { read_input, write_output, malloc_fn, free_fn, exit_fn };
std::optional<BuiltinExt> builtin_from_name(const std::string& name);

// Flat, pre-resolved execution form of a finalized Program. Built once and
// shared by every run (fuzz workers hold const references).
struct DecodedInsn {
  Opcode op = Opcode::nop;
  Cond cond = Cond::z;
  IntrinsicKind intr = IntrinsicKind::guard;
  Origin origin = Origin::original;
  uint8_t width = 4;
  uint8_t src_kind = 0;  // 0 none, 1 reg, 2 imm, 3 label (resolved into target)
  int8_t r0 = -1;
  int8_t r1 = -1;  // src register when src_kind == 1
  int32_t imm0 = 0;
  int32_t imm1 = 0;
  bool has_mem = false;
  int8_t mem_base = -1;
  int32_t mem_disp = 0;
  uint32_t target = 0;
  uint16_t ext = 0xffff;
  int32_t site_ix = -1;
  uint32_t block_ix = 0;
  bool preamble = false;  // marker/redirect slot of a marked real block
};

struct ExecBlock {
  uint32_t start = 0;
  uint32_t end = 0;
  uint32_t first = 0;  // index into ExecImage::insns
  uint32_t count = 0;
  CopyKind copy = CopyKind::real;
  bool trampoline = false;
  bool marked = false;
  bool indirect_target = false;
};

struct SiteInfo {
  SiteRef ref;
  uint32_t addr = 0;       // real-copy address in this program, 0 if gone
  std::string symbol;      // function+offset
};

struct DecodedBranch {
  Cond cond = Cond::z;
  uint32_t taken = 0;
  uint32_t fall = 0;
  uint32_t tramp = 0;  // 0 in mixed mode
  SiteRef site;
};

class ExecImage {
 public:
  explicit ExecImage(Program program);

  const Program& program() const { return program_; }
  const ProgramMeta& meta() const { return program_.meta; }

  const ExecBlock* block_of(uint32_t addr) const;
  const DecodedInsn* at(uint32_t addr) const;
  bool marker_at(uint32_t addr) const;
  bool flagged_block_start(uint32_t addr) const;

  std::vector<DecodedInsn> insns;
  std::vector<ExecBlock> blocks;  // sorted by start address
  std::vector<SiteInfo> sites;
  std::vector<DecodedBranch> branches;
  std::map<uint32_t, BuiltinExt> extern_bindings;
  std::vector<std::pair<uint32_t, std::vector<uint8_t>>> data_init;
  uint32_t entry_pc = 0;
  uint32_t user_global_addr = 0;

 private:
  int site_index(const SiteRef& s);
  Program program_;
  std::map<SiteRef, int> site_ids_;
};

struct RunConfig {
  uint64_t max_steps = 1'000'000;  // original instructions
  bool debug_snapshots = false;    // compare state after every rollback
  bool eager_coverage = false;     // debug: update speculative coverage eagerly
  bool record_trace = false;       // normal-mode architectural trace
  std::optional<int> rob_budget;   // overrides the program's embedded values
  std::optional<int> max_nest_depth;
};

enum class ExitStatus : uint8_t { halted, input_exhausted, limit_exceeded, fault };
const char* exit_status_name(ExitStatus s);

struct Counters {
  uint64_t steps = 0;
  uint64_t originals = 0;
  uint64_t instrumentation = 0;
  uint64_t guard_checks = 0;
};

struct EpisodeStats {
  uint64_t episodes = 0;
  uint64_t budget_ends = 0;
  std::array<uint64_t, kNumRollbackReasons> forced{};
  std::array<uint64_t, 9> depth_histogram{};  // index = max depth of the episode
  uint64_t max_episode_originals = 0;

  void accumulate(const EpisodeStats& o) {
    episodes += o.episodes;
    budget_ends += o.budget_ends;
    for (int i = 0; i < kNumRollbackReasons; ++i) forced[i] += o.forced[i];
    for (size_t i = 0; i < depth_histogram.size(); ++i) depth_histogram[i] += o.depth_histogram[i];
    max_episode_originals = std::max(max_episode_originals, o.max_episode_originals);
  }
};

struct AsanEvent {
  SiteRef site;
  uint8_t shadow_byte = 0;
  uint32_t addr = 0;
  uint8_t width = 0;
  uint32_t count = 1;
};

struct TraceEntry {
  SiteRef site;
  uint64_t digest = 0;
  bool operator==(const TraceEntry&) const = default;
};

struct CoverageSets {
  std::set<uint32_t> normal;  // (branch id << 1) | taken
  std::set<uint32_t> spec;    // guard ids
};

struct RunResult {
  ExitStatus status = ExitStatus::halted;
  uint32_t exit_code = 0;
  std::string fault_message;
  std::vector<GadgetReport> reports;  // deduplicated within the run
  CoverageSets coverage;
  Counters counters;
  EpisodeStats episodes;
  std::vector<AsanEvent> violations;
  std::vector<TraceEntry> trace;
  std::vector<std::pair<int, uint64_t>> branch_entry_deltas;
  std::set<uint32_t> observed_indirect;  // normal-mode ret/jmpr/callr targets
  std::vector<uint8_t> output;
  std::array<uint32_t, kNumRegs> final_regs{};
  std::array<TagSet, kNumRegs> final_reg_tags{};
  TagSet final_flags_tag = 0;
  uint64_t input_hash = 0;

  bool has_report(GadgetClass cls) const {
    for (const auto& r : reports)
      if (r.cls == cls) return true;
    return false;
  }
  std::set<ReportKey> report_keys() const {
    std::set<ReportKey> keys;
    for (const auto& r : reports) keys.insert(key_of(r));
    return keys;
  }
};

// Thrown when an always-on correctness assertion fails (mode confinement,
// rollback snapshot mismatch). Never caught by the VM itself.
struct InvariantViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Deterministic interpreter for one program; reusable across runs.
class Vm {
 public:
  explicit Vm(const ExecImage& img);

  // `session_stats` supplies cross-run branch encounter counts (fuzzing). The
  // run works on a private copy and reports its increments in the result.
  RunResult run(std::span<const uint8_t> input, const RunConfig& cfg,
                const BranchStatsTable* session_stats = nullptr);

 private:
  struct Impl;
  const ExecImage& img_;
};

// Shared external-call models (also used by the oracle explorer).
struct ExtCallState {
  MemoryStore& mem;
  std::array<uint32_t, kNumRegs>& regs;
  std::span<const uint8_t> input;
  size_t& input_cursor;
  bool taint_user = false;
  uint32_t& heap_bump;
  std::map<uint32_t, uint32_t>& allocations;
  std::vector<uint8_t>* output = nullptr;
  bool* input_short = nullptr;
};

struct ExtCallOutcome {
  bool halted = false;
  uint32_t exit_code = 0;
  std::string fault;  // nonempty on failure
};

ExtCallOutcome run_builtin(BuiltinExt which, ExtCallState& st);

// Renders the run-summary file (dual coverage, episode statistics).
std::string run_summary_text(const RunResult& r, const ProgramMeta& meta);

}  // namespace shadowspec
