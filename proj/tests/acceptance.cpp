// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one criterion per function, one pass/fail line each.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "shadowspec/assembler.hpp"
#include "shadowspec/cfg.hpp"
#include "shadowspec/fuzz.hpp"
#include "shadowspec/oracle.hpp"
#include "support/corpus.hpp"
#include "support/program_generator.hpp"

using namespace shadowspec;
using namespace shadowspec::testing;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define REQUIRE_MSG(cond, msg)                         \
  do {                                                 \
    if (!(cond)) throw Failure(std::string("") + msg); \
  } while (0)

std::string show_keys(const std::set<ReportKey>& keys) {
  std::string s;
  for (const auto& k : keys) {
    s += std::string(gadget_class_name(k.cls)) + "@" + k.site.str() + " ";
  }
  return s.empty() ? "(none)" : s;
}

// 1. Canonical gadget detection with exact report sets and a fenced variant.
void criterion_1() {
  auto t0 = std::chrono::steady_clock::now();
  Program base = corpus_program("canonical_v1.s");
  std::vector<uint8_t> oob = bytes({20});

  Program kasper = instrument(base, config_for(Policy::kasper));
  RunResult rk = run_program(kasper, oob);
  std::set<ReportKey> expect_kasper = {
      {GadgetClass::user_mds, {"then", 2}, {1}},    // the secret load
      {GadgetClass::user_cache, {"then", 5}, {1}},  // the transmit load
  };
  REQUIRE_MSG(rk.report_keys() == expect_kasper,
              "kasper keys: " + show_keys(rk.report_keys()));

  Program sf = instrument(base, config_for(Policy::specfuzz));
  RunResult rs = run_program(sf, oob);
  std::set<ReportKey> expect_sf = {{GadgetClass::sf_oob, {"then", 2}, {1}}};
  REQUIRE_MSG(rs.report_keys() == expect_sf, "specfuzz keys: " + show_keys(rs.report_keys()));

  Program fenced = corpus_program("canonical_v1_fenced.s");
  for (Policy p : {Policy::kasper, Policy::specfuzz}) {
    RunResult rf = run_program(instrument(fenced, config_for(p)), oob);
    REQUIRE_MSG(rf.reports.empty(), "fenced variant must stay silent");
  }

  double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE_MSG(dt < 1.0, "criterion must complete in under a second");
}

// 2. Walkthrough of the table-update program at i = SIZE.
void criterion_2() {
  Program p = instrument(corpus_program("fib.s"), config_for(Policy::kasper));
  RunConfig rc;
  rc.debug_snapshots = true;  // throws on mismatch
  RunResult r = run_program(p, bytes({10}), rc);
  REQUIRE_MSG(r.status == ExitStatus::halted, "run must halt");
  bool v1 = false, v2 = false;
  for (const auto& v : r.violations) {
    if (v.site == SiteRef{"fib_in", 3} && v.shadow_byte == layout::kShadowRedZone) v1 = true;
    if (v.site == SiteRef{"fib_in", 4} && v.shadow_byte == layout::kShadowRedZone) v2 = true;
  }
  REQUIRE_MSG(v1, "violation at the f[i-1] load");
  REQUIRE_MSG(v2, "violation at the f[i-2] load");
  REQUIRE_MSG(r.episodes.episodes >= 1, "a rollback must have happened");
  REQUIRE_MSG(r.exit_code == 0xFFFFFFFFu, "architectural result must be -1");
}

// 3. Escape freedom across 10k fuzz executions of the escape corpus.
void criterion_3() {
  uint64_t escapes = 0;
  for (const auto& name : {"escape_return.s", "escape_pointer.s", "escape_unmarked.s"}) {
    Program p = instrument(corpus_program(name), config_for(Policy::kasper));
    ExecImage img(p);
    FuzzConfig fc;
    fc.executions = 3334;
    fc.seed = 11;
    // The mode-confinement assertion is always on; any violation throws out
    // of fuzz_loop and fails the criterion.
    FuzzResult fr = fuzz_loop(img, fc, {bytes({1})});
    escapes += fr.episodes.forced[static_cast<int>(RollbackReason::indirect_escape)];
  }
  REQUIRE_MSG(escapes >= 1, "the unmarked-target case must force indirect-escape rollbacks");
}

// 4. Rollback soundness: 1,000 generated programs x 10 inputs, snapshots on.
void criterion_4() {
  RunConfig rc;
  rc.debug_snapshots = true;
  uint64_t episodes = 0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Program inst = instrument(assemble(generate_program(seed)), config_for(Policy::kasper));
    ExecImage img(inst);
    Vm vm(img);
    for (int i = 0; i < 10; ++i) {
      std::vector<uint8_t> input;
      std::mt19937_64 rng(seed * 1000 + i);
      size_t len = rng() % 9;
      for (size_t k = 0; k < len; ++k) input.push_back(static_cast<uint8_t>(rng()));
      RunResult r = vm.run(input, rc);  // throws on any state mismatch
      episodes += r.episodes.episodes;
    }
  }
  REQUIRE_MSG(episodes > 10000, "the suite must actually exercise rollbacks");
}

// 5. Oracle equivalence on the corpus plus 500 generated programs.
void criterion_5() {
  auto inputs = {bytes({20, 3, 60, 1, 9, 0, 44, 7}), bytes({0}),
                 bytes({255, 12, 97, 61, 44, 5, 8, 3})};
  uint64_t divergences = 0;
  auto check = [&](const Program& base, bool nesting) {
    RewriteConfig cfg = config_for(Policy::kasper, InstrMode::shadows, nesting, 3);
    Program inst = instrument(base, cfg);
    ExecImage img(inst);
    Vm vm(img);
    OracleConfig oc = OracleConfig::from_meta(inst.meta, Policy::kasper);
    for (const auto& input : inputs) {
      RunResult r = vm.run(input, {});
      OracleResult o = oracle_explore(base, input, oc);
      if (r.report_keys() != o.keys) {
        divergences++;
        std::fprintf(stderr, "  divergence: vm={%s} oracle={%s}\n",
                     show_keys(r.report_keys()).c_str(), show_keys(o.keys).c_str());
      }
    }
  };
  for (const auto& name : corpus_names()) {
    Program base = corpus_program(name);
    check(base, false);
    check(base, true);
  }
  for (uint64_t seed = 0; seed < 500; ++seed) {
    Program base = assemble(generate_program(seed + 50000));
    check(base, false);
    check(base, true);
  }
  REQUIRE_MSG(divergences == 0,
              "report keys must match everywhere, got " + std::to_string(divergences));
}

// 6. Nested-speculation depth gating.
void criterion_6() {
  Program base = corpus_program("nested_port.s");
  auto run_depth = [&](int depth) {
    Program p = instrument(base, config_for(Policy::kasper, InstrMode::shadows, true, depth));
    return run_program(p, bytes({1}));
  };
  REQUIRE_MSG(!run_depth(2).has_report(GadgetClass::massage_port),
              "depth 2 must not reach the three-misprediction gadget");
  REQUIRE_MSG(run_depth(3).has_report(GadgetClass::massage_port),
              "depth 3 must report the port gadget");

  Program sf = instrument(corpus_program("stack_underflow.s"), config_for(Policy::specfuzz));
  RunResult r = run_program(sf, bytes({1}));
  bool hit = false;
  for (const auto& rep : r.reports)
    hit |= rep.cls == GadgetClass::sf_oob && rep.site.block == "skip_push";
  REQUIRE_MSG(hit, "stack underflow must be reported under the specfuzz policy");
}

// 7. Injection benchmark on the toy parser.
void criterion_7() {
  Program parser = corpus_program("toy_parser.s");
  int originals = parser.count_instructions(Origin::original);
  REQUIRE_MSG(originals >= 250 && originals <= 450,
              "parser size ~300, got " + std::to_string(originals));

  InjectionGroundTruth gt;
  std::vector<std::string> sites = {"k_letter", "k_digit", "k_comma", "fc_body", "dh_b"};
  Program injected = inject_gadgets(parser, {0, 1, 2, 3, 4}, sites, &gt);
  Program inst = instrument(injected, config_for(Policy::kasper));
  ExecImage img(inst);
  FuzzConfig fc;
  fc.executions = 50000;
  fc.seed = 1234;
  FuzzResult fr = fuzz_loop(img, fc, {bytes({107, 61, 49, 44, 120, 200})});
  InjectionScore s = score_injection(fr.store.sorted(), gt);
  REQUIRE_MSG(s.fp == 0, "no false positives allowed, got " + std::to_string(s.fp));
  REQUIRE_MSG(s.precision_valid && s.precision == 1.0, "precision must be 100%");
  REQUIRE_MSG(s.tp == 4, "all four reachable injections must be found, got " +
                             std::to_string(s.tp));
  REQUIRE_MSG(s.fn == 1, "the dead-code injection is an expected false negative");
}

// 8. Speculation-shadows performance property on the straight-line benchmark.
void criterion_8() {
  Program base = corpus_program("bench_straightline.s");
  std::vector<uint8_t> input = bytes({1, 2, 3, 4});
  RunResult shadows =
      run_program(instrument(base, config_for(Policy::kasper, InstrMode::shadows)), input);
  RunResult mixed =
      run_program(instrument(base, config_for(Policy::kasper, InstrMode::mixed)), input);
  REQUIRE_MSG(shadows.counters.guard_checks == 0,
              "shadows mode must execute zero guard checks in straight-line code");
  REQUIRE_MSG(mixed.counters.guard_checks >= 106,
              "mixed mode needs a guard per hooked memory operation, got " +
                  std::to_string(mixed.counters.guard_checks));
  double ratio =
      static_cast<double>(mixed.counters.instrumentation + mixed.counters.guard_checks) /
      static_cast<double>(shadows.counters.instrumentation + shadows.counters.guard_checks);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", ratio);
  REQUIRE_MSG(ratio >= 1.5, std::string("dynamic instrumentation ratio must exceed 1.5, got ") +
                                buf);
  std::printf("       (ratio mixed/shadows = %.2f)\n", ratio);
}

// 9. Budget discipline everywhere.
void criterion_9() {
  auto inputs = {bytes({20, 3, 60, 1, 9, 0, 44, 7}), bytes({0}), bytes({255, 1})};
  for (const auto& name : corpus_names()) {
    Program inst = instrument(corpus_program(name), config_for(Policy::kasper));
    uint64_t bound = 250 + 50 + static_cast<uint64_t>(inst.max_block_originals);
    for (const auto& input : inputs) {
      RunResult r = run_program(inst, input);
      REQUIRE_MSG(r.episodes.max_episode_originals <= bound,
                  std::string(name) + ": episode exceeded the budget bound");
    }
  }
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Program inst =
        instrument(assemble(generate_program(seed + 90000)), config_for(Policy::kasper));
    uint64_t bound = 250 + 50 + static_cast<uint64_t>(inst.max_block_originals);
    RunResult r = run_program(inst, bytes({9, 7, 5, 3, 1, 0, 2, 4}));
    REQUIRE_MSG(r.episodes.max_episode_originals <= bound, "generated program exceeded bound");
  }

  // Instrumentation never advances the budget: a wrong path of 200 originals
  // dressed in taint hooks must not hit the 250 threshold.
  std::string src = ".data buf 8\n.func main\n  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
  src += "  mov r2, buf\n  load.b r1, [r2+0]\n  cmp r1, #100\n  jltu after\nwrong:\n";
  for (int i = 0; i < 50; ++i)
    src += "  store r3, [r2+4]\n  load r4, [r2+4]\n  add r3, #1\n  add r4, #1\n";
  src += "after:\n  halt\n.endfunc\n";
  RunResult r = run_program(instrument(assemble(src), config_for(Policy::kasper)), bytes({1}));
  REQUIRE_MSG(r.episodes.budget_ends == 0, "intrinsics must not count toward the budget");
  REQUIRE_MSG(r.episodes.max_episode_originals >= 200, "episode must run its 200 originals");
}

// 10. Dual coverage: lazy == eager, and summaries report both percentages.
void criterion_10() {
  RunConfig lazy, eager;
  eager.eager_coverage = true;
  for (const auto& name : corpus_names()) {
    Program inst = instrument(corpus_program(name), config_for(Policy::kasper));
    for (const auto& input : {bytes({20, 3, 60, 1, 9, 0, 44, 7}), bytes({1}), bytes({200})}) {
      RunResult a = run_program(inst, input, lazy);
      RunResult b = run_program(inst, input, eager);
      REQUIRE_MSG(a.coverage.spec == b.coverage.spec,
                  std::string(name) + ": lazy and eager speculative coverage differ");
      REQUIRE_MSG(a.coverage.normal == b.coverage.normal,
                  std::string(name) + ": normal coverage not deterministic");
    }
  }
  Program inst = instrument(corpus_program("canonical_v1.s"), config_for(Policy::kasper));
  RunResult r = run_program(inst, bytes({20}));
  std::string summary = run_summary_text(r, inst.meta);
  REQUIRE_MSG(summary.find("coverage_real ") != std::string::npos &&
                  summary.find("coverage_shadow ") != std::string::npos &&
                  summary.find('%') != std::string::npos,
              "summary must carry both coverage percentages");
}

}  // namespace

int main() {
  struct Criterion {
    const char* description;
    std::function<void()> fn;
  };
  const Criterion criteria[] = {
      {"canonical gadget detection (exact kasper/specfuzz sets, fenced variant silent)",
       criterion_1},
      {"table-update walkthrough (both OOB loads flagged, rollback, -1 committed)", criterion_2},
      {"escape freedom over 10k fuzz executions (confinement holds, escapes forced)",
       criterion_3},
      {"rollback soundness (1000 generated programs x 10 inputs, snapshot-checked)",
       criterion_4},
      {"oracle equivalence (corpus + 500 generated, nesting off and depth<=3)", criterion_5},
      {"nested-speculation depth gating (3-level analog, stack underflow)", criterion_6},
      {"injection benchmark (5 templates, 50k executions, 100% precision)", criterion_7},
      {"speculation-shadows overhead property (0 guards, ratio >= 1.5)", criterion_8},
      {"budget discipline (bound holds, instrumentation is free)", criterion_9},
      {"dual coverage (lazy == eager, both percentages reported)", criterion_10},
  };

  int failures = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    auto t0 = std::chrono::steady_clock::now();
    try {
      c.fn();
      double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("[PASS] criterion %2d: %s (%.1fs)\n", index, c.description, dt);
    } catch (const std::exception& e) {
      std::printf("[FAIL] criterion %2d: %s\n       %s\n", index, c.description, e.what());
      ++failures;
    }
    std::fflush(stdout);
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
