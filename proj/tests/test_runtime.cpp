// SPDX-License-Identifier: Apache-2.0
#include <random>

#include "doctest.h"
#include "shadowspec/assembler.hpp"
#include "shadowspec/cfg.hpp"
#include "shadowspec/runtime.hpp"
#include "support/corpus.hpp"

using namespace shadowspec;
using namespace shadowspec::testing;

TEST_CASE("nesting decision: schedule and bounds") {
  int max_depth = 6, full_runs = 5;
  SUBCASE("first five runs run at full depth") {
    BranchStat s{2, permitted_depth_for(2, max_depth)};
    CHECK(nesting_decision(s, 4, max_depth, full_runs));
  }
  SUBCASE("past the warmup, the doubling schedule gates the depth") {
    BranchStat s{100, 2};
    CHECK_FALSE(nesting_decision(s, 2, max_depth, full_runs));
    CHECK(nesting_decision(s, 1, max_depth, full_runs));
  }
  SUBCASE("the sixth order is the ceiling, always") {
    BranchStat s{1, 6};
    CHECK_FALSE(nesting_decision(s, 6, max_depth, full_runs));
    CHECK_FALSE(nesting_decision(BranchStat{1000, 6}, 6, max_depth, full_runs));
  }
  SUBCASE("doubling thresholds") {
    CHECK(permitted_depth_for(6, 6) == 1);
    CHECK(permitted_depth_for(10, 6) == 1);
    CHECK(permitted_depth_for(11, 6) == 2);
    CHECK(permitted_depth_for(20, 6) == 2);
    CHECK(permitted_depth_for(21, 6) == 3);
    CHECK(permitted_depth_for(40, 6) == 3);
    CHECK(permitted_depth_for(80, 6) == 4);
    CHECK(permitted_depth_for(100, 6) == 5);
    CHECK(permitted_depth_for(161, 6) == 6);
    CHECK(permitted_depth_for(100000, 6) == 6);
    CHECK(permitted_depth_for(100000, 3) == 3);  // capped at max depth
  }
}

TEST_CASE("start_sim: wrong path is entered and the branch resumes architecturally") {
  Program p = instrument(corpus_program("fib.s"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({11}));  // i = SIZE + 1
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.exit_code == 0xFFFFFFFFu);  // architectural result is -1
  CHECK(r.episodes.episodes >= 1);
  // the wrong path touched the in-bounds block: its spec-coverage guard fired
  CHECK(!r.coverage.spec.empty());
  // violations recorded at the two out-of-bounds loads
  bool v1 = false, v2 = false;
  for (const auto& v : r.violations) {
    if (v.site == SiteRef{"fib_in", 3}) v1 = true;
    if (v.site == SiteRef{"fib_in", 4}) v2 = true;
  }
  CHECK(v1);
  CHECK(v2);
}

TEST_CASE("log_write/rollback: LIFO restore of overwritten bytes") {
  // two stores to the same address inside the wrong path; after rollback the
  // original content must be back
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".data slot 8 7 0 0 0\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #1\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"
      "  mov r3, slot\n"
      "  cmp r1, #100\n"
      "  jltu after\n"
      "wrong:\n"
      "  mov r4, #11\n"
      "  store r4, [r3+0]\n"
      "  mov r4, #22\n"
      "  store r4, [r3+0]\n"
      "after:\n"
      "  load r0, [r3+0]\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunConfig rc;
  rc.debug_snapshots = true;
  RunResult r = run_program(p, bytes({5}), rc);
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.exit_code == 7);  // pre-episode value restored
  CHECK(r.episodes.episodes >= 1);
}

TEST_CASE("check_restore: budget boundary values") {
  // straight-line wrong path longer than the budget: episode ends by budget,
  // shorter stays a serialize/halt end
  auto build = [](int n) {
    std::string src = ".data buf 8\n.func main\n  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
    src += "  mov r2, buf\n  load.b r1, [r2+0]\n  cmp r1, #100\n  jltu after\nwrong:\n";
    for (int i = 0; i < n; ++i) src += "  add r3, #1\n";
    src += "after:\n  halt\n.endfunc\n";
    return instrument(assemble(src), config_for(Policy::kasper));
  };
  RunResult over = run_program(build(300), bytes({1}));
  CHECK(over.episodes.budget_ends >= 1);
  RunResult under = run_program(build(100), bytes({1}));
  CHECK(under.episodes.budget_ends == 0);
  CHECK(under.episodes.forced[static_cast<int>(RollbackReason::serialize)] >= 1);
}

TEST_CASE("check_restore: exact threshold boundary") {
  // 251 wrong-path originals trip the check at the 250th; 249 never do
  auto build = [](int n) {
    std::string src = ".data buf 8\n.func main\n  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
    src += "  mov r2, buf\n  load.b r1, [r2+0]\n  cmp r1, #100\n  jltu after\nwrong:\n";
    for (int i = 0; i < n; ++i) src += "  add r3, #1\n";
    src += "after:\n  halt\n.endfunc\n";
    return instrument(assemble(src), config_for(Policy::kasper));
  };
  RunResult over = run_program(build(251), bytes({1}));
  CHECK(over.episodes.budget_ends == 1);
  CHECK(over.episodes.max_episode_originals == 250);
  RunResult under = run_program(build(249), bytes({1}));
  CHECK(under.episodes.budget_ends == 0);
  CHECK(under.episodes.forced[static_cast<int>(RollbackReason::serialize)] >= 1);
}

TEST_CASE("check_restore: instrumentation never advances the budget") {
  // a wrong path dense with taint intrinsics still executes its full 200
  // originals (well under the 250 budget) before the halt stops it
  std::string src = ".data buf 8\n.func main\n  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
  src += "  mov r2, buf\n  load.b r1, [r2+0]\n  cmp r1, #100\n  jltu after\nwrong:\n";
  for (int i = 0; i < 50; ++i) {
    src += "  store r3, [r2+4]\n";  // each store drags several intrinsics along
    src += "  load r4, [r2+4]\n";
    src += "  add r3, #1\n";
    src += "  add r4, #1\n";
  }
  src += "after:\n  halt\n.endfunc\n";
  Program p = instrument(assemble(src), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({1}));
  CHECK(r.episodes.budget_ends == 0);  // 200 originals < 250, intrinsics are free
  CHECK(r.episodes.max_episode_originals >= 200);
  CHECK(r.episodes.max_episode_originals <= 250 + 50 + p.max_block_originals);
}

TEST_CASE("rollback: nested episodes unwind to depth zero with snapshots on") {
  Program p = instrument(corpus_program("nested_port.s"), config_for(Policy::kasper));
  RunConfig rc;
  rc.debug_snapshots = true;
  RunResult r = run_program(p, bytes({1}), rc);
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.episodes.episodes >= 1);
  bool deep = false;
  for (size_t d = 3; d < r.episodes.depth_histogram.size(); ++d)
    deep |= r.episodes.depth_histogram[d] > 0;
  CHECK(deep);
}

TEST_CASE("rollback: fault inside the wrong path continues the run") {
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #1\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"
      "  cmp r1, #100\n"
      "  jltu after\n"
      "wrong:\n"
      "  mov r3, #0\n"
      "  load r4, [r3+0]\n"  // null dereference, only under misprediction
      "after:\n"
      "  mov r0, #1\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunConfig rc;
  rc.debug_snapshots = true;
  RunResult r = run_program(p, bytes({5}), rc);
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.exit_code == 1);
  CHECK(r.episodes.forced[static_cast<int>(RollbackReason::fault)] >= 1);
}

TEST_CASE("forced_rollback: each unconditional reason is exercised") {
  Program p = instrument(corpus_program("forced_stops.s"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({5, 1}));
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.episodes.forced[static_cast<int>(RollbackReason::external_call)] >= 2);
  CHECK(r.episodes.forced[static_cast<int>(RollbackReason::serialize)] >= 1);
  Program q = instrument(corpus_program("escape_unmarked.s"), config_for(Policy::kasper));
  RunResult rq = run_program(q, bytes({200}));
  CHECK(rq.episodes.forced[static_cast<int>(RollbackReason::indirect_escape)] >= 1);
}

TEST_CASE("spec coverage: buffered entries flush once per episode") {
  Program p = instrument(corpus_program("canonical_v1.s"), config_for(Policy::kasper));
  SUBCASE("lazy and eager agree") {
    RunConfig lazy, eager;
    eager.eager_coverage = true;
    for (int input : {3, 20, 200}) {
      RunResult a = run_program(p, bytes({input}), lazy);
      RunResult b = run_program(p, bytes({input}), eager);
      CHECK(a.coverage.spec == b.coverage.spec);
      CHECK(a.coverage.normal == b.coverage.normal);
    }
  }
  SUBCASE("a block visited twice in an episode counts once") {
    RunResult r = run_program(p, bytes({20}));
    // sets cannot double-count by construction; just confirm nonempty
    CHECK(!r.coverage.spec.empty());
  }
  SUBCASE("a branchless program triggers no episodes and flushes nothing") {
    Program q = instrument(assemble(".func main\n  mov r1, #1\n  halt\n.endfunc\n"),
                           config_for(Policy::kasper));
    RunResult r = run_program(q, {});
    CHECK(r.episodes.episodes == 0);
    CHECK(r.coverage.spec.empty());
  }
}

TEST_CASE("rollback: a thousand random stores replay to the exact prior memory") {
  std::mt19937_64 rng(4242);
  std::string src = ".data buf 8\n.data arena 2048\n.func main\n";
  src += "  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
  src += "  mov r2, buf\n  load.b r1, [r2+0]\n";
  src += "  mov r5, arena\n  cmp r1, #100\n  jltu after\nwrong:\n";
  for (int i = 0; i < 1000; ++i) {
    src += "  mov r3, #" + std::to_string(rng() % 256) + "\n";
    src += "  store.b r3, [r5+" + std::to_string(rng() % 2000) + "]\n";
  }
  src += "after:\n  halt\n.endfunc\n";
  Program p = instrument(assemble(src), config_for(Policy::kasper));
  RunConfig rc;
  rc.debug_snapshots = true;  // memory compared bit-for-bit after the rollback
  rc.rob_budget = 5000;       // let the whole store burst run in one episode
  RunResult r = run_program(p, bytes({1}), rc);
  CHECK(r.status == ExitStatus::halted);
  CHECK(r.episodes.episodes >= 1);
  CHECK(r.episodes.max_episode_originals >= 2000);
}

TEST_CASE("rollback soundness: randomized stores against the snapshot comparator") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    std::string src = ".data buf 8\n.data arena 128\n.func main\n";
    src += "  mov r0, buf\n  mov r1, #1\n  ext read_input\n";
    src += "  mov r2, buf\n  load.b r1, [r2+0]\n";
    src += "  mov r5, arena\n  cmp r1, #100\n  jltu after\nwrong:\n";
    int stores = 30 + static_cast<int>(rng() % 40);
    for (int i = 0; i < stores; ++i) {
      src += "  mov r3, #" + std::to_string(rng() % 256) + "\n";
      src += "  store.b r3, [r5+" + std::to_string(rng() % 120) + "]\n";
    }
    src += "after:\n  halt\n.endfunc\n";
    Program p = instrument(assemble(src), config_for(Policy::kasper));
    RunConfig rc;
    rc.debug_snapshots = true;  // throws InvariantViolation on any mismatch
    RunResult r = run_program(p, bytes({1}), rc);
    CHECK(r.status == ExitStatus::halted);
    CHECK(r.episodes.episodes >= 1);
  }
}

TEST_CASE("mode confinement assertion is active") {
  Program p = instrument(corpus_program("escape_pointer.s"), config_for(Policy::kasper));
  for (int input = 0; input < 8; ++input) {
    RunResult r = run_program(p, bytes({input}));
    CHECK(r.status == ExitStatus::halted);
  }
}
