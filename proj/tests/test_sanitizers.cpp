// SPDX-License-Identifier: Apache-2.0
#include <random>

#include "doctest.h"
#include "shadowspec/assembler.hpp"
#include "shadowspec/cfg.hpp"
#include "shadowspec/sanitizers.hpp"
#include "support/corpus.hpp"
#include "support/program_generator.hpp"

using namespace shadowspec;
using namespace shadowspec::testing;

TEST_CASE("layout: region table holds") { CHECK_NOTHROW(verify_shadow_layout()); }

TEST_CASE("layout: shadow translations are privileged and distinct") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    uint32_t a;
    switch (rng() % 4) {
      case 0: a = layout::kGlobalBase + rng() % (layout::kGlobalEnd - layout::kGlobalBase); break;
      case 1: a = layout::kHeapBase + rng() % (layout::kHeapEnd - layout::kHeapBase); break;
      case 2: a = layout::kStackBase + rng() % (layout::kStackEnd - layout::kStackBase); break;
      default: a = layout::kRealCodeBase + rng() % (layout::kShadowCodeEnd - layout::kRealCodeBase);
    }
    uint32_t sh = layout::asan_shadow(a);
    uint32_t tg = layout::tag_shadow(a);
    CHECK(sh != tg);
    CHECK(is_privileged(sh));
    CHECK(is_privileged(tg));
    CHECK_FALSE(layout::in_user_data(sh));
    CHECK_FALSE(layout::in_user_data(tg));
  }
}

TEST_CASE("poison: set, test, clear") {
  MemoryStore mem;
  uint32_t a = layout::kGlobalBase + 64;
  CHECK(poison_at(mem, a, 4) == layout::kShadowOk);
  poison_range(mem, a, 8);
  CHECK(poison_at(mem, a, 1) == layout::kShadowRedZone);
  CHECK(poison_at(mem, a + 7, 1) == layout::kShadowRedZone);
  unpoison_range(mem, a, 8);
  CHECK(poison_at(mem, a, 8) == layout::kShadowOk);
  CHECK_THROWS(poison_range(mem, 0x100, 4));  // outside user space
}

TEST_CASE("poison: return-slot marker") {
  MemoryStore mem;
  poison_ret_slot(mem, layout::kStackTop);
  CHECK(poison_at(mem, layout::kStackTop, 4) == layout::kShadowRetSlot);
  CHECK(std::string(violation_kind_name(layout::kShadowRetSlot)) == "stack-oob");
  CHECK(std::string(violation_kind_name(layout::kShadowRedZone)) == "heap-oob");
}

TEST_CASE("poison: globals are never poisoned by the pipeline") {
  Program p = instrument(corpus_program("canonical_v1.s"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({20}));
  (void)r;
  MemoryStore mem;
  CHECK(poison_at(mem, layout::kGlobalBase, 64) == layout::kShadowOk);
}

TEST_CASE("taint: union, read, clear") {
  MemoryStore mem;
  uint32_t a = layout::kHeapBase + 32;
  CHECK(taint_get(mem, a, 4) == 0);
  taint_union(mem, a, 4, tag::kUser, nullptr);
  CHECK(taint_get(mem, a, 4) == tag::kUser);
  taint_union(mem, a, 2, tag::kSecretUser, nullptr);
  CHECK(taint_get(mem, a, 4) == (tag::kUser | tag::kSecretUser));
  taint_assign(mem, a, 4, 0, nullptr);
  CHECK(taint_get(mem, a, 4) == 0);
  CHECK_THROWS(taint_union(mem, layout::kAsanShadowBase, 1, tag::kUser, nullptr));
}

TEST_CASE("taint: log captures old bytes for rollback") {
  MemoryStore mem;
  uint32_t a = layout::kGlobalBase + 8;
  taint_union(mem, a, 2, tag::kUser, nullptr);
  TagLog log;
  taint_assign(mem, a, 2, tag::kMassage, &log);
  CHECK(log.size() == 2);
  for (auto it = log.rbegin(); it != log.rend(); ++it) mem.store8(it->addr, it->old_byte);
  CHECK(taint_get(mem, a, 2) == tag::kUser);
}

TEST_CASE("propagation: ALU union, mov copy, cmp flags tag") {
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #2\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"  // r1: USER
      "  mov r3, #0\n"
      "  add r3, r1\n"         // r3: USER via union
      "  mov r4, r3\n"         // r4: USER via copy
      "  mov r5, #7\n"         // r5: clean
      "  cmp r1, #0\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({1, 2}));
  CHECK((r.final_reg_tags[1] & tag::kUser) != 0);
  CHECK((r.final_reg_tags[3] & tag::kUser) != 0);
  CHECK((r.final_reg_tags[4] & tag::kUser) != 0);
  CHECK(r.final_reg_tags[5] == 0);
  CHECK((r.final_flags_tag & tag::kUser) != 0);
}

TEST_CASE("propagation: stores write the register tag to memory bytes") {
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".data out 8\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #1\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"
      "  mov r3, out\n"
      "  store r1, [r3+0]\n"
      "  load r4, [r3+0]\n"  // reads the stored tag back
      "  load r5, [r3+4]\n"  // clean word
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({5}));
  CHECK((r.final_reg_tags[4] & tag::kUser) != 0);
  CHECK(r.final_reg_tags[5] == 0);
}

// Batched block summary vs per-instruction propagation. The mixed-mode build
// propagates tags instruction by instruction; the shadows build uses one
// batched update per block in the real copy. Final register tags (seeded with
// probe loads over the arena and heap) must agree exactly.
TEST_CASE("block summary: equivalent to per-instruction propagation") {
  for (uint64_t seed = 0; seed < 60; ++seed) {
    CAPTURE(seed);
    Program plain = assemble(generate_straight_line(seed, 24));
    Program shadows = instrument(plain, config_for(Policy::kasper, InstrMode::shadows));
    Program mixed = instrument(plain, config_for(Policy::kasper, InstrMode::mixed));
    std::vector<uint8_t> input = bytes({1, 2, 3, 4, 5, 6, 7, 8});
    RunResult a = run_program(shadows, input);
    RunResult b = run_program(mixed, input);
    REQUIRE(a.status == b.status);
    CHECK(a.final_regs == b.final_regs);
    CHECK(a.final_reg_tags == b.final_reg_tags);
    CHECK(a.final_flags_tag == b.final_flags_tag);
  }
}

TEST_CASE("block summary: no-op on blocks without tag-relevant operations") {
  Program p = instrument(assemble(
      ".func main\n"
      "  nop\n"
      "  nop\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunResult r = run_program(p, {});
  CHECK(r.status == ExitStatus::halted);
  for (auto t : r.final_reg_tags) CHECK(t == 0);
}

TEST_CASE("block summary: register-dependent addresses use summary-time values") {
  // The store goes through a pointer computed inside the block; the batched
  // update must land the tag on the same bytes the store writes.
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".data table 32\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #2\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"
      "  and r1, #7\n"
      "  mov r3, table\n"
      "  add r3, r1\n"
      "  store.b r1, [r3+0]\n"   // runtime address = table + (input & 7)
      "  load.b r4, [r3+0]\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  RunResult r = run_program(p, bytes({5, 0}));
  CHECK((r.final_reg_tags[4] & tag::kUser) != 0);
}

TEST_CASE("asan allowlist: stack-register loads skip the check but stay tainted") {
  Program p = instrument(assemble(
      ".data buf 8\n"
      ".func main\n"
      "  mov r0, buf\n"
      "  mov r1, #1\n"
      "  ext read_input\n"
      "  mov r2, buf\n"
      "  load.b r1, [r2+0]\n"
      "  push r1\n"
      "  load r3, [r15+0]\n"
      "  pop r4\n"
      "  halt\n"
      ".endfunc\n"), config_for(Policy::kasper));
  // No asan_check may precede the [r15+0] load in the shadow copy.
  const Function* shadow = p.find_function("main$spec");
  REQUIRE(shadow != nullptr);
  for (const auto& b : shadow->blocks) {
    for (size_t i = 0; i + 1 < b.insns.size(); ++i) {
      if (b.insns[i + 1].op == Opcode::load && b.insns[i + 1].ops[1].reg == kStackReg)
        CHECK_FALSE(b.insns[i].is_intrinsic(IntrinsicKind::asan_check));
    }
  }
  RunResult r = run_program(p, bytes({9}));
  CHECK((r.final_reg_tags[3] & tag::kUser) != 0);  // still taint-checked
  CHECK((r.final_reg_tags[4] & tag::kUser) != 0);
}
