// SPDX-License-Identifier: Apache-2.0
// Generated-program property suites: smaller twins of the heavyweight checks
// the acceptance binary runs at full size.
#include "doctest.h"
#include "shadowspec/assembler.hpp"
#include "shadowspec/cfg.hpp"
#include "shadowspec/oracle.hpp"
#include "support/corpus.hpp"
#include "support/program_generator.hpp"

using namespace shadowspec;
using namespace shadowspec::testing;

namespace {

std::vector<std::vector<uint8_t>> sample_inputs() {
  return {bytes({20, 3, 60, 1, 9, 0, 44, 7}), bytes({0}), bytes({255, 255, 12, 97, 61, 44, 5, 8})};
}

}  // namespace

TEST_CASE("property: oracle equivalence on generated programs") {
  for (uint64_t seed = 1000; seed < 1060; ++seed) {
    CAPTURE(seed);
    Program base = assemble(generate_program(seed));
    for (bool nesting : {false, true}) {
      RewriteConfig cfg = config_for(Policy::kasper, InstrMode::shadows, nesting, 3);
      Program inst = instrument(base, cfg);
      OracleConfig oc = OracleConfig::from_meta(inst.meta, Policy::kasper);
      for (const auto& input : sample_inputs()) {
        RunResult r = run_program(inst, input);
        OracleResult o = oracle_explore(base, input, oc);
        CHECK(r.report_keys() == o.keys);
      }
    }
  }
}

TEST_CASE("property: oracle equivalence under the specfuzz policy") {
  for (uint64_t seed = 2000; seed < 2030; ++seed) {
    CAPTURE(seed);
    Program base = assemble(generate_program(seed));
    RewriteConfig cfg = config_for(Policy::specfuzz, InstrMode::shadows, true, 3);
    Program inst = instrument(base, cfg);
    OracleConfig oc = OracleConfig::from_meta(inst.meta, Policy::specfuzz);
    for (const auto& input : sample_inputs()) {
      RunResult r = run_program(inst, input);
      OracleResult o = oracle_explore(base, input, oc);
      CHECK(r.report_keys() == o.keys);
    }
  }
}

TEST_CASE("property: rollback soundness on generated programs") {
  RunConfig rc;
  rc.debug_snapshots = true;
  for (uint64_t seed = 3000; seed < 3100; ++seed) {
    CAPTURE(seed);
    Program inst = instrument(assemble(generate_program(seed)), config_for(Policy::kasper));
    for (const auto& input : sample_inputs()) {
      RunResult r = run_program(inst, input, rc);  // throws on any snapshot mismatch
      CHECK(r.counters.originals + r.counters.instrumentation == r.counters.steps);
    }
  }
}

TEST_CASE("property: shadows and mixed report identical gadget sets") {
  for (uint64_t seed = 4000; seed < 4040; ++seed) {
    CAPTURE(seed);
    Program base = assemble(generate_program(seed));
    Program shadows = instrument(base, config_for(Policy::kasper, InstrMode::shadows));
    Program mixed = instrument(base, config_for(Policy::kasper, InstrMode::mixed));
    for (const auto& input : sample_inputs()) {
      RunResult a = run_program(shadows, input);
      RunResult b = run_program(mixed, input);
      CHECK(a.report_keys() == b.report_keys());
      CHECK(a.coverage.normal == b.coverage.normal);
      CHECK(a.status == b.status);
    }
  }
}

TEST_CASE("property: budget bound on every episode") {
  for (uint64_t seed = 5000; seed < 5040; ++seed) {
    CAPTURE(seed);
    Program inst = instrument(assemble(generate_program(seed)), config_for(Policy::kasper));
    uint64_t bound = 250 + 50 + static_cast<uint64_t>(inst.max_block_originals);
    for (const auto& input : sample_inputs()) {
      RunResult r = run_program(inst, input);
      CHECK(r.episodes.max_episode_originals <= bound);
    }
  }
}

TEST_CASE("property: eager and lazy speculative coverage agree") {
  RunConfig lazy, eager;
  eager.eager_coverage = true;
  for (uint64_t seed = 6000; seed < 6030; ++seed) {
    CAPTURE(seed);
    Program inst = instrument(assemble(generate_program(seed)), config_for(Policy::kasper));
    for (const auto& input : sample_inputs()) {
      RunResult a = run_program(inst, input, lazy);
      RunResult b = run_program(inst, input, eager);
      CHECK(a.coverage.spec == b.coverage.spec);
    }
  }
}

TEST_CASE("property: no secret tag survives outside a simulation episode") {
  // sinks only run in shadow copies and rollback reverts every tag change,
  // so committed register/flags tags can never carry SECRET
  for (const auto& name : corpus_names()) {
    CAPTURE(name);
    Program p = instrument(corpus_program(name), config_for(Policy::kasper));
    for (int input : {1, 20, 200}) {
      RunResult r = run_program(p, bytes({input}));
      for (TagSet t : r.final_reg_tags) CHECK((t & tag::kSecretMask) == 0);
      CHECK((r.final_flags_tag & tag::kSecretMask) == 0);
    }
  }
  for (uint64_t seed = 8000; seed < 8030; ++seed) {
    CAPTURE(seed);
    Program p = instrument(assemble(generate_program(seed)), config_for(Policy::kasper));
    RunResult r = run_program(p, bytes({20, 3, 60, 1, 9, 0, 44, 7}));
    for (TagSet t : r.final_reg_tags) CHECK((t & tag::kSecretMask) == 0);
  }
}

TEST_CASE("property: observed indirect targets land in flagged blocks") {
  auto check_program = [](Program base, const std::vector<uint8_t>& input) {
    build_cfg(base);
    base.stamp_sites();
    base.finalize();
    RunResult r = run_program(base, input);
    for (uint32_t target : r.observed_indirect) {
      const BasicBlock* owner = nullptr;
      for (const auto& fn : base.functions)
        for (const auto& b : fn.blocks)
          if (target >= b.addr && target < b.addr + b.insns.size() * layout::kInsnStride)
            owner = &b;
      if (!owner) continue;  // garbage target; the run faulted right after
      CHECK(owner->indirect_target);
    }
  };
  for (const auto& name : corpus_names()) {
    CAPTURE(name);
    check_program(corpus_program(name), bytes({1, 44, 61, 200, 9, 0, 3, 5}));
  }
  for (uint64_t seed = 7000; seed < 7030; ++seed) {
    CAPTURE(seed);
    check_program(assemble(generate_program(seed)), bytes({7, 61, 1, 0, 44, 2, 9, 33}));
  }
}
