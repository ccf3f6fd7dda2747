// SPDX-License-Identifier: Apache-2.0
#include <random>

#include "doctest.h"
#include "shadowspec/assembler.hpp"
#include "shadowspec/fuzz.hpp"
#include "shadowspec/oracle.hpp"
#include "support/corpus.hpp"

using namespace shadowspec;
using namespace shadowspec::testing;

TEST_CASE("mutate: never empty, reproducible, splice bounded") {
  std::vector<Input> corpus = {bytes({1, 2, 3}), bytes({9, 8, 7, 6})};
  std::mt19937_64 rng1(5), rng2(5);
  Input from_empty = mutate({}, rng1, corpus);
  CHECK(!from_empty.empty());
  std::mt19937_64 rng3(5);
  CHECK(mutate({}, rng3, corpus) == from_empty);

  std::mt19937_64 rng4(17);
  for (int i = 0; i < 200; ++i) {
    Input a = bytes({1, 2, 3, 4, 5});
    Input m = mutate(a, rng4, corpus);
    CHECK(m.size() <= a.size() + 64);  // splice never exceeds the length cap
    CHECK(!m.empty());
  }
  (void)rng2;
}

TEST_CASE("fuzz_loop: finds the canonical gadget classes within 1k executions") {
  Program p = instrument(corpus_program("canonical_v1.s"), config_for(Policy::kasper));
  ExecImage img(p);
  FuzzConfig fc;
  fc.executions = 1000;
  fc.seed = 42;
  FuzzResult r = fuzz_loop(img, fc, {});
  CHECK(r.store.has_class(GadgetClass::user_mds));
  CHECK(r.store.has_class(GadgetClass::user_cache));
  CHECK(r.executed == 1000);
  CHECK(r.corpus.size() >= 1);
}

TEST_CASE("fuzz_loop: zero budget is a no-op") {
  Program p = instrument(corpus_program("canonical_v1.s"), config_for(Policy::kasper));
  ExecImage img(p);
  FuzzConfig fc;
  fc.executions = 0;
  FuzzResult r = fuzz_loop(img, fc, {bytes({1})});
  CHECK(r.executed == 0);
  CHECK(r.store.size() == 0);
}

TEST_CASE("fuzz_loop: worker count does not change the outcome") {
  Program p = instrument(corpus_program("user_port.s"), config_for(Policy::kasper));
  ExecImage img(p);
  FuzzConfig one;
  one.executions = 300;
  one.seed = 7;
  one.workers = 1;
  FuzzConfig four = one;
  four.workers = 4;
  FuzzResult a = fuzz_loop(img, one, {bytes({1})});
  FuzzResult b = fuzz_loop(img, four, {bytes({1})});
  CHECK(a.store.to_text(Policy::kasper) == b.store.to_text(Policy::kasper));
  CHECK(a.coverage.normal == b.coverage.normal);
  CHECK(a.coverage.spec == b.coverage.spec);
  CHECK(a.corpus.size() == b.corpus.size());
}

TEST_CASE("fuzz_loop: coverage sets grow monotonically") {
  Program p = instrument(corpus_program("toy_parser.s"), config_for(Policy::kasper));
  ExecImage img(p);
  FuzzConfig fc;
  fc.executions = 400;
  fc.seed = 3;
  std::vector<size_t> sizes;
  FuzzResult r = fuzz_loop(img, fc, {bytes({107, 61, 49, 44})},
                           [&](uint64_t, size_t, size_t) {
                             sizes.push_back(0);  // progress callback fires per round
                           });
  CHECK(!sizes.empty());
  CHECK(r.coverage.normal.size() > 0);
  CHECK(r.coverage.spec.size() > 0);
}

TEST_CASE("inject: sites, ground truth and harness mode") {
  Program parser = corpus_program("toy_parser.s");
  auto sites = eligible_sites(parser);
  REQUIRE(sites.size() >= 5);
  InjectionGroundTruth gt;
  Program injected = inject_gadgets(parser, {0, 1, 2},
                                    {"k_letter", "k_digit", "fc_body"}, &gt);
  CHECK(gt.records.size() == 3);
  CHECK(injected.meta.harness_mode);
  CHECK(injected.meta.user_global == "inj_user");
  for (const auto& rec : gt.records) {
    for (const auto& lbl : rec.block_labels) CHECK(injected.find_block(lbl) != nullptr);
  }
  // ground truth serializes and parses
  InjectionGroundTruth back = InjectionGroundTruth::from_json(gt.to_json());
  CHECK(back.records.size() == gt.records.size());
  CHECK(back.records[0].block_labels == gt.records[0].block_labels);

  SUBCASE("invalid splice point is rejected") {
    CHECK_THROWS(inject_gadgets(parser, {0}, {"main"}, nullptr));
  }
  SUBCASE("zero templates leave the program unchanged") {
    InjectionGroundTruth none;
    Program same = inject_gadgets(parser, {}, {}, &none);
    CHECK(none.records.empty());
    CHECK_FALSE(same.meta.harness_mode);
    CHECK(same.count_instructions(Origin::original) ==
          parser.count_instructions(Origin::original));
  }
}

TEST_CASE("inject: harness mode tags only the designated global") {
  Program parser = corpus_program("toy_parser.s");
  InjectionGroundTruth gt;
  Program injected = inject_gadgets(parser, {0}, {"k_letter"}, &gt);
  Program inst = instrument(injected, config_for(Policy::kasper));
  // an input whose first byte is out of range for the template array: the
  // injected gadget fires, the parser's own data stays untagged
  RunResult r = run_program(inst, bytes({200, 107, 61, 49}));
  CHECK(r.has_report(GadgetClass::user_mds));
  for (const auto& rep : r.reports) {
    bool in_template = false;
    for (const auto& lbl : gt.records[0].block_labels) in_template |= rep.site.block == lbl;
    CHECK(in_template);
  }
}

TEST_CASE("score_injection: formulas and edge cases") {
  InjectionGroundTruth gt;
  for (int i = 0; i < 10; ++i)
    gt.records.push_back({0, "s" + std::to_string(i), {"s" + std::to_string(i)}});
  auto rep = [](const std::string& block) {
    GadgetReport r;
    r.cls = GadgetClass::user_mds;
    r.site = {block, 0};
    return r;
  };
  SUBCASE("all found, none extra") {
    std::vector<GadgetReport> reports;
    for (int i = 0; i < 10; ++i) reports.push_back(rep("s" + std::to_string(i)));
    InjectionScore s = score_injection(reports, gt);
    CHECK(s.tp == 10);
    CHECK(s.fp == 0);
    CHECK(s.precision == doctest::Approx(1.0));
    CHECK(s.recall == doctest::Approx(1.0));
  }
  SUBCASE("8 of 10 found: recall 80%") {
    std::vector<GadgetReport> reports;
    for (int i = 0; i < 8; ++i) reports.push_back(rep("s" + std::to_string(i)));
    InjectionScore s = score_injection(reports, gt);
    CHECK(s.recall == doctest::Approx(0.8));
    CHECK(s.fn == 2);
  }
  SUBCASE("no reports: precision undefined, recall zero") {
    InjectionScore s = score_injection({}, gt);
    CHECK_FALSE(s.precision_valid);
    CHECK(s.recall == doctest::Approx(0.0));
  }
  SUBCASE("unmatched reports are false positives") {
    std::vector<GadgetReport> reports = {rep("s0"), rep("elsewhere")};
    InjectionScore s = score_injection(reports, gt);
    CHECK(s.tp == 1);
    CHECK(s.fp == 1);
    CHECK(s.precision == doctest::Approx(0.5));
  }
}

TEST_CASE("oracle: canonical program keys equal the instrumented pipeline") {
  Program base = corpus_program("canonical_v1.s");
  Program inst = instrument(base, config_for(Policy::kasper));
  for (int input : {3, 20, 200}) {
    RunResult r = run_program(inst, bytes({input}));
    OracleResult o = oracle_explore(base, bytes({input}),
                                    OracleConfig::from_meta(inst.meta, Policy::kasper));
    CHECK(r.report_keys() == o.keys);
  }
}

TEST_CASE("oracle: fence variant explores nothing") {
  Program base = corpus_program("canonical_v1_fenced.s");
  OracleResult o = oracle_explore(base, bytes({20}),
                                  OracleConfig::from_meta(ProgramMeta{}, Policy::kasper));
  CHECK(o.keys.empty());
}

TEST_CASE("oracle: three-misprediction analog appears only at depth 3") {
  Program base = corpus_program("nested_port.s");
  OracleConfig cfg = OracleConfig::from_meta(ProgramMeta{}, Policy::kasper);
  cfg.max_nest_depth = 2;
  OracleResult shallow = oracle_explore(base, bytes({1}), cfg);
  bool port_shallow = false;
  for (const auto& k : shallow.keys) port_shallow |= k.cls == GadgetClass::massage_port;
  CHECK_FALSE(port_shallow);
  cfg.max_nest_depth = 3;
  OracleResult deep = oracle_explore(base, bytes({1}), cfg);
  bool port_deep = false;
  for (const auto& k : deep.keys) port_deep |= k.cls == GadgetClass::massage_port;
  CHECK(port_deep);
}
