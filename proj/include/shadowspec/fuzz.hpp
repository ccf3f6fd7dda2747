// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <random>

#include "shadowspec/vm.hpp"

namespace shadowspec {

using Input = std::vector<uint8_t>;

// Deterministic input mutation: bit flips, arithmetic nudges, inserts,
// deletes and splices against the current corpus. Never returns empty.
Input mutate(const Input& base, std::mt19937_64& rng, const std::vector<Input>& corpus);

struct FuzzConfig {
  uint64_t executions = 1000;
  int workers = 1;
  uint64_t seed = 1;
  RunConfig run;
  std::optional<double> wall_seconds;  // optional wall-clock budget (non-deterministic)
};

struct FuzzResult {
  ReportStore store;
  CoverageSets coverage;
  Counters counters;
  EpisodeStats episodes;
  uint64_t executed = 0;
  std::vector<Input> corpus;  // retained inputs (new coverage)
  BranchStatsTable stats;
};

// Coverage-guided loop. Runs in fixed-size rounds whose inputs and merges
// depend only on (seeds, seed, execution index), so results are identical for
// any worker count.
FuzzResult fuzz_loop(const ExecImage& img, const FuzzConfig& cfg, std::vector<Input> seeds,
                     const std::function<void(uint64_t, size_t, size_t)>& progress = {});

// --- Artificial gadget injection ------------------------------------------------

constexpr int kNumGadgetTemplates = 5;
const char* gadget_template_name(int id);

struct InjectionRecord {
  int template_id = 0;
  std::string site_label;               // the conditional-branch successor spliced into
  std::vector<std::string> block_labels;  // blocks holding injected code
};

struct InjectionGroundTruth {
  std::vector<InjectionRecord> records;

  std::string to_json() const;
  static InjectionGroundTruth from_json(const std::string& text);
};

// Block labels eligible as splice points: successors of conditional branches.
std::vector<std::string> eligible_sites(const Program& program);

// Splices template gadgets at the given sites and switches the program into
// harness mode: taint sources disabled, only the designated user-input global
// carries the USER tag, massage promotion off.
Program inject_gadgets(const Program& base, const std::vector<int>& template_ids,
                       const std::vector<std::string>& sites, InjectionGroundTruth* gt);

// Seeded variant: picks `template_ids.size()` distinct eligible sites.
Program inject_gadgets_seeded(const Program& base, const std::vector<int>& template_ids,
                              uint64_t seed, InjectionGroundTruth* gt);

struct InjectionScore {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  bool precision_valid = false;
  double precision = 0.0;  // TP/(TP+FP)
  double recall = 0.0;     // TP/GT
};

InjectionScore score_injection(const std::vector<GadgetReport>& reports,
                               const InjectionGroundTruth& gt);

}  // namespace shadowspec
