// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "shadowspec/isa.hpp"
#include "shadowspec/sanitizers.hpp"

namespace shadowspec {

enum class GadgetClass : uint8_t {
  user_mds,
  user_cache,
  user_port,
  massage_mds,
  massage_cache,
  massage_port,
  sf_oob,
};

const char* gadget_class_name(GadgetClass c);
std::optional<GadgetClass> gadget_class_from_name(const std::string& s);

struct GadgetReport {
  Policy policy = Policy::kasper;
  GadgetClass cls = GadgetClass::sf_oob;
  SiteRef site;                // original-copy identity of the faulting instruction
  std::vector<int> chain;      // misprediction chain, outermost branch first
  uint32_t resolved_pc = 0;    // real-copy address in the reporting program
  std::string symbol;          // function+offset
  uint32_t access_addr = 0;    // loads/stores; 0 for port reports
  uint8_t access_width = 0;
  uint64_t input_hash = 0;     // first-seen input
  uint32_t count = 1;
  uint32_t episode_originals = 0;
  int depth = 0;
};

struct ReportKey {
  GadgetClass cls;
  SiteRef site;
  std::vector<int> chain;
  auto operator<=>(const ReportKey&) const = default;
};

inline ReportKey key_of(const GadgetReport& r) { return ReportKey{r.cls, r.site, r.chain}; }

// --- Kasper policy (pure classification) --------------------------------------

struct LoadSinkInput {
  TagSet addr_tag = 0;   // tag of the address operand (base register)
  TagSet value_tag = 0;  // union of the loaded bytes' tags
  bool oob = false;      // poison test result (false for allowlisted accesses)
  bool massage_enabled = true;
};

struct LoadSinkResult {
  TagSet value_tag = 0;
  bool user_mds = false;
  bool massage_mds = false;
};

// Promotion rules for a load during simulation: a USER-tagged pointer going
// out of bounds or a MASSAGE-tagged pointer anywhere yields SECRET (reported
// as MDS); an out-of-bounds load additionally yields MASSAGE data. The
// massage promotion is suppressed when the address already carries SECRET -
// that access is reported as a Cache transmitter instead.
LoadSinkResult kasper_on_load(const LoadSinkInput& in);

struct AddrUseResult {
  bool user_cache = false;
  bool massage_cache = false;
};
AddrUseResult kasper_on_addr_use(TagSet addr_tag);

struct BranchSinkResult {
  bool user_port = false;
  bool massage_port = false;
};
BranchSinkResult kasper_on_branch(TagSet flags_tag);

// SpecFuzz policy: any out-of-bounds access during simulation is a gadget.
inline bool specfuzz_classify(bool oob) { return oob; }

// --- Report store --------------------------------------------------------------

// Deduplicates by (class, site, chain); the first occurrence keeps full detail,
// later ones bump the counter. Serialization is sorted and byte-deterministic.
class ReportStore {
 public:
  void add(const GadgetReport& r);
  void merge(const ReportStore& other);
  size_t size() const { return records_.size(); }
  std::vector<GadgetReport> sorted() const;
  bool has_class(GadgetClass c) const;

  std::string to_text(Policy policy) const;
  static std::vector<GadgetReport> parse_text(const std::string& text);

 private:
  std::map<ReportKey, GadgetReport> records_;
};

}  // namespace shadowspec
