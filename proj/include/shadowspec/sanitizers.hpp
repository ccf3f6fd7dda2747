// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "shadowspec/memory.hpp"

namespace shadowspec {

// Tag shadow bits, one bit per tag. SECRET carries its provenance (which rule
// promoted it) so reports can be classified User-* vs Massage-*.
namespace tag {
constexpr uint8_t kUser = 1u << 0;
constexpr uint8_t kMassage = 1u << 1;
constexpr uint8_t kSecretUser = 1u << 2;
constexpr uint8_t kSecretMassage = 1u << 3;
constexpr uint8_t kSecretMask = kSecretUser | kSecretMassage;
}  // namespace tag

using TagSet = uint8_t;

// A logged write to either shadow (poison or tag bytes); replayed newest-first
// on rollback.
struct TagLogEntry {
  uint32_t addr = 0;
  uint8_t old_byte = 0;
};
using TagLog = std::vector<TagLogEntry>;

// Asserts the scaled region table: user regions are mutually disjoint and
// both shadow translations land in privileged space, distinct from each other.
// Cheap; runs at VM boot.
void verify_shadow_layout();

bool is_privileged(uint32_t addr);

// --- Poison shadow -----------------------------------------------------------
// Whole-slot poisoning at 8:1 granularity; accesses are <= 4 bytes and objects
// word-aligned, so partial slot encodings never arise.

void set_poison(MemoryStore& mem, uint32_t addr, uint32_t len, uint8_t value, TagLog* log);
inline void poison_range(MemoryStore& mem, uint32_t addr, uint32_t len, TagLog* log = nullptr) {
  set_poison(mem, addr, len, layout::kShadowRedZone, log);
}
inline void unpoison_range(MemoryStore& mem, uint32_t addr, uint32_t len, TagLog* log = nullptr) {
  set_poison(mem, addr, len, layout::kShadowOk, log);
}
inline void poison_ret_slot(MemoryStore& mem, uint32_t addr, TagLog* log = nullptr) {
  set_poison(mem, addr, 4, layout::kShadowRetSlot, log);
}

// Returns the first nonzero shadow byte covering [addr, addr+width), or 0 when
// every touched byte is addressable.
uint8_t poison_at(const MemoryStore& mem, uint32_t addr, uint32_t width);

// --- Tag shadow --------------------------------------------------------------

void taint_union(MemoryStore& mem, uint32_t addr, uint32_t len, TagSet tags, TagLog* log);
void taint_assign(MemoryStore& mem, uint32_t addr, uint32_t len, TagSet tags, TagLog* log);
TagSet taint_get(const MemoryStore& mem, uint32_t addr, uint32_t len);

const char* violation_kind_name(uint8_t shadow_byte);

}  // namespace shadowspec
