// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/sanitizers.hpp"

#include <stdexcept>

namespace shadowspec {

using namespace layout;

bool is_privileged(uint32_t addr) {
  if (addr >= kAsanShadowBase) return true;
  // Tag shadows of the user regions.
  if (addr >= tag_shadow(kStackBase) && addr < tag_shadow(kStackEnd - 1) + 1) return true;
  if (addr >= tag_shadow(kGlobalBase) && addr < tag_shadow(kHeapEnd - 1) + 1) return true;
  if (addr >= tag_shadow(kRealCodeBase) && addr < tag_shadow(kShadowCodeEnd - 1) + 1) return true;
  return false;
}

void verify_shadow_layout() {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw std::logic_error(std::string("shadow layout violation: ") + what);
  };
  const uint32_t probes[] = {kRealCodeBase, kRealCodeEnd - 1, kShadowCodeBase, kShadowCodeEnd - 1,
                             kGlobalBase,   kGlobalEnd - 1,   kHeapBase,       kHeapEnd - 1,
                             kStackBase,    kStackEnd - 1,    kStackTop};
  for (uint32_t a : probes) {
    uint32_t sh = asan_shadow(a);
    uint32_t tg = tag_shadow(a);
    check(sh != tg, "poison and tag shadows collide");
    check(is_privileged(sh), "poison shadow not privileged");
    check(is_privileged(tg), "tag shadow not privileged");
    check(!in_user_data(sh) && !in_code(sh), "poison shadow overlaps user space");
    check(!in_user_data(tg) && !in_code(tg), "tag shadow overlaps user space");
  }
  // The stack's tag shadow occupies 0x2000'0000-0x2FFF'FFFF.
  check(tag_shadow(kStackBase) == 0x2000'0000u, "stack tag base");
  check(asan_shadow(kStackTop) < 0x9000'0000u, "poison shadow bound");
}

namespace {

void check_user_range(uint32_t addr, uint32_t len) {
  if (len == 0 || !in_user_data(addr) || !in_user_data(addr + len - 1))
    throw std::runtime_error("shadow operation outside user space");
}

void logged_store(MemoryStore& mem, uint32_t addr, uint8_t value, TagLog* log) {
  uint8_t old = mem.load8(addr);
  if (old == value) return;
  if (log) log->push_back(TagLogEntry{addr, old});
  mem.store8(addr, value);
}

}  // namespace

void set_poison(MemoryStore& mem, uint32_t addr, uint32_t len, uint8_t value, TagLog* log) {
  check_user_range(addr, len);
  uint32_t first = addr >> 3;
  uint32_t last = (addr + len - 1) >> 3;
  for (uint32_t slot = first; slot <= last; ++slot)
    logged_store(mem, kAsanShadowBase + slot, value, log);
}

uint8_t poison_at(const MemoryStore& mem, uint32_t addr, uint32_t width) {
  uint32_t first = addr >> 3;
  uint32_t last = (addr + width - 1) >> 3;
  for (uint32_t slot = first; slot <= last; ++slot) {
    uint8_t v = mem.load8(kAsanShadowBase + slot);
    if (v != kShadowOk) return v;
  }
  return kShadowOk;
}

void taint_union(MemoryStore& mem, uint32_t addr, uint32_t len, TagSet tags, TagLog* log) {
  check_user_range(addr, len);
  for (uint32_t i = 0; i < len; ++i) {
    uint32_t sh = tag_shadow(addr + i);
    logged_store(mem, sh, static_cast<uint8_t>(mem.load8(sh) | tags), log);
  }
}

void taint_assign(MemoryStore& mem, uint32_t addr, uint32_t len, TagSet tags, TagLog* log) {
  check_user_range(addr, len);
  for (uint32_t i = 0; i < len; ++i) logged_store(mem, tag_shadow(addr + i), tags, log);
}

TagSet taint_get(const MemoryStore& mem, uint32_t addr, uint32_t len) {
  TagSet t = 0;
  for (uint32_t i = 0; i < len; ++i) t |= mem.load8(tag_shadow(addr + i));
  return t;
}

const char* violation_kind_name(uint8_t shadow_byte) {
  switch (shadow_byte) {
    case kShadowRetSlot: return "stack-oob";
    case kShadowRedZone: return "heap-oob";
    case kShadowOk: return "ok";
    default: return "poison";
  }
}

}  // namespace shadowspec
