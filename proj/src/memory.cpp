// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/memory.hpp"

#include <cstdio>
#include <set>

namespace shadowspec {

bool MemoryStore::equals(const MemoryStore& other, std::string* diff) const {
  std::set<uint32_t> ids;
  for (const auto& [id, _] : pages_) ids.insert(id);
  for (const auto& [id, _] : other.pages_) ids.insert(id);
  for (uint32_t id : ids) {
    const Page* a = page_at(id);
    const Page* b = other.page_at(id);
    if (a && b) {
      if (a->bytes == b->bytes) continue;
    }
    uint8_t def = default_byte(id << kPageShift);
    for (uint32_t off = 0; off < kPageSize; ++off) {
      uint8_t va = a ? a->bytes[off] : def;
      uint8_t vb = b ? b->bytes[off] : def;
      if (va != vb) {
        if (diff) {
          char buf[96];
          std::snprintf(buf, sizeof(buf), "memory mismatch at 0x%08x: %02x vs %02x",
                        (id << kPageShift) + off, va, vb);
          *diff = buf;
        }
        return false;
      }
    }
  }
  return true;
}

}  // namespace shadowspec
