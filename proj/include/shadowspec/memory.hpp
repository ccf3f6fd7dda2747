// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <unordered_map>

#include "shadowspec/isa.hpp"

namespace shadowspec {

// Sparse paged byte store over the full 32-bit space (user regions plus both
// shadow regions). Unbacked pages read as a per-region default: the poison
// shadow of the heap defaults to red-zone so unallocated heap is poisoned
// without materializing pages.
class MemoryStore {
 public:
  static constexpr uint32_t kPageShift = 12;
  static constexpr uint32_t kPageSize = 1u << kPageShift;

  static uint8_t default_byte(uint32_t addr) {
    return addr >= kHeapShadowBegin && addr < kHeapShadowEnd ? layout::kShadowRedZone
                                                             : layout::kShadowOk;
  }

  uint8_t load8(uint32_t addr) const {
    const Page* p = page_at(addr >> kPageShift);
    return p ? p->bytes[addr & (kPageSize - 1)] : default_byte(addr);
  }

  void store8(uint32_t addr, uint8_t v) {
    Page& p = materialize(addr >> kPageShift);
    p.bytes[addr & (kPageSize - 1)] = v;
  }

  uint32_t load(uint32_t addr, int width) const {
    uint32_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<uint32_t>(load8(addr + i)) << (8 * i);
    return v;
  }

  void store(uint32_t addr, uint32_t v, int width) {
    for (int i = 0; i < width; ++i) store8(addr + i, static_cast<uint8_t>(v >> (8 * i)));
  }

  void clear() {
    pages_.clear();
    cache_.fill({UINT32_MAX, nullptr});
  }

  void copy_from(const MemoryStore& other) {
    clear();
    for (const auto& [id, page] : other.pages_) pages_[id] = std::make_unique<Page>(*page);
  }

  // Byte-exact comparison treating unbacked pages as default content.
  // Returns false and fills `diff` with the first mismatching address.
  bool equals(const MemoryStore& other, std::string* diff = nullptr) const;

  size_t page_count() const { return pages_.size(); }

 private:
  struct Page {
    std::array<uint8_t, kPageSize> bytes;
  };

  static constexpr uint32_t kHeapShadowBegin = layout::kAsanShadowBase + (layout::kHeapBase >> 3);
  static constexpr uint32_t kHeapShadowEnd = layout::kAsanShadowBase + (layout::kHeapEnd >> 3);
  static_assert((kHeapShadowBegin & (kPageSize - 1)) == 0, "heap shadow must be page aligned");

  // Small direct-mapped cache in front of the page map; data, tag-shadow and
  // poison-shadow pages of one access land in different slots.
  struct CacheSlot {
    uint32_t id = UINT32_MAX;
    Page* page = nullptr;
  };

  const Page* page_at(uint32_t id) const {
    CacheSlot& slot = cache_[id & (kCacheSlots - 1)];
    if (slot.id == id) return slot.page;
    auto it = pages_.find(id);
    if (it == pages_.end()) return nullptr;
    slot = {id, it->second.get()};
    return slot.page;
  }

  Page& materialize(uint32_t id) {
    CacheSlot& slot = cache_[id & (kCacheSlots - 1)];
    if (slot.id == id && slot.page) return *slot.page;
    auto it = pages_.find(id);
    if (it == pages_.end()) {
      auto page = std::make_unique<Page>();
      std::memset(page->bytes.data(), default_byte(id << kPageShift), kPageSize);
      it = pages_.emplace(id, std::move(page)).first;
    }
    slot = {id, it->second.get()};
    return *slot.page;
  }

  static constexpr uint32_t kCacheSlots = 16;
  std::unordered_map<uint32_t, std::unique_ptr<Page>> pages_;
  mutable std::array<CacheSlot, kCacheSlots> cache_{};
};

}  // namespace shadowspec
