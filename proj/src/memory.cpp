#include "serkd/memory.hpp"

#include <atomic>

namespace serkd::memory {
namespace {

std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};

}  // namespace

std::size_t current_bytes() noexcept { return g_current.load(); }
std::size_t peak_bytes() noexcept { return g_peak.load(); }
void reset_peak() noexcept { g_peak.store(g_current.load()); }

void note_allocation(std::size_t bytes) noexcept {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void note_release(std::size_t bytes) noexcept { g_current.fetch_sub(bytes); }

PeakScope::PeakScope() noexcept : baseline_(current_bytes()) { reset_peak(); }

std::size_t PeakScope::peak_above_baseline() const noexcept {
  const std::size_t peak = peak_bytes();
  return peak > baseline_ ? peak - baseline_ : 0;
}

}  // namespace serkd::memory
