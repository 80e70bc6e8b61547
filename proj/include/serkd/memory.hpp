#pragma once

#include <cstddef>
#include <new>

namespace serkd::memory {

// Process-wide byte counters for every buffer allocated through
// CountingAllocator (tensor values, gradients, kernel scratch).
std::size_t current_bytes() noexcept;
std::size_t peak_bytes() noexcept;
void reset_peak() noexcept;

void note_allocation(std::size_t bytes) noexcept;
void note_release(std::size_t bytes) noexcept;

/// Measures the peak number of bytes allocated above the level that was live
/// when the scope was opened.
class PeakScope {
 public:
  PeakScope() noexcept;
  std::size_t peak_above_baseline() const noexcept;

 private:
  std::size_t baseline_;
};

}  // namespace serkd::memory

namespace serkd {

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    memory::note_allocation(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::note_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace serkd
