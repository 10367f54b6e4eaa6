#pragma once

#include <atomic>
#include <cstddef>
#include <new>
#include <utility>

namespace ann {

// Process-wide byte counter for tensor storage. Every Tensor buffer goes
// through TrackingAllocator, so live() is the number of bytes held by tensors
// and peak() the high-water mark since the last reset_peak().
class AllocTracker {
 public:
  static std::size_t live() { return live_.load(std::memory_order_relaxed); }
  static std::size_t peak() { return peak_.load(std::memory_order_relaxed); }
  static void reset_peak() { peak_.store(live(), std::memory_order_relaxed); }

  static void on_alloc(std::size_t bytes) {
    std::size_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak_.load(std::memory_order_relaxed);
    while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }
  static void on_free(std::size_t bytes) { live_.fetch_sub(bytes, std::memory_order_relaxed); }

 private:
  static inline std::atomic<std::size_t> live_{0};
  static inline std::atomic<std::size_t> peak_{0};
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    // 64-byte alignment keeps Eigen maps on the aligned fast path.
    auto* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
    AllocTracker::on_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    AllocTracker::on_free(n * sizeof(T));
    ::operator delete(p, std::align_val_t{64});
  }

  // Default-initializes, so sized construction leaves doubles unwritten;
  // Tensor zero-fills explicitly where it promises zeros.
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace ann
