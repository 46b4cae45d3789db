#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string_view>

namespace deq {

enum class LedgerPhase { kForward = 0, kBackward = 1 };

std::string_view phase_name(LedgerPhase phase);

// Counts intermediate scalars retained by tapes and solvers. This is a
// platform-independent stand-in for activation memory: it only sees buffers
// that are explicitly registered, never allocator behavior.
class MemoryLedger {
 public:
  void acquire(std::size_t scalars, LedgerPhase phase);
  void release(std::size_t scalars);
  // Zero every counter; used between training steps.
  void reset();

  std::size_t current() const { return current_; }
  std::size_t peak() const { return peak_; }
  std::size_t phase_peak(LedgerPhase phase) const { return phase_peak_[static_cast<std::size_t>(phase)]; }

 private:
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
  std::array<std::size_t, 2> phase_peak_{};
};

// RAII registration of a buffer with an optional ledger.
class LedgerHold {
 public:
  LedgerHold() = default;
  LedgerHold(MemoryLedger* ledger, std::size_t scalars, LedgerPhase phase);
  ~LedgerHold();
  LedgerHold(const LedgerHold&) = delete;
  LedgerHold& operator=(const LedgerHold&) = delete;
  LedgerHold(LedgerHold&& other) noexcept;
  LedgerHold& operator=(LedgerHold&& other) noexcept;

  // Change the registered size, e.g. when a history buffer grows.
  void resize(std::size_t scalars);

 private:
  MemoryLedger* ledger_ = nullptr;
  std::size_t scalars_ = 0;
  LedgerPhase phase_ = LedgerPhase::kForward;
};

// Runs one full step under a fresh ledger and returns the ledger.
MemoryLedger ledger_measure(const std::function<void(MemoryLedger&)>& step);

}  // namespace deq
