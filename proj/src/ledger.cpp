#include "deq/ledger.hpp"

#include <algorithm>
#include <utility>

namespace deq {

std::string_view phase_name(LedgerPhase phase) {
  return phase == LedgerPhase::kForward ? "forward" : "backward";
}

void MemoryLedger::acquire(std::size_t scalars, LedgerPhase phase) {
  current_ += scalars;
  peak_ = std::max(peak_, current_);
  auto& pp = phase_peak_[static_cast<std::size_t>(phase)];
  pp = std::max(pp, current_);
}

void MemoryLedger::release(std::size_t scalars) { current_ -= std::min(current_, scalars); }

void MemoryLedger::reset() {
  current_ = 0;
  peak_ = 0;
  phase_peak_ = {};
}

LedgerHold::LedgerHold(MemoryLedger* ledger, std::size_t scalars, LedgerPhase phase)
    : ledger_(ledger), scalars_(scalars), phase_(phase) {
  if (ledger_) ledger_->acquire(scalars_, phase_);
}

LedgerHold::~LedgerHold() {
  if (ledger_) ledger_->release(scalars_);
}

LedgerHold::LedgerHold(LedgerHold&& other) noexcept
    : ledger_(std::exchange(other.ledger_, nullptr)), scalars_(other.scalars_), phase_(other.phase_) {}

LedgerHold& LedgerHold::operator=(LedgerHold&& other) noexcept {
  if (this != &other) {
    if (ledger_) ledger_->release(scalars_);
    ledger_ = std::exchange(other.ledger_, nullptr);
    scalars_ = other.scalars_;
    phase_ = other.phase_;
  }
  return *this;
}

void LedgerHold::resize(std::size_t scalars) {
  if (!ledger_) {
    scalars_ = scalars;
    return;
  }
  if (scalars > scalars_) {
    ledger_->acquire(scalars - scalars_, phase_);
  } else {
    ledger_->release(scalars_ - scalars);
  }
  scalars_ = scalars;
}

MemoryLedger ledger_measure(const std::function<void(MemoryLedger&)>& step) {
  MemoryLedger ledger;
  if (step) step(ledger);
  return ledger;
}

}  // namespace deq
