#pragma once

#include <atomic>
#include <cstdint>

namespace capskd {

// Process-wide counters for recoverable numeric guards. Not part of any
// result; tests and the CLI read them to surface soft warnings.
struct Diagnostics {
  static std::atomic<std::uint64_t> floored_power_values;
  static std::atomic<std::uint64_t> floored_variance_windows;
  static std::atomic<std::uint64_t> zero_gram_guards;
  static std::atomic<std::uint64_t> skipped_optimizer_steps;
  static std::atomic<std::uint64_t> degenerate_pcc;
  static std::atomic<std::uint64_t> fraction_missing_class;
  static void reset();
};

}  // namespace capskd
