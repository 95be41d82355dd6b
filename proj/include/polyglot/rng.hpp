// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace polyglot {

/// Counter-based random generator. The n-th draw is a pure function of
/// (seed, stream, n), so the full state is three integers and a run can be
/// resumed exactly from a checkpoint.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0);

  /// Derives an independent generator for a named consumer ("dropout", "data", ...).
  [[nodiscard]] CounterRng named(std::string_view name) const;
  [[nodiscard]] CounterRng substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Standard normal (Box-Muller, no cached second value).
  double normal();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::uint64_t stream() const { return stream_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
  std::uint64_t key_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
/// FNV-1a over bytes, then mixed. Stable across platforms.
std::uint64_t stable_hash(std::string_view bytes);

}  // namespace polyglot
