// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/rng.hpp"

#include <cmath>
#include <numbers>

namespace polyglot {

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t stable_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter)
    : seed_(seed), stream_(stream), counter_(counter) {
  key_ = mix64(seed_ ^ mix64(stream_ + 0x9e3779b97f4a7c15ULL));
}

CounterRng CounterRng::named(std::string_view name) const {
  return CounterRng(seed_, mix64(stream_ ^ stable_hash(name)));
}

CounterRng CounterRng::substream(std::uint64_t id) const {
  return CounterRng(seed_, mix64(stream_ * 0x9e3779b97f4a7c15ULL + id + 1));
}

std::uint64_t CounterRng::next_u64() {
  const std::uint64_t z = key_ + (counter_ + 1) * 0x9e3779b97f4a7c15ULL;
  ++counter_;
  return mix64(z);
}

double CounterRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
  // Multiply-shift; the bias is below 2^-64 * n and irrelevant here.
  const unsigned __int128 product = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(product >> 64);
}

}  // namespace polyglot
