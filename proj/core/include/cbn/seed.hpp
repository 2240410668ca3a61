// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace cbn {

/// SplitMix64 finalizer; a bijective scramble of 64-bit values.
std::uint64_t mix64(std::uint64_t x);

/// Independent stream seed for a named subsystem ("data", "init", "shuffle")
/// and an optional index within it.
std::uint64_t derive_seed(std::uint64_t root, std::string_view subsystem, std::uint64_t index = 0);

}  // namespace cbn
