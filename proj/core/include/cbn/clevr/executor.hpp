// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "cbn/clevr/program.hpp"
#include "cbn/clevr/scene.hpp"
#include "cbn/error.hpp"

namespace cbn::clevr {

/// Raised when a program cannot be evaluated on a scene, e.g. unique over a
/// set whose size is not one.
class InvalidProgramError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Result of one node. Sets are bitmasks over object indices.
struct ExecValue {
  ValueType type = ValueType::set;
  std::uint32_t set = 0;
  int object = -1;
  int integer = 0;
  bool boolean = false;
  Attribute attribute = Attribute::size;
  int attribute_value = -1;
};

/// Values of every node, in program order.
std::vector<ExecValue> execute_trace(const Program& program, const Scene& scene);

/// Answer index of the terminal node.
int execute(const Program& program, const Scene& scene);

/// Objects related to `referent`: strictly smaller x for left, larger x for
/// right, smaller y for above, larger y for below. The referent itself is
/// never included.
std::uint32_t related(const Scene& scene, int referent, Relation relation);

}  // namespace cbn::clevr
