// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/executor.hpp"

#include <bit>

namespace cbn::clevr {

std::uint32_t related(const Scene& scene, int referent, Relation relation) {
  const auto& ref = scene.objects.at(static_cast<std::size_t>(referent));
  std::uint32_t out = 0;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (static_cast<int>(i) == referent) continue;
    const auto& o = scene.objects[i];
    bool hit = false;
    switch (relation) {
      case Relation::left: hit = o.x < ref.x; break;
      case Relation::right: hit = o.x > ref.x; break;
      case Relation::above: hit = o.y < ref.y; break;
      case Relation::below: hit = o.y > ref.y; break;
    }
    if (hit) out |= 1u << i;
  }
  return out;
}

std::vector<ExecValue> execute_trace(const Program& program, const Scene& scene) {
  type_check(program);
  if (scene.objects.size() > 32) throw ContractError("executor supports at most 32 objects");
  const std::uint32_t all = scene.objects.empty() ? 0u : static_cast<std::uint32_t>((std::uint64_t{1} << scene.objects.size()) - 1);
  std::vector<ExecValue> values;
  values.reserve(program.nodes.size());
  for (const Node& n : program.nodes) {
    auto in = [&](std::size_t k) -> const ExecValue& { return values[static_cast<std::size_t>(n.inputs[k])]; };
    ExecValue v;
    if (n.op == Op::scene) {
      v.set = all;
    } else if (is_filter(n.op)) {
      const Attribute a = *op_attribute(n.op);
      const std::uint32_t src = in(0).set;
      for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        if ((src >> i & 1u) && scene.objects[i].value(a) == n.value) v.set |= 1u << i;
      }
    } else if (n.op == Op::relate) {
      v.set = related(scene, in(0).object, static_cast<Relation>(n.value));
    } else if (n.op == Op::unique) {
      const std::uint32_t s = in(0).set;
      if (std::popcount(s) != 1) {
        throw InvalidProgramError("unique applied to a set of " + std::to_string(std::popcount(s)) + " objects");
      }
      v.type = ValueType::object;
      v.object = std::countr_zero(s);
    } else if (n.op == Op::count) {
      v.type = ValueType::integer;
      v.integer = std::popcount(in(0).set);
    } else if (n.op == Op::exist) {
      v.type = ValueType::boolean;
      v.boolean = in(0).set != 0;
    } else if (n.op >= Op::query_size && n.op <= Op::query_shape) {
      v.type = ValueType::attribute;
      v.attribute = *op_attribute(n.op);
      v.attribute_value = scene.objects[static_cast<std::size_t>(in(0).object)].value(v.attribute);
    } else if (n.op >= Op::equal_size && n.op <= Op::equal_shape) {
      const Attribute a = *op_attribute(n.op);
      v.type = ValueType::boolean;
      v.boolean = scene.objects[static_cast<std::size_t>(in(0).object)].value(a) ==
                  scene.objects[static_cast<std::size_t>(in(1).object)].value(a);
    } else {
      const int lhs = in(0).integer;
      const int rhs = in(1).integer;
      v.type = ValueType::boolean;
      v.boolean = n.op == Op::equal_integer ? lhs == rhs : n.op == Op::less_than ? lhs < rhs : lhs > rhs;
    }
    values.push_back(v);
  }
  return values;
}

int execute(const Program& program, const Scene& scene) {
  const ExecValue v = execute_trace(program, scene).back();
  switch (v.type) {
    case ValueType::integer: return answer_of_count(v.integer);
    case ValueType::boolean: return answer_of_bool(v.boolean);
    case ValueType::attribute: return answer_of_value(v.attribute, v.attribute_value);
    default: throw InvalidProgramError("program does not end in an answer");
  }
}

}  // namespace cbn::clevr
