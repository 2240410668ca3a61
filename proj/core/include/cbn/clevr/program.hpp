// SPDX-License-Identifier: Apache-2.0
//
// Functional question programs. A program is a list of nodes in topological
// order; each node names its inputs by index and the last node is the
// terminal whose value is the answer.
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cbn/clevr/scene.hpp"

namespace cbn::clevr {

enum class Op {
  scene,
  filter_size,
  filter_color,
  filter_material,
  filter_shape,
  relate,
  unique,
  count,
  exist,
  query_size,
  query_color,
  query_material,
  query_shape,
  equal_size,
  equal_color,
  equal_material,
  equal_shape,
  equal_integer,
  less_than,
  greater_than,
};

enum class Relation { left, right, above, below };

enum class Family { count, exist, compare_integer, query_attribute, compare_attribute };
inline constexpr std::array<Family, 5> kFamilies = {Family::count, Family::exist, Family::compare_integer,
                                                   Family::query_attribute, Family::compare_attribute};

std::string_view op_name(Op op);
Op op_from_name(std::string_view name);
std::string_view relation_name(Relation relation);
Relation relation_from_name(std::string_view name);
std::string_view family_name(Family family);
Family family_from_name(std::string_view name);

Op filter_op(Attribute attribute);
Op query_op(Attribute attribute);
Op equal_op(Attribute attribute);
/// Attribute handled by a filter_*, query_* or equal_* node.
std::optional<Attribute> op_attribute(Op op);
bool is_filter(Op op);

struct Node {
  Op op = Op::scene;
  int value = -1;           // attribute value for filters, Relation for relate
  std::vector<int> inputs;  // indices of earlier nodes

  bool operator==(const Node&) const = default;
};

struct Program {
  std::vector<Node> nodes;

  /// Appends a node and returns its index.
  int add(Op op, std::vector<int> inputs = {}, int value = -1);
  const Node& terminal() const;
  std::size_t length() const { return nodes.size(); }

  bool operator==(const Program&) const = default;
};

enum class ValueType { set, object, integer, boolean, attribute };

/// Throws ContractError when a node has the wrong arity, an input refers
/// forward, an input has the wrong type, or the terminal is not answer-typed.
void type_check(const Program& program);

/// Family implied by the terminal node.
Family family_of(const Program& program);

/// "filter_color[yellow]" and friends.
std::string node_string(const Node& node);
/// Comma-separated node strings.
std::string program_string(const Program& program);

/// [{"function": "...", "value": "...", "inputs": [...]}, ...]
std::string program_to_json(const Program& program);
Program program_from_json(const std::string& text);

// Fixed answer vocabulary: yes, no, 0..6, the colors, shapes, sizes and
// materials.
inline constexpr int kMaxCount = 6;
const std::vector<std::string>& answer_list();
int answer_index(std::string_view answer);
int answer_of_bool(bool value);
int answer_of_count(int count);
int answer_of_value(Attribute attribute, int value);
/// Count encoded by an answer index, or nullopt for non-numeric answers.
std::optional<int> count_of_answer(int answer);
/// Answers that a program of the given family can produce.
std::vector<int> family_answers(Family family);

}  // namespace cbn::clevr
