// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/program.hpp"

#include <array>

#include <json.hpp>

#include "cbn/error.hpp"

namespace cbn::clevr {

namespace {

constexpr std::array<std::string_view, 20> kOpNames = {
    "scene",          "filter_size",   "filter_color",   "filter_material", "filter_shape",
    "relate",         "unique",        "count",          "exist",           "query_size",
    "query_color",    "query_material", "query_shape",   "equal_size",      "equal_color",
    "equal_material", "equal_shape",   "equal_integer",  "less_than",       "greater_than",
};
constexpr std::array<std::string_view, 4> kRelationNames = {"left", "right", "above", "below"};
constexpr std::array<std::string_view, 5> kFamilyNames = {"count", "exist", "compare_integer", "query_attribute",
                                                          "compare_attribute"};

template <std::size_t N>
std::size_t find_name(const std::array<std::string_view, N>& names, std::string_view name, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return i;
  }
  throw IndexError("unknown " + std::string(what) + " '" + std::string(name) + "'");
}

std::vector<std::string> build_answers() {
  std::vector<std::string> out = {"yes", "no"};
  for (int i = 0; i <= kMaxCount; ++i) out.push_back(std::to_string(i));
  for (Attribute a : {Attribute::color, Attribute::shape, Attribute::size, Attribute::material}) {
    for (int v = 0; v < attribute_cardinality(a); ++v) out.emplace_back(value_name(a, v));
  }
  return out;
}

}  // namespace

std::string_view op_name(Op op) { return kOpNames.at(static_cast<std::size_t>(op)); }
Op op_from_name(std::string_view name) { return static_cast<Op>(find_name(kOpNames, name, "program function")); }
std::string_view relation_name(Relation relation) { return kRelationNames.at(static_cast<std::size_t>(relation)); }
Relation relation_from_name(std::string_view name) {
  return static_cast<Relation>(find_name(kRelationNames, name, "relation"));
}
std::string_view family_name(Family family) { return kFamilyNames.at(static_cast<std::size_t>(family)); }
Family family_from_name(std::string_view name) { return static_cast<Family>(find_name(kFamilyNames, name, "family")); }

Op filter_op(Attribute attribute) { return static_cast<Op>(static_cast<int>(Op::filter_size) + static_cast<int>(attribute)); }
Op query_op(Attribute attribute) { return static_cast<Op>(static_cast<int>(Op::query_size) + static_cast<int>(attribute)); }
Op equal_op(Attribute attribute) { return static_cast<Op>(static_cast<int>(Op::equal_size) + static_cast<int>(attribute)); }

std::optional<Attribute> op_attribute(Op op) {
  const int i = static_cast<int>(op);
  for (Op base : {Op::filter_size, Op::query_size, Op::equal_size}) {
    const int b = static_cast<int>(base);
    if (i >= b && i < b + 4) return static_cast<Attribute>(i - b);
  }
  return std::nullopt;
}

bool is_filter(Op op) { return op >= Op::filter_size && op <= Op::filter_shape; }

int Program::add(Op op, std::vector<int> inputs, int value) {
  nodes.push_back({op, value, std::move(inputs)});
  return static_cast<int>(nodes.size()) - 1;
}

const Node& Program::terminal() const {
  if (nodes.empty()) throw ContractError("empty program");
  return nodes.back();
}

void type_check(const Program& program) {
  if (program.nodes.empty()) throw ContractError("empty program");
  std::vector<ValueType> types;
  for (std::size_t i = 0; i < program.nodes.size(); ++i) {
    const Node& n = program.nodes[i];
    const std::string where = "node " + std::to_string(i) + " (" + std::string(op_name(n.op)) + ")";
    for (int in : n.inputs) {
      if (in < 0 || static_cast<std::size_t>(in) >= i) throw ContractError(where + " references a later or invalid node");
    }
    auto expect = [&](std::initializer_list<ValueType> wanted) {
      if (n.inputs.size() != wanted.size()) {
        throw ContractError(where + " expects " + std::to_string(wanted.size()) + " inputs");
      }
      std::size_t k = 0;
      for (ValueType w : wanted) {
        if (types[static_cast<std::size_t>(n.inputs[k++])] != w) throw ContractError(where + " has an input of the wrong type");
      }
    };
    ValueType out;
    if (n.op == Op::scene) {
      expect({});
      out = ValueType::set;
    } else if (is_filter(n.op)) {
      expect({ValueType::set});
      if (n.value < 0 || n.value >= attribute_cardinality(*op_attribute(n.op))) {
        throw ContractError(where + " has an out-of-range value");
      }
      out = ValueType::set;
    } else if (n.op == Op::relate) {
      expect({ValueType::object});
      if (n.value < 0 || n.value >= 4) throw ContractError(where + " has an unknown relation");
      out = ValueType::set;
    } else if (n.op == Op::unique) {
      expect({ValueType::set});
      out = ValueType::object;
    } else if (n.op == Op::count) {
      expect({ValueType::set});
      out = ValueType::integer;
    } else if (n.op == Op::exist) {
      expect({ValueType::set});
      out = ValueType::boolean;
    } else if (n.op >= Op::query_size && n.op <= Op::query_shape) {
      expect({ValueType::object});
      out = ValueType::attribute;
    } else if (n.op >= Op::equal_size && n.op <= Op::equal_shape) {
      expect({ValueType::object, ValueType::object});
      out = ValueType::boolean;
    } else {
      expect({ValueType::integer, ValueType::integer});
      out = ValueType::boolean;
    }
    if (!is_filter(n.op) && n.op != Op::relate && n.value != -1) throw ContractError(where + " takes no value");
    types.push_back(out);
  }
  const ValueType last = types.back();
  if (last == ValueType::set || last == ValueType::object) throw ContractError("program does not end in an answer");
}

Family family_of(const Program& program) {
  const Op op = program.terminal().op;
  if (op == Op::count) return Family::count;
  if (op == Op::exist) return Family::exist;
  if (op == Op::equal_integer || op == Op::less_than || op == Op::greater_than) return Family::compare_integer;
  if (op >= Op::query_size && op <= Op::query_shape) return Family::query_attribute;
  if (op >= Op::equal_size && op <= Op::equal_shape) return Family::compare_attribute;
  throw ContractError("program terminal '" + std::string(op_name(op)) + "' has no family");
}

namespace {

std::optional<std::string> value_string(const Node& n) {
  if (is_filter(n.op)) return std::string(value_name(*op_attribute(n.op), n.value));
  if (n.op == Op::relate) return std::string(relation_name(static_cast<Relation>(n.value)));
  return std::nullopt;
}

}  // namespace

std::string node_string(const Node& node) {
  std::string out(op_name(node.op));
  if (auto v = value_string(node)) out += "[" + *v + "]";
  return out;
}

std::string program_string(const Program& program) {
  std::string out;
  for (const auto& n : program.nodes) {
    if (!out.empty()) out += ", ";
    out += node_string(n);
  }
  return out;
}

std::string program_to_json(const Program& program) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : program.nodes) {
    nlohmann::json j;
    j["function"] = op_name(n.op);
    if (auto v = value_string(n)) {
      j["value"] = *v;
    } else {
      j["value"] = nullptr;
    }
    j["inputs"] = n.inputs;
    nodes.push_back(std::move(j));
  }
  return nodes.dump();
}

Program program_from_json(const std::string& text) {
  Program program;
  try {
    const auto nodes = nlohmann::json::parse(text);
    for (const auto& j : nodes) {
      Node n;
      n.op = op_from_name(j.at("function").get<std::string>());
      n.inputs = j.at("inputs").get<std::vector<int>>();
      if (!j.at("value").is_null()) {
        const auto v = j.at("value").get<std::string>();
        if (is_filter(n.op)) {
          n.value = value_from_name(*op_attribute(n.op), v);
        } else if (n.op == Op::relate) {
          n.value = static_cast<int>(relation_from_name(v));
        } else {
          throw ContractError("function '" + std::string(op_name(n.op)) + "' takes no value");
        }
      }
      program.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("malformed program JSON: ") + e.what());
  }
  type_check(program);
  return program;
}

const std::vector<std::string>& answer_list() {
  static const std::vector<std::string> answers = build_answers();
  return answers;
}

int answer_index(std::string_view answer) {
  const auto& answers = answer_list();
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i] == answer) return static_cast<int>(i);
  }
  throw IndexError("unknown answer '" + std::string(answer) + "'");
}

int answer_of_bool(bool value) { return value ? 0 : 1; }

int answer_of_count(int count) {
  if (count < 0 || count > kMaxCount) throw IndexError("count " + std::to_string(count) + " outside 0.." + std::to_string(kMaxCount));
  return 2 + count;
}

int answer_of_value(Attribute attribute, int value) { return answer_index(value_name(attribute, value)); }

std::optional<int> count_of_answer(int answer) {
  if (answer >= 2 && answer <= 2 + kMaxCount) return answer - 2;
  return std::nullopt;
}

std::vector<int> family_answers(Family family) {
  std::vector<int> out;
  switch (family) {
    case Family::count:
      for (int c = 0; c <= kMaxCount; ++c) out.push_back(answer_of_count(c));
      break;
    case Family::exist:
    case Family::compare_integer:
    case Family::compare_attribute:
      out = {answer_of_bool(true), answer_of_bool(false)};
      break;
    case Family::query_attribute:
      for (std::size_t i = 2 + kMaxCount + 1; i < answer_list().size(); ++i) out.push_back(static_cast<int>(i));
      break;
  }
  return out;
}

}  // namespace cbn::clevr
