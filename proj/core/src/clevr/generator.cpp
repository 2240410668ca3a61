// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/generator.hpp"

#include <algorithm>
#include <bit>

#include "cbn/clevr/executor.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/seed.hpp"

namespace cbn::clevr {

namespace {

using Filters = std::vector<std::pair<Attribute, int>>;

struct Chain {
  Filters filters;
  std::optional<Relation> relation;
  Filters referent;
};

int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

// k distinct attributes from `allowed`, in canonical order.
std::vector<Attribute> pick_attributes(std::mt19937_64& rng, std::vector<Attribute> allowed, int k) {
  std::shuffle(allowed.begin(), allowed.end(), rng);
  allowed.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(allowed.size()))));
  std::sort(allowed.begin(), allowed.end());
  return allowed;
}

std::vector<Attribute> all_but(std::optional<Attribute> excluded) {
  std::vector<Attribute> out;
  for (Attribute a : kAttributes) {
    if (a != excluded) out.push_back(a);
  }
  return out;
}

// Filters describing object `anchor`, or random values when anchor < 0.
Filters make_filters(std::mt19937_64& rng, const Scene& scene, int anchor, std::optional<Attribute> excluded) {
  const auto attrs = pick_attributes(rng, all_but(excluded), uniform(rng, 1, 3));
  Filters out;
  for (Attribute a : attrs) {
    const int v = anchor >= 0 ? scene.objects[static_cast<std::size_t>(anchor)].value(a)
                              : uniform(rng, 0, attribute_cardinality(a) - 1);
    out.emplace_back(a, v);
  }
  return out;
}

int random_object(std::mt19937_64& rng, const Scene& scene, std::uint32_t among) {
  if (among == 0) return -1;
  int k = uniform(rng, 0, std::popcount(among) - 1);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (among >> i & 1u) {
      if (k-- == 0) return static_cast<int>(i);
    }
  }
  return -1;
}

std::uint32_t all_objects(const Scene& scene) { return static_cast<std::uint32_t>((1u << scene.objects.size()) - 1); }

// A chain whose target filters describe some object among the candidates
// (anchored) or use random values. Relate hops anchor their referent.
Chain make_chain(std::mt19937_64& rng, const Scene& scene, bool allow_relate, bool anchored,
                 std::optional<Attribute> excluded) {
  Chain c;
  std::uint32_t candidates = all_objects(scene);
  if (allow_relate && coin(rng, 0.35)) {
    const int ref = random_object(rng, scene, candidates);
    c.referent = make_filters(rng, scene, ref, std::nullopt);
    c.relation = static_cast<Relation>(uniform(rng, 0, 3));
    candidates = related(scene, ref, *c.relation);
  }
  const int anchor = anchored ? random_object(rng, scene, candidates) : -1;
  c.filters = make_filters(rng, scene, anchor, excluded);
  return c;
}

int emit_filters(Program& p, int input, const Filters& filters) {
  for (const auto& [a, v] : filters) input = p.add(filter_op(a), {input}, v);
  return input;
}

int emit_chain(Program& p, const Chain& c) {
  int head = p.add(Op::scene);
  if (c.relation) {
    head = emit_filters(p, head, c.referent);
    head = p.add(Op::unique, {head});
    head = p.add(Op::relate, {head}, static_cast<int>(*c.relation));
  }
  return emit_filters(p, head, c.filters);
}

Program draw_program(std::mt19937_64& rng, const Scene& scene, Family family, std::optional<Attribute> attribute) {
  Program p;
  switch (family) {
    case Family::count:
    case Family::exist: {
      const Chain c = make_chain(rng, scene, true, coin(rng, 0.6), std::nullopt);
      p.add(family == Family::count ? Op::count : Op::exist, {emit_chain(p, c)});
      break;
    }
    case Family::query_attribute: {
      const Attribute q = attribute ? *attribute : kAttributes[static_cast<std::size_t>(uniform(rng, 0, 3))];
      const Chain c = make_chain(rng, scene, true, true, q);
      const int u = p.add(Op::unique, {emit_chain(p, c)});
      p.add(query_op(q), {u});
      break;
    }
    case Family::compare_integer: {
      const Op op = std::array{Op::equal_integer, Op::less_than, Op::greater_than}[static_cast<std::size_t>(uniform(rng, 0, 2))];
      const Chain a = make_chain(rng, scene, false, coin(rng, 0.6), std::nullopt);
      const Chain b = make_chain(rng, scene, false, coin(rng, 0.6), std::nullopt);
      if (a.filters == b.filters) return {};
      const int ca = p.add(Op::count, {emit_chain(p, a)});
      const int cb = p.add(Op::count, {emit_chain(p, b)});
      p.add(op, {ca, cb});
      break;
    }
    case Family::compare_attribute: {
      const Attribute q = kAttributes[static_cast<std::size_t>(uniform(rng, 0, 3))];
      const Chain a = make_chain(rng, scene, false, true, q);
      const Chain b = make_chain(rng, scene, false, true, q);
      const int ua = p.add(Op::unique, {emit_chain(p, a)});
      const int ub = p.add(Op::unique, {emit_chain(p, b)});
      p.add(equal_op(q), {ua, ub});
      break;
    }
  }
  return p;
}

// Executes, returning nullopt when a unique fails or two compared objects
// coincide.
std::optional<int> try_execute(const Program& p, const Scene& scene) {
  try {
    const auto trace = execute_trace(p, scene);
    const Node& t = p.terminal();
    if (t.op >= Op::equal_size && t.op <= Op::equal_shape) {
      if (trace[static_cast<std::size_t>(t.inputs[0])].object == trace[static_cast<std::size_t>(t.inputs[1])].object) {
        return std::nullopt;
      }
    }
    return execute(p, scene);
  } catch (const InvalidProgramError&) {
    return std::nullopt;
  }
}

std::optional<Attribute> attribute_of_answer(int answer) {
  const std::string& word = answer_list().at(static_cast<std::size_t>(answer));
  for (Attribute a : kAttributes) {
    for (int v = 0; v < attribute_cardinality(a); ++v) {
      if (value_name(a, v) == word) return a;
    }
  }
  return std::nullopt;
}

}  // namespace

std::optional<Program> sample_program(std::mt19937_64& rng, const Scene& scene, Family family,
                                      std::optional<int> target_answer) {
  std::optional<Attribute> attribute;
  if (target_answer && family == Family::query_attribute) attribute = attribute_of_answer(*target_answer);
  for (int draw = 0; draw < kProgramDraws; ++draw) {
    Program p = draw_program(rng, scene, family, attribute);
    if (p.nodes.empty()) continue;
    const auto answer = try_execute(p, scene);
    if (!answer) continue;
    if (target_answer && *answer != *target_answer) continue;
    return p;
  }
  return std::nullopt;
}

Family family_for_index(std::uint64_t global_index) { return kFamilies[global_index % kFamilies.size()]; }

std::vector<GeneratedSample> generate_scene_questions(std::uint64_t root_seed, std::uint64_t scene_index,
                                                      std::uint64_t first_question, std::size_t count,
                                                      std::size_t image_size) {
  auto draw_target = [](std::mt19937_64& rng, Family family) {
    if (family == Family::query_attribute) {
      const Attribute a = kAttributes[static_cast<std::size_t>(uniform(rng, 0, 3))];
      return answer_of_value(a, uniform(rng, 0, attribute_cardinality(a) - 1));
    }
    const auto answers = family_answers(family);
    return answers[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(answers.size()) - 1))];
  };

  const std::uint64_t scene_root = derive_seed(root_seed, "scene", scene_index);
  for (std::uint64_t attempt = 0;; ++attempt) {
    const Scene scene = sample_scene(derive_seed(scene_root, "attempt", attempt), image_size);
    std::vector<GeneratedSample> out;
    for (std::size_t q = 0; q < count; ++q) {
      const std::uint64_t index = first_question + q;
      GeneratedSample g;
      g.family = family_for_index(index);
      std::mt19937_64 rng(derive_seed(derive_seed(root_seed, "question", index), "attempt", attempt));
      std::optional<Program> program;
      for (int draw = 0; draw < kBalancedTargetDraws && !program; ++draw) {
        program = sample_program(rng, scene, g.family, draw_target(rng, g.family));
      }
      if (!program) program = sample_program(rng, scene, g.family);
      if (!program) break;
      g.scene = scene;
      g.program = std::move(*program);
      g.answer = execute(g.program, g.scene);
      g.words = verbalize(g.program, rng);
      g.tokens = tokenize(g.words);
      out.push_back(std::move(g));
    }
    if (out.size() == count) return out;
  }
}

GeneratedSample generate_sample(std::uint64_t root_seed, std::uint64_t global_index, std::size_t image_size) {
  return std::move(generate_scene_questions(root_seed, global_index, global_index, 1, image_size).front());
}

}  // namespace cbn::clevr
