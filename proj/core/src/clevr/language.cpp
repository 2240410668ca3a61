// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/language.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>

namespace cbn::clevr {

namespace {

const std::vector<std::string> kTemplateWords = {
    "above",   "any",      "are",   "as",     "below",    "big",      "blue",    "circle",    "circles",
    "color",   "cyan",     "does",  "fewer",  "green",    "have",     "how",     "is",        "large",
    "left",    "many",     "material", "matte", "metallic", "more",   "object",  "objects",   "of",
    "purple",  "red",      "right", "rubber", "same",     "shape",    "shiny",   "size",      "small",
    "square",  "squares",  "than",  "the",    "there",    "thing",    "things",  "tiny",      "triangle",
    "triangles", "what",   "yellow",
};

std::vector<std::string> build_vocabulary() {
  std::vector<std::string> words = kTemplateWords;
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  words.insert(words.begin(), std::string(kPadWord));
  return words;
}

const std::map<std::string, int, std::less<>>& word_ids() {
  static const auto ids = [] {
    std::map<std::string, int, std::less<>> m;
    const auto& v = vocabulary();
    for (std::size_t i = 1; i < v.size(); ++i) m.emplace(v[i], static_cast<int>(i));
    return m;
  }();
  return ids;
}

struct Phrase {
  std::vector<std::pair<Attribute, int>> filters;  // canonical order
  std::optional<Relation> relation;
  std::vector<std::pair<Attribute, int>> referent;
};

// Set-valued chain ending at `index`: [scene, filters...] optionally preceded
// by [scene, referent filters..., unique, relate].
Phrase read_phrase(const Program& p, int index) {
  Phrase phrase;
  int i = index;
  while (is_filter(p.nodes.at(static_cast<std::size_t>(i)).op)) {
    const Node& n = p.nodes[static_cast<std::size_t>(i)];
    phrase.filters.emplace_back(*op_attribute(n.op), n.value);
    i = n.inputs.at(0);
  }
  std::reverse(phrase.filters.begin(), phrase.filters.end());
  const Node& head = p.nodes.at(static_cast<std::size_t>(i));
  if (head.op == Op::relate) {
    phrase.relation = static_cast<Relation>(head.value);
    const Node& u = p.nodes.at(static_cast<std::size_t>(head.inputs.at(0)));
    if (u.op != Op::unique) throw ContractError("relate must follow unique");
    const Phrase ref = read_phrase(p, u.inputs.at(0));
    if (ref.relation) throw ContractError("only one relate hop is verbalized");
    phrase.referent = ref.filters;
  } else if (head.op != Op::scene) {
    throw ContractError("unexpected '" + std::string(op_name(head.op)) + "' inside a filter chain");
  }
  return phrase;
}

class Speaker {
 public:
  explicit Speaker(std::mt19937_64& rng) : rng_(rng) {}

  void say(std::initializer_list<std::string_view> words) {
    for (auto w : words) out.emplace_back(w);
  }
  void pick(std::string_view a, std::string_view b) {
    std::uniform_int_distribution<int> coin(0, 1);
    out.emplace_back(coin(rng_) == 0 ? a : b);
  }

  void adjective(Attribute a, int value) {
    if (a == Attribute::size) {
      if (value == static_cast<int>(Size::small)) pick("small", "tiny");
      else pick("large", "big");
    } else if (a == Attribute::material) {
      if (value == static_cast<int>(Material::matte)) pick("matte", "rubber");
      else pick("shiny", "metallic");
    } else {
      out.emplace_back(value_name(a, value));
    }
  }

  void noun_phrase(const std::vector<std::pair<Attribute, int>>& filters, bool plural) {
    std::optional<int> shape;
    for (const auto& [a, v] : filters) {
      if (a == Attribute::shape) shape = v;
      else adjective(a, v);
    }
    if (shape) {
      out.push_back(std::string(value_name(Attribute::shape, *shape)) + (plural ? "s" : ""));
    } else if (plural) {
      pick("things", "objects");
    } else {
      pick("thing", "object");
    }
  }

  void relation(Relation r) {
    switch (r) {
      case Relation::left: say({"left", "of"}); break;
      case Relation::right: say({"right", "of"}); break;
      case Relation::above: say({"above"}); break;
      case Relation::below: say({"below"}); break;
    }
  }

  // Phrase with its optional "REL the S" tail.
  void full_phrase(const Phrase& p, bool plural) {
    noun_phrase(p.filters, plural);
    if (p.relation) {
      relation(*p.relation);
      say({"the"});
      noun_phrase(p.referent, false);
    }
  }

  std::vector<std::string> out;

 private:
  std::mt19937_64& rng_;
};

const Node& input_node(const Program& p, const Node& n, std::size_t k) {
  return p.nodes.at(static_cast<std::size_t>(n.inputs.at(k)));
}

}  // namespace

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = build_vocabulary();
  return words;
}

std::vector<int> tokenize(std::span<const std::string> words) {
  const auto& ids = word_ids();
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const auto it = ids.find(w);
    if (it == ids.end()) throw VocabularyError("word '" + w + "' is not in the vocabulary");
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::string> detokenize(std::span<const int> ids) {
  const auto& v = vocabulary();
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id <= kPadId || static_cast<std::size_t>(id) >= v.size()) {
      throw VocabularyError("token id " + std::to_string(id) + " is not a word");
    }
    out.push_back(v[static_cast<std::size_t>(id)]);
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view sentence) {
  std::istringstream in{std::string(sentence)};
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> verbalize(const Program& program, std::mt19937_64& rng) {
  type_check(program);
  Speaker s(rng);
  const Node& t = program.terminal();
  switch (family_of(program)) {
    case Family::count: {
      const Phrase p = read_phrase(program, t.inputs[0]);
      s.say({"how", "many"});
      s.noun_phrase(p.filters, true);
      if (p.relation) {
        s.say({"are"});
        s.relation(*p.relation);
        s.say({"the"});
        s.noun_phrase(p.referent, false);
      } else {
        s.say({"are", "there"});
      }
      break;
    }
    case Family::exist: {
      s.say({"are", "there", "any"});
      s.full_phrase(read_phrase(program, t.inputs[0]), true);
      break;
    }
    case Family::query_attribute: {
      const Node& u = input_node(program, t, 0);
      if (u.op != Op::unique) throw ContractError("query must follow unique");
      s.say({"what", attribute_name(*op_attribute(t.op)), "is", "the"});
      s.full_phrase(read_phrase(program, u.inputs[0]), false);
      break;
    }
    case Family::compare_integer: {
      const Node& a = input_node(program, t, 0);
      const Node& b = input_node(program, t, 1);
      if (a.op != Op::count || b.op != Op::count) throw ContractError("integer comparison must compare two counts");
      const Phrase pa = read_phrase(program, a.inputs[0]);
      const Phrase pb = read_phrase(program, b.inputs[0]);
      if (t.op == Op::equal_integer) {
        s.say({"are", "there", "as", "many"});
        s.full_phrase(pa, true);
        s.say({"as"});
      } else {
        s.say({"are", "there", t.op == Op::greater_than ? "more" : "fewer"});
        s.full_phrase(pa, true);
        s.say({"than"});
      }
      s.full_phrase(pb, true);
      break;
    }
    case Family::compare_attribute: {
      const Node& a = input_node(program, t, 0);
      const Node& b = input_node(program, t, 1);
      if (a.op != Op::unique || b.op != Op::unique) throw ContractError("attribute comparison must compare two objects");
      const Phrase pa = read_phrase(program, a.inputs[0]);
      const Phrase pb = read_phrase(program, b.inputs[0]);
      const std::string_view attr = attribute_name(*op_attribute(t.op));
      std::uniform_int_distribution<int> coin(0, 1);
      const bool does = coin(rng) == 1;
      s.say({does ? "does" : "is", "the"});
      s.full_phrase(pa, false);
      if (does) s.say({"have"});
      s.say({"the", "same", attr, "as", "the"});
      s.full_phrase(pb, false);
      break;
    }
  }
  return std::move(s.out);
}

}  // namespace cbn::clevr
