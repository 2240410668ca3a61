// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "cbn/clevr/executor.hpp"
#include "cbn/clevr/generator.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/clevr/render.hpp"

namespace cbn::clevr {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

using json = nlohmann::json;

namespace {

constexpr std::array<SplitName, 3> kSplits = {SplitName::train, SplitName::val, SplitName::test};

std::size_t split_count(const DatasetConfig& c, SplitName s) {
  switch (s) {
    case SplitName::train: return c.n_train;
    case SplitName::val: return c.n_val;
    case SplitName::test: return c.n_test;
  }
  return 0;
}

json scene_to_json(const Scene& scene) {
  json objects = json::array();
  for (const auto& o : scene.objects) {
    objects.push_back({{"shape", value_name(Attribute::shape, static_cast<int>(o.shape))},
                       {"color", value_name(Attribute::color, static_cast<int>(o.color))},
                       {"size", value_name(Attribute::size, static_cast<int>(o.size))},
                       {"material", value_name(Attribute::material, static_cast<int>(o.material))},
                       {"x", o.x},
                       {"y", o.y},
                       {"radius", o.radius}});
  }
  return objects;
}

Scene scene_from_json(const json& objects, std::uint64_t seed, std::size_t image_size) {
  Scene scene{{}, seed, image_size};
  for (const auto& j : objects) {
    SceneObject o;
    o.shape = static_cast<ShapeKind>(value_from_name(Attribute::shape, j.at("shape").get<std::string>()));
    o.color = static_cast<Color>(value_from_name(Attribute::color, j.at("color").get<std::string>()));
    o.size = static_cast<Size>(value_from_name(Attribute::size, j.at("size").get<std::string>()));
    o.material = static_cast<Material>(value_from_name(Attribute::material, j.at("material").get<std::string>()));
    o.x = j.at("x").get<double>();
    o.y = j.at("y").get<double>();
    o.radius = j.at("radius").get<double>();
    scene.objects.push_back(o);
  }
  return scene;
}

json sample_to_json(const Sample& s, SplitName split) {
  return {{"split", split_name(split)},
          {"index", s.index},
          {"image_index", s.image_index},
          {"tokens", s.tokens},
          {"answer", s.answer},
          {"family", family_name(s.family)},
          {"program", json::parse(program_to_json(s.program))},
          {"program_length", s.program.length()},
          {"scene_seed", s.scene.seed},
          {"scene", scene_to_json(s.scene)}};
}

}  // namespace

void DatasetConfig::validate() const {
  if (n_train == 0 || n_val == 0 || n_test == 0) throw ConfigError("every split needs at least one sample");
  if (image_size < 32) throw ConfigError("image size must be at least 32");
  if (questions_per_scene == 0) throw ConfigError("questions per scene must be at least 1");
}

std::string_view split_name(SplitName split) {
  switch (split) {
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::test: return "test";
  }
  return "?";
}

SplitName split_from_name(std::string_view name) {
  for (SplitName s : kSplits) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::span<const float> Split::image(std::size_t i) const {
  if (i >= image_count()) throw IndexError("image index " + std::to_string(i) + " out of range");
  return std::span<const float>(pixels).subspan(i * image_numel(), image_numel());
}

const Split& Dataset::split(SplitName name) const {
  switch (name) {
    case SplitName::train: return train;
    case SplitName::val: return val;
    case SplitName::test: return test;
  }
  return train;
}

std::uint64_t split_offset(const DatasetConfig& config, SplitName split) {
  std::uint64_t offset = 0;
  for (SplitName s : kSplits) {
    if (s == split) return offset;
    offset += split_count(config, s);
  }
  return offset;
}

std::size_t split_scene_count(const DatasetConfig& config, SplitName split) {
  const std::size_t q = std::max<std::size_t>(1, config.questions_per_scene);
  return (split_count(config, split) + q - 1) / q;
}

std::uint64_t split_scene_offset(const DatasetConfig& config, SplitName split) {
  std::uint64_t offset = 0;
  for (SplitName s : kSplits) {
    if (s == split) return offset;
    offset += split_scene_count(config, s);
  }
  return offset;
}

Split generate_split(const DatasetConfig& config, SplitName split, std::size_t threads) {
  config.validate();
  Split out;
  out.name = split;
  out.image_size = config.image_size;
  const std::size_t n = split_count(config, split);
  const std::size_t per_scene = config.questions_per_scene;
  const std::size_t scenes = split_scene_count(config, split);
  out.samples.resize(n);
  out.pixels.assign(scenes * out.image_numel(), 0.0f);
  const std::uint64_t offset = split_offset(config, split);
  const std::uint64_t scene_offset = split_scene_offset(config, split);

  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t g = first; g < scenes; g += stride) {
      const std::size_t begin = g * per_scene;
      const std::size_t count = std::min(per_scene, n - begin);
      auto questions =
          generate_scene_questions(config.seed, scene_offset + g, offset + begin, count, config.image_size);
      render_into(questions.front().scene, config.image_size,
                  std::span<float>(out.pixels).subspan(g * out.image_numel(), out.image_numel()));
      for (std::size_t q = 0; q < count; ++q) {
        GeneratedSample& gs = questions[q];
        Sample& s = out.samples[begin + q];
        s.index = offset + begin + q;
        s.family = gs.family;
        s.tokens = std::move(gs.tokens);
        s.answer = gs.answer;
        s.program = std::move(gs.program);
        s.image_index = g;
        s.scene = std::move(gs.scene);
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, scenes));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return out;
}

Dataset generate_dataset(const DatasetConfig& config, std::size_t threads) {
  Dataset d;
  d.config = config;
  d.train = generate_split(config, SplitName::train, threads);
  d.val = generate_split(config, SplitName::val, threads);
  d.test = generate_split(config, SplitName::test, threads);
  return d;
}

std::string manifest_json(const DatasetConfig& config) {
  json families = json::array();
  for (Family f : kFamilies) families.push_back(family_name(f));
  json m = {{"format", "mini-clevr"},
            {"version", 1},
            {"seed", config.seed},
            {"image_size", config.image_size},
            {"questions_per_scene", config.questions_per_scene},
            {"counts", {{"train", config.n_train}, {"val", config.n_val}, {"test", config.n_test}}},
            {"images",
             {{"train", split_scene_count(config, SplitName::train)},
              {"val", split_scene_count(config, SplitName::val)},
              {"test", split_scene_count(config, SplitName::test)}}},
            {"answers", answer_list()},
            {"vocabulary", vocabulary()},
            {"families", families},
            {"files", {{"images", "images.bin"}, {"questions", "questions.jsonl"}}}};
  return m.dump(2) + "\n";
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
    throw OutputExistsError("output directory " + dir.string() + " is not empty (use force to overwrite)");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("manifest.json");
    out << manifest_json(dataset.config);
    if (!out) throw IoError("failed writing manifest.json");
  }
  {
    auto out = open("images.bin");
    for (SplitName s : kSplits) {
      const Split& split = dataset.split(s);
      const auto count = static_cast<std::uint32_t>(split.image_count());
      out.write(reinterpret_cast<const char*>(&count), sizeof count);
      out.write(reinterpret_cast<const char*>(split.pixels.data()),
                static_cast<std::streamsize>(split.pixels.size() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing images.bin");
  }
  {
    auto out = open("questions.jsonl");
    for (SplitName s : kSplits) {
      for (const auto& sample : dataset.split(s).samples) out << sample_to_json(sample, s).dump() << '\n';
    }
    if (!out) throw IoError("failed writing questions.jsonl");
  }
}

std::string build_dataset(const DatasetConfig& config, const std::filesystem::path& dir, bool force,
                          std::size_t threads) {
  config.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
    throw OutputExistsError("output directory " + dir.string() + " is not empty (use force to overwrite)");
  }
  write_dataset(generate_dataset(config, threads), dir, force);
  return manifest_json(config);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
    try {
      manifest = json::parse(in);
      d.config.seed = manifest.at("seed").get<std::uint64_t>();
      d.config.image_size = manifest.at("image_size").get<std::size_t>();
      d.config.n_train = manifest.at("counts").at("train").get<std::size_t>();
      d.config.n_val = manifest.at("counts").at("val").get<std::size_t>();
      d.config.n_test = manifest.at("counts").at("test").get<std::size_t>();
      d.config.questions_per_scene = manifest.at("questions_per_scene").get<std::size_t>();
      d.config.validate();
    } catch (const json::exception& e) {
      throw ArtifactError(std::string("malformed manifest.json: ") + e.what());
    } catch (const ConfigError& e) {
      throw ArtifactError(std::string("invalid manifest.json: ") + e.what());
    }
  }
  if (manifest.value("answers", json::array()) != json(answer_list())) {
    throw ArtifactError("dataset answer list differs from this build's answer list");
  }
  if (manifest.value("vocabulary", json::array()) != json(vocabulary())) {
    throw ArtifactError("dataset vocabulary differs from this build's vocabulary");
  }

  std::ifstream images(dir / "images.bin", std::ios::binary);
  if (!images) throw IoError("cannot open " + (dir / "images.bin").string());
  for (SplitName s : kSplits) {
    Split& split = s == SplitName::train ? d.train : s == SplitName::val ? d.val : d.test;
    split.name = s;
    split.image_size = d.config.image_size;
    std::uint32_t count = 0;
    images.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!images || count != split_scene_count(d.config, s)) {
      throw ArtifactError("images.bin: bad record count for split " + std::string(split_name(s)));
    }
    split.pixels.resize(count * split.image_numel());
    images.read(reinterpret_cast<char*>(split.pixels.data()),
                static_cast<std::streamsize>(split.pixels.size() * sizeof(float)));
    if (!images) throw ArtifactError("images.bin truncated in split " + std::string(split_name(s)));
  }
  if (images.peek() != std::char_traits<char>::eof()) throw ArtifactError("images.bin has trailing bytes");

  std::ifstream questions(dir / "questions.jsonl");
  if (!questions) throw IoError("cannot open " + (dir / "questions.jsonl").string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(questions, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const SplitName s = split_from_name(j.at("split").get<std::string>());
      Split& split = s == SplitName::train ? d.train : s == SplitName::val ? d.val : d.test;
      Sample sample;
      sample.index = j.at("index").get<std::uint64_t>();
      sample.image_index = j.at("image_index").get<std::size_t>();
      sample.tokens = j.at("tokens").get<std::vector<int>>();
      sample.answer = j.at("answer").get<int>();
      sample.family = family_from_name(j.at("family").get<std::string>());
      sample.program = program_from_json(j.at("program").dump());
      sample.scene = scene_from_json(j.at("scene"), j.at("scene_seed").get<std::uint64_t>(), d.config.image_size);
      if (sample.image_index >= split_scene_count(d.config, s)) throw ArtifactError("image_index out of range");
      if (sample.program.length() != j.at("program_length").get<std::size_t>()) {
        throw ArtifactError("program_length disagrees with the program");
      }
      split.samples.push_back(std::move(sample));
    } catch (const json::exception& e) {
      throw ArtifactError("questions.jsonl line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw ArtifactError("questions.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (SplitName s : kSplits) {
    if (d.split(s).samples.size() != split_count(d.config, s)) {
      throw ArtifactError("questions.jsonl: wrong number of " + std::string(split_name(s)) + " records");
    }
  }
  return d;
}

std::size_t verify_dataset(const Dataset& dataset) {
  std::size_t mismatches = 0;
  std::vector<float> buffer;
  for (SplitName s : kSplits) {
    const Split& split = dataset.split(s);
    buffer.resize(split.image_numel());
    for (const auto& sample : split.samples) {
      bool ok = sample_scene(sample.scene.seed, split.image_size) == sample.scene;
      if (ok) {
        try {
          ok = execute(sample.program, sample.scene) == sample.answer && family_of(sample.program) == sample.family;
        } catch (const Error&) {
          ok = false;
        }
      }
      if (ok) {
        render_into(sample.scene, split.image_size, buffer);
        const auto stored = split.image(sample.image_index);
        ok = std::memcmp(buffer.data(), stored.data(), buffer.size() * sizeof(float)) == 0;
      }
      if (!ok) ++mismatches;
    }
  }
  return mismatches;
}

}  // namespace cbn::clevr
