// SPDX-License-Identifier: Apache-2.0
#include "cbn/model.hpp"

#include <cmath>
#include <random>

#include <json.hpp>

#include "cbn/error.hpp"
#include "cbn/ops.hpp"

namespace cbn {

using json = nlohmann::json;

ModelConfig ModelConfig::desk(std::size_t vocab_size, std::size_t n_answers) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.n_answers = n_answers;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t vocab_size, std::size_t n_answers) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.n_answers = n_answers;
  c.embed_dim = 200;
  c.gru_hidden = 4096;
  c.n_blocks = 3;
  c.block_channels = 128;
  c.stem_channels = 128;
  c.classifier_channels = 512;
  c.mlp_hidden = 1024;
  c.image_size = 224;
  c.stem_layers = 4;  // 224 -> 14, the extractor's feature grid
  return c;
}

ModelConfig ModelConfig::tiny(std::size_t vocab_size, std::size_t n_answers) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.n_answers = n_answers;
  c.embed_dim = 3;
  c.gru_hidden = 4;
  c.n_blocks = 1;
  c.block_channels = 4;
  c.stem_channels = 4;
  c.classifier_channels = 4;
  c.mlp_hidden = 5;
  c.image_size = 8;
  return c;
}

std::size_t ModelConfig::feature_size() const {
  std::size_t s = image_size;
  for (std::size_t i = 0; i < stem_layers; ++i) s = (s + 2 - 3) / 2 + 1;
  return s;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(embed_dim, "embed_dim");
  positive(gru_hidden, "gru_hidden");
  positive(n_blocks, "n_blocks");
  positive(block_channels, "block_channels");
  positive(classifier_channels, "classifier_channels");
  positive(mlp_hidden, "mlp_hidden");
  positive(n_answers, "n_answers");
  positive(stem_channels, "stem_channels");
  if (n_answers < 2) throw ConfigError("model config: need at least two answers");
  std::size_t s = image_size;
  for (std::size_t i = 0; i < stem_layers; ++i) {
    if (s < 2) throw ConfigError("model config: image_size too small for the stem");
    s = (s + 2 - 3) / 2 + 1;
  }
  if (s < 1 || image_size < 2) throw ConfigError("model config: image_size too small");
  if (!(eps > 0)) throw ConfigError("model config: eps must be positive");
  if (!(momentum > 0 && momentum < 1)) throw ConfigError("model config: momentum must lie in (0,1)");
}

std::string ModelConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["embed_dim"] = embed_dim;
  j["gru_hidden"] = gru_hidden;
  j["n_blocks"] = n_blocks;
  j["block_channels"] = block_channels;
  j["classifier_channels"] = classifier_channels;
  j["mlp_hidden"] = mlp_hidden;
  j["n_answers"] = n_answers;
  j["image_size"] = image_size;
  j["stem_layers"] = stem_layers;
  j["stem_channels"] = stem_channels;
  j["eps"] = eps;
  j["momentum"] = momentum;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  auto read = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  try {
    read("vocab_size", c.vocab_size);
    read("embed_dim", c.embed_dim);
    read("gru_hidden", c.gru_hidden);
    read("n_blocks", c.n_blocks);
    read("block_channels", c.block_channels);
    read("classifier_channels", c.classifier_channels);
    read("mlp_hidden", c.mlp_hidden);
    read("n_answers", c.n_answers);
    read("image_size", c.image_size);
    read("stem_layers", c.stem_layers);
    read("stem_channels", c.stem_channels);
    read("eps", c.eps);
    read("momentum", c.momentum);
    read("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config field has the wrong type: ") + e.what());
  }
  return c;
}

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    t.set_requires_grad();
    return t;
  }

  Tensor<T> normal(Shape shape) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    t.set_requires_grad();
    return t;
  }

  static Tensor<T> zeros(Shape shape) {
    Tensor<T> t(std::move(shape));
    t.set_requires_grad();
    return t;
  }

  Tensor<T> conv(std::size_t out, std::size_t in, std::size_t k) {
    return uniform(Shape{out, in, k, k}, std::sqrt(6.0 / static_cast<double>(in * k * k)));
  }

  Tensor<T> linear(std::size_t out, std::size_t in) {
    return uniform(Shape{out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
ConvBnLayer<T> make_conv_bn(Initializer<T>& init, const ModelConfig& c, std::size_t out, std::size_t in,
                            std::size_t k, std::size_t stride, std::size_t pad) {
  ConvBnLayer<T> layer;
  layer.kernel = init.conv(out, in, k);
  layer.bn = nn::BnState<T>::create(out, static_cast<T>(c.momentum), static_cast<T>(c.eps));
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

template <typename T>
nn::CbnLayer<T> make_cbn(Initializer<T>& init, const ModelConfig& c) {
  nn::CbnLayer<T> layer;
  layer.projection.weight = init.linear(2 * c.block_channels, c.gru_hidden);
  layer.projection.bias = Initializer<T>::zeros(Shape{2 * c.block_channels});
  layer.stats = nn::NormStats<T>::fresh(c.block_channels, static_cast<T>(c.momentum), static_cast<T>(c.eps));
  return layer;
}

template <typename T>
Tensor<T> copy_param(const Tensor<T>& t) {
  Tensor<T> c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

template <typename To, typename From>
Tensor<To> cast_param(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  Tensor<To> c(t.shape(), std::move(values));
  c.set_requires_grad(t.requires_grad());
  return c;
}

template <typename To, typename From>
nn::NormStats<To> cast_stats(const nn::NormStats<From>& s) {
  nn::NormStats<To> out;
  out.running_mean.assign(s.running_mean.begin(), s.running_mean.end());
  out.running_var.assign(s.running_var.begin(), s.running_var.end());
  out.momentum = static_cast<To>(s.momentum);
  out.eps = static_cast<To>(s.eps);
  return out;
}

// Applies `tensor_fn` to every tensor and `stats_fn` to every set of running
// moments of `src`, assembling a structurally identical model.
template <typename To, typename From, typename TensorFn, typename StatsFn>
Model<To> transform_model(const Model<From>& src, TensorFn tensor_fn, StatsFn stats_fn) {
  Model<To> m;
  m.config = src.config;
  m.word_embedding = tensor_fn(src.word_embedding);
  const auto& g = src.gru;
  m.gru = {tensor_fn(g.input_update),  tensor_fn(g.input_reset),  tensor_fn(g.input_candidate),
           tensor_fn(g.hidden_update), tensor_fn(g.hidden_reset), tensor_fn(g.hidden_candidate),
           tensor_fn(g.bias_update),   tensor_fn(g.bias_reset),   tensor_fn(g.bias_candidate)};
  auto conv_bn = [&](const ConvBnLayer<From>& l) {
    ConvBnLayer<To> out;
    out.kernel = tensor_fn(l.kernel);
    out.bn.gamma = tensor_fn(l.bn.gamma);
    out.bn.beta = tensor_fn(l.bn.beta);
    out.bn.stats = stats_fn(l.bn.stats);
    out.stride = l.stride;
    out.pad = l.pad;
    return out;
  };
  auto cbn = [&](const nn::CbnLayer<From>& l) {
    nn::CbnLayer<To> out;
    out.projection.weight = tensor_fn(l.projection.weight);
    out.projection.bias = tensor_fn(l.projection.bias);
    out.stats = stats_fn(l.stats);
    return out;
  };
  for (const auto& l : src.stem) m.stem.push_back(conv_bn(l));
  m.fuse = conv_bn(src.fuse);
  for (const auto& b : src.blocks) {
    nn::ResidualBlock<To> out;
    out.entry_kernel = tensor_fn(b.entry_kernel);
    out.entry_bias = tensor_fn(b.entry_bias);
    out.conv1 = tensor_fn(b.conv1);
    out.conv2 = tensor_fn(b.conv2);
    out.cbn1 = cbn(b.cbn1);
    out.cbn2 = cbn(b.cbn2);
    m.blocks.push_back(std::move(out));
  }
  m.classifier_conv = conv_bn(src.classifier_conv);
  m.hidden = {tensor_fn(src.hidden.weight), tensor_fn(src.hidden.bias)};
  m.output = {tensor_fn(src.output.weight), tensor_fn(src.output.bias)};
  return m;
}

template <typename T>
Tensor<T> conv_bn_relu(const Tensor<T>& x, ConvBnLayer<T>& layer, nn::Mode mode) {
  return relu(nn::batch_norm(conv2d(x, layer.kernel, layer.stride, layer.pad), layer.bn, mode));
}

}  // namespace

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  auto add = [&](std::string name, const Tensor<T>& t) {
    const bool is_shift = name.ends_with(".bias") || name.ends_with(".beta");
    out.push_back({std::move(name), t, !is_shift});
  };
  auto add_conv_bn = [&](const std::string& prefix, const ConvBnLayer<T>& l) {
    add(prefix + ".kernel", l.kernel);
    add(prefix + ".bn.gamma", l.bn.gamma);
    add(prefix + ".bn.beta", l.bn.beta);
  };
  add("embedding.weight", word_embedding);
  add("gru.input_update", gru.input_update);
  add("gru.input_reset", gru.input_reset);
  add("gru.input_candidate", gru.input_candidate);
  add("gru.hidden_update", gru.hidden_update);
  add("gru.hidden_reset", gru.hidden_reset);
  add("gru.hidden_candidate", gru.hidden_candidate);
  add("gru.update.bias", gru.bias_update);
  add("gru.reset.bias", gru.bias_reset);
  add("gru.candidate.bias", gru.bias_candidate);
  for (std::size_t i = 0; i < stem.size(); ++i) add_conv_bn("stem." + std::to_string(i), stem[i]);
  add_conv_bn("fuse", fuse);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    const auto& b = blocks[i];
    add(p + ".entry.kernel", b.entry_kernel);
    add(p + ".entry.bias", b.entry_bias);
    add(p + ".conv1.kernel", b.conv1);
    add(p + ".conv2.kernel", b.conv2);
    add(p + ".cbn1.projection.weight", b.cbn1.projection.weight);
    add(p + ".cbn1.projection.bias", b.cbn1.projection.bias);
    add(p + ".cbn2.projection.weight", b.cbn2.projection.weight);
    add(p + ".cbn2.projection.bias", b.cbn2.projection.bias);
  }
  add_conv_bn("classifier.conv", classifier_conv);
  add("classifier.hidden.weight", hidden.weight);
  add("classifier.hidden.bias", hidden.bias);
  add("classifier.output.weight", output.weight);
  add("classifier.output.bias", output.bias);
  return out;
}

template <typename T>
std::vector<NamedStats<T>> Model<T>::norm_stats() {
  std::vector<NamedStats<T>> out;
  for (std::size_t i = 0; i < stem.size(); ++i) out.push_back({"stem." + std::to_string(i) + ".bn", &stem[i].bn.stats});
  out.push_back({"fuse.bn", &fuse.bn.stats});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    out.push_back({p + ".cbn1", &blocks[i].cbn1.stats});
    out.push_back({p + ".cbn2", &blocks[i].cbn2.stats});
  }
  out.push_back({"classifier.conv.bn", &classifier_conv.bn.stats});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const nn::NormStats<T>*>> Model<T>::norm_stats() const {
  std::vector<std::pair<std::string, const nn::NormStats<T>*>> out;
  for (auto& s : const_cast<Model*>(this)->norm_stats()) out.emplace_back(std::move(s.name), s.stats);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
Model<T> Model<T>::clone() const {
  return transform_model<T>(*this, [](const Tensor<T>& t) { return copy_param(t); },
                            [](const nn::NormStats<T>& s) { return s; });
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  return transform_model<To>(model, [](const Tensor<From>& t) { return cast_param<To>(t); },
                             [](const nn::NormStats<From>& s) { return cast_stats<To>(s); });
}

template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer<T> init(seed);
  Model<T> m;
  m.config = config;
  m.config.seed = seed;
  const auto& c = config;

  m.word_embedding = init.normal(Shape{c.vocab_size, c.embed_dim});
  m.gru.input_update = init.linear(c.gru_hidden, c.embed_dim);
  m.gru.input_reset = init.linear(c.gru_hidden, c.embed_dim);
  m.gru.input_candidate = init.linear(c.gru_hidden, c.embed_dim);
  m.gru.hidden_update = init.linear(c.gru_hidden, c.gru_hidden);
  m.gru.hidden_reset = init.linear(c.gru_hidden, c.gru_hidden);
  m.gru.hidden_candidate = init.linear(c.gru_hidden, c.gru_hidden);
  m.gru.bias_update = Initializer<T>::zeros(Shape{c.gru_hidden});
  m.gru.bias_reset = Initializer<T>::zeros(Shape{c.gru_hidden});
  m.gru.bias_candidate = Initializer<T>::zeros(Shape{c.gru_hidden});

  std::size_t channels = 3;
  for (std::size_t i = 0; i < c.stem_layers; ++i) {
    m.stem.push_back(make_conv_bn(init, c, c.stem_channels, channels, 3, 2, 1));
    channels = c.stem_channels;
  }
  m.fuse = make_conv_bn(init, c, c.block_channels, channels + 2, 3, 1, 1);
  for (std::size_t i = 0; i < c.n_blocks; ++i) {
    nn::ResidualBlock<T> b;
    b.entry_kernel = init.conv(c.block_channels, c.block_channels + 2, 1);
    b.entry_bias = Initializer<T>::zeros(Shape{c.block_channels});
    b.conv1 = init.conv(c.block_channels, c.block_channels, 3);
    b.conv2 = init.conv(c.block_channels, c.block_channels, 3);
    b.cbn1 = make_cbn(init, c);
    b.cbn2 = make_cbn(init, c);
    m.blocks.push_back(std::move(b));
  }
  m.classifier_conv = make_conv_bn(init, c, c.classifier_channels, c.block_channels + 2, 1, 1, 0);
  m.hidden = {init.linear(c.mlp_hidden, c.classifier_channels), Initializer<T>::zeros(Shape{c.mlp_hidden})};
  m.output = {init.linear(c.n_answers, c.mlp_hidden), Initializer<T>::zeros(Shape{c.n_answers})};
  return m;
}

template <typename T>
Tensor<T> question_embedding(const Model<T>& model, const nn::TokenBatch& tokens) {
  return nn::encode_question(tokens, model.word_embedding, model.gru);
}

template <typename T>
std::vector<std::pair<Tensor<T>, Tensor<T>>> cbn_parameters(const Model<T>& model,
                                                            const Tensor<T>& embedding) {
  std::vector<std::pair<Tensor<T>, Tensor<T>>> out;
  for (const auto& b : model.blocks) {
    out.push_back(nn::predict_cbn_params(embedding, b.cbn1.projection));
    out.push_back(nn::predict_cbn_params(embedding, b.cbn2.projection));
  }
  return out;
}

template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& images, const nn::TokenBatch& tokens, nn::Mode mode) {
  const auto& c = model.config;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != c.image_size || images.dim(3) != c.image_size) {
    throw ShapeError("forward: images " + shape_str(images.shape()) + " do not match [N,3," +
                     std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "]");
  }
  if (images.dim(0) != tokens.batch) {
    throw ShapeError("forward: " + std::to_string(images.dim(0)) + " images but " + std::to_string(tokens.batch) +
                     " questions");
  }
  const Tensor<T> e_q = question_embedding(model, tokens);

  Tensor<T> x = images;
  for (auto& layer : model.stem) x = conv_bn_relu(x, layer, mode);
  x = conv_bn_relu(nn::append_coord_maps(x), model.fuse, mode);
  for (auto& block : model.blocks) x = nn::residual_block_forward(x, e_q, block, mode);
  x = conv_bn_relu(nn::append_coord_maps(x), model.classifier_conv, mode);
  x = global_max_pool(x);
  x = relu(linear(x, model.hidden.weight, model.hidden.bias));
  return linear(x, model.output.weight, model.output.bias);
}

template <typename T>
int argmax(std::span<const T> values) {
  if (values.empty()) throw ContractError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

template <typename T>
std::vector<int> predict_batch(Model<T>& model, const Tensor<T>& images, const nn::TokenBatch& tokens) {
  NoGradGuard no_grad;
  const Tensor<T> logits = forward(model, images, tokens, nn::Mode::eval);
  const std::size_t k = logits.dim(1);
  std::vector<int> answers(logits.dim(0));
  for (std::size_t i = 0; i < answers.size(); ++i) answers[i] = argmax<T>(logits.data().subspan(i * k, k));
  return answers;
}

template <typename T>
int predict(Model<T>& model, const Tensor<T>& image, std::span<const int> tokens) {
  if (image.rank() != 3) throw ShapeError("predict expects a [3,S,S] image, got " + shape_str(image.shape()));
  const Tensor<T> batch = reshape(image.detach(), Shape{1, image.dim(0), image.dim(1), image.dim(2)});
  const std::vector<int> q(tokens.begin(), tokens.end());
  return predict_batch(model, batch, nn::TokenBatch::from(std::span<const std::vector<int>>(&q, 1)))[0];
}

#define CBN_INSTANTIATE_MODEL(T)                                                                       \
  template class Model<T>;                                                                             \
  template Model<T> init_model<T>(const ModelConfig&, std::uint64_t);                                  \
  template Tensor<T> question_embedding(const Model<T>&, const nn::TokenBatch&);                       \
  template std::vector<std::pair<Tensor<T>, Tensor<T>>> cbn_parameters(const Model<T>&, const Tensor<T>&); \
  template Tensor<T> forward(Model<T>&, const Tensor<T>&, const nn::TokenBatch&, nn::Mode);            \
  template int argmax<T>(std::span<const T>);                                                          \
  template std::vector<int> predict_batch(Model<T>&, const Tensor<T>&, const nn::TokenBatch&);         \
  template int predict(Model<T>&, const Tensor<T>&, std::span<const int>);

CBN_INSTANTIATE_MODEL(float)
CBN_INSTANTIATE_MODEL(double)
template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

}  // namespace cbn
