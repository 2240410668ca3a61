// SPDX-License-Identifier: Apache-2.0
#include "cbn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cbn/error.hpp"
#include "cbn/ops.hpp"

namespace cbn::nn {

namespace {

struct NormLayout {
  std::size_t n, c, hw;
};

NormLayout norm_layout(const Shape& shape) {
  if (shape.size() != 4) throw ShapeError("normalization expects [N,C,H,W], got " + shape_str(shape));
  return {shape[0], shape[1], shape[2] * shape[3]};
}

// y[n,c,:] = s[n,c] * xhat[n,c,:] + b[n,c], where s and b are either
// per-channel ([C]) or per-sample ([N,C]), and s is optionally stored as an
// offset from 1. Moments come from the batch (stats updated if non-null) or,
// in eval mode, from `stats`.
template <typename T>
Tensor<T> normalize_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                           bool per_sample, bool scale_is_offset, T batch_eps, NormStats<T>* stats,
                           const NormStats<T>* frozen) {
  const NormLayout L = norm_layout(x.shape());
  const Shape param_shape = per_sample ? Shape{L.n, L.c} : Shape{L.c};
  if (scale.shape() != param_shape || shift.shape() != param_shape) {
    throw ShapeError("normalization parameters " + shape_str(scale.shape()) + "/" + shape_str(shift.shape()) +
                     " do not match features " + shape_str(x.shape()));
  }
  const bool training = frozen == nullptr;
  const T eps = training ? batch_eps : frozen->eps;
  if (training && L.n * L.hw < 2) {
    throw DomainError("batch normalization over a single element per channel (shape " + shape_str(x.shape()) +
                      ")");
  }

  std::vector<T> mean(L.c, T{0}), var(L.c, T{0});
  auto in = x.data();
  if (training) {
    const T count = static_cast<T>(L.n * L.hw);
    for (std::size_t i = 0; i < L.n; ++i) {
      for (std::size_t c = 0; c < L.c; ++c) {
        const T* p = in.data() + (i * L.c + c) * L.hw;
        T acc{0};
        for (std::size_t j = 0; j < L.hw; ++j) acc += p[j];
        mean[c] += acc;
      }
    }
    for (auto& m : mean) m /= count;
    for (std::size_t i = 0; i < L.n; ++i) {
      for (std::size_t c = 0; c < L.c; ++c) {
        const T* p = in.data() + (i * L.c + c) * L.hw;
        T acc{0};
        for (std::size_t j = 0; j < L.hw; ++j) {
          const T d = p[j] - mean[c];
          acc += d * d;
        }
        var[c] += acc;
      }
    }
    for (auto& v : var) v /= count;
    if (stats) {
      if (!stats->initialized()) *stats = NormStats<T>::fresh(L.c, stats->momentum, stats->eps);
      if (stats->channels() != L.c) throw ShapeError("running statistics do not match channel count");
      const T m = stats->momentum;
      for (std::size_t c = 0; c < L.c; ++c) {
        stats->running_mean[c] = (T{1} - m) * stats->running_mean[c] + m * mean[c];
        stats->running_var[c] = (T{1} - m) * stats->running_var[c] + m * var[c];
      }
    }
  } else {
    if (!frozen->initialized()) throw StateError("batch normalization evaluated before statistics were initialized");
    if (frozen->channels() != L.c) throw ShapeError("running statistics do not match channel count");
    mean = frozen->running_mean;
    var = frozen->running_var;
  }

  std::vector<T> inv_std(L.c);
  for (std::size_t c = 0; c < L.c; ++c) inv_std[c] = T{1} / std::sqrt(var[c] + eps);

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  auto y = out.data();
  auto s = scale.data();
  auto b = shift.data();
  for (std::size_t i = 0; i < L.n; ++i) {
    for (std::size_t c = 0; c < L.c; ++c) {
      const std::size_t p = per_sample ? i * L.c + c : c;
      const T gain = scale_is_offset ? T{1} + s[p] : s[p];
      const T bias = b[p];
      const std::size_t base = (i * L.c + c) * L.hw;
      for (std::size_t j = 0; j < L.hw; ++j) {
        const T h = (in[base + j] - mean[c]) * inv_std[c];
        xhat[base + j] = h;
        y[base + j] = gain * h + bias;
      }
    }
  }

  const bool track = grad_enabled() && (x.requires_grad() || scale.requires_grad() || shift.requires_grad());
  if (track) {
    out.set_requires_grad();
    GradTape<T>::current().record([L, per_sample, scale_is_offset, training, inv_std = std::move(inv_std),
                                   xhat = std::move(xhat), sx = x.storage(), ss = scale.storage(),
                                   sb = shift.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      const auto& dy = so->grad;
      auto gain_at = [&](std::size_t p) { return scale_is_offset ? T{1} + ss->data[p] : ss->data[p]; };
      if (ss->requires_grad || sb->requires_grad) {
        auto* gs = ss->requires_grad ? &ss->grad_buffer() : nullptr;
        auto* gb = sb->requires_grad ? &sb->grad_buffer() : nullptr;
        for (std::size_t i = 0; i < L.n; ++i) {
          for (std::size_t c = 0; c < L.c; ++c) {
            const std::size_t p = per_sample ? i * L.c + c : c;
            const std::size_t base = (i * L.c + c) * L.hw;
            T ds{0}, db{0};
            for (std::size_t j = 0; j < L.hw; ++j) {
              ds += dy[base + j] * xhat[base + j];
              db += dy[base + j];
            }
            if (gs) (*gs)[p] += ds;
            if (gb) (*gb)[p] += db;
          }
        }
      }
      if (!sx->requires_grad) return;
      auto& dx = sx->grad_buffer();
      if (!training) {
        for (std::size_t i = 0; i < L.n; ++i) {
          for (std::size_t c = 0; c < L.c; ++c) {
            const T k = gain_at(per_sample ? i * L.c + c : c) * inv_std[c];
            const std::size_t base = (i * L.c + c) * L.hw;
            for (std::size_t j = 0; j < L.hw; ++j) dx[base + j] += dy[base + j] * k;
          }
        }
        return;
      }
      // Moments depend on every element of the channel:
      // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)), g = dy * gain.
      const T count = static_cast<T>(L.n * L.hw);
      std::vector<T> mean_g(L.c, T{0}), mean_gx(L.c, T{0});
      for (std::size_t i = 0; i < L.n; ++i) {
        for (std::size_t c = 0; c < L.c; ++c) {
          const T gain = gain_at(per_sample ? i * L.c + c : c);
          const std::size_t base = (i * L.c + c) * L.hw;
          T acc_g{0}, acc_gx{0};
          for (std::size_t j = 0; j < L.hw; ++j) {
            const T g = dy[base + j] * gain;
            acc_g += g;
            acc_gx += g * xhat[base + j];
          }
          mean_g[c] += acc_g;
          mean_gx[c] += acc_gx;
        }
      }
      for (std::size_t c = 0; c < L.c; ++c) {
        mean_g[c] /= count;
        mean_gx[c] /= count;
      }
      for (std::size_t i = 0; i < L.n; ++i) {
        for (std::size_t c = 0; c < L.c; ++c) {
          const T gain = gain_at(per_sample ? i * L.c + c : c);
          const std::size_t base = (i * L.c + c) * L.hw;
          for (std::size_t j = 0; j < L.hw; ++j) {
            const T g = dy[base + j] * gain;
            dx[base + j] += inv_std[c] * (g - mean_g[c] - xhat[base + j] * mean_gx[c]);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
NormStats<T> NormStats<T>::fresh(std::size_t channels, T momentum, T eps) {
  if (!(momentum > T{0} && momentum < T{1})) throw ConfigError("batch norm momentum must lie in (0,1)");
  if (!(eps > T{0})) throw ConfigError("batch norm eps must be positive");
  NormStats s;
  s.running_mean.assign(channels, T{0});
  s.running_var.assign(channels, T{1});
  s.momentum = momentum;
  s.eps = eps;
  return s;
}

template <typename T>
BnState<T> BnState<T>::create(std::size_t channels, T momentum, T eps) {
  BnState s;
  s.gamma = Tensor<T>(Shape{channels}, T{1});
  s.beta = Tensor<T>(Shape{channels}, T{0});
  s.gamma.set_requires_grad();
  s.beta.set_requires_grad();
  s.stats = NormStats<T>::fresh(channels, momentum, eps);
  return s;
}

TokenBatch TokenBatch::from(std::span<const std::vector<int>> questions) {
  TokenBatch b;
  b.batch = questions.size();
  for (const auto& q : questions) {
    if (q.empty()) throw ContractError("cannot encode an empty question");
    b.max_len = std::max(b.max_len, q.size());
    b.lengths.push_back(q.size());
  }
  b.ids.assign(b.batch * b.max_len, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(questions[i].begin(), questions[i].end(), b.ids.begin() + i * b.max_len);
  }
  return b;
}

std::vector<int> TokenBatch::column(std::size_t t) const {
  std::vector<int> col(batch);
  for (std::size_t i = 0; i < batch; ++i) col[i] = ids[i * max_len + t];
  return col;
}

template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& features, BnState<T>& state) {
  return normalize_affine<T>(features, state.gamma, state.beta, false, false, state.stats.eps, &state.stats, nullptr);
}

template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& features, const BnState<T>& state) {
  return normalize_affine<T>(features, state.gamma, state.beta, false, false, state.stats.eps, nullptr, &state.stats);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> predict_cbn_params(const Tensor<T>& question_embedding,
                                                   const CbnProjection<T>& projection) {
  if (question_embedding.rank() != 2 || question_embedding.dim(1) != projection.embedding_size()) {
    throw ShapeError("question embedding " + shape_str(question_embedding.shape()) +
                     " does not match projection " + shape_str(projection.weight.shape()));
  }
  const std::size_t c = projection.channels();
  const Tensor<T> both = linear(question_embedding, projection.weight, projection.bias);
  return {slice_columns(both, 0, c), slice_columns(both, c, c)};
}

template <typename T>
Tensor<T> cbn_apply(const Tensor<T>& features, const Tensor<T>& delta_gamma, const Tensor<T>& beta, T eps,
                    NormStats<T>* stats) {
  return normalize_affine<T>(features, delta_gamma, beta, true, true, eps, stats, nullptr);
}

template <typename T>
Tensor<T> cbn_apply_eval(const Tensor<T>& features, const Tensor<T>& delta_gamma, const Tensor<T>& beta,
                         const NormStats<T>& stats) {
  return normalize_affine<T>(features, delta_gamma, beta, true, true, stats.eps, nullptr, &stats);
}

template <typename T>
Tensor<T> gru_step(const Tensor<T>& input, const Tensor<T>& hidden, const GruState<T>& st) {
  const std::size_t h = st.hidden_size();
  if (input.rank() != 2 || input.dim(1) != st.input_size() || hidden.rank() != 2 || hidden.dim(1) != h ||
      hidden.dim(0) != input.dim(0)) {
    throw ShapeError("gru_step: input " + shape_str(input.shape()) + ", hidden " + shape_str(hidden.shape()) +
                     " vs GRU " + std::to_string(st.input_size()) + "->" + std::to_string(h));
  }
  const Tensor<T> none;
  const Tensor<T> z = sigmoid(add(linear(input, st.input_update, st.bias_update), linear(hidden, st.hidden_update, none)));
  const Tensor<T> r = sigmoid(add(linear(input, st.input_reset, st.bias_reset), linear(hidden, st.hidden_reset, none)));
  const Tensor<T> candidate = tanh(add(linear(input, st.input_candidate, st.bias_candidate),
                                       linear(mul(r, hidden), st.hidden_candidate, none)));
  // (1 - z) * h + z * candidate
  return add(hidden, mul(z, sub(candidate, hidden)));
}

template <typename T>
Tensor<T> encode_question(const TokenBatch& tokens, const Tensor<T>& embed_table, const GruState<T>& gru) {
  if (tokens.batch == 0 || tokens.max_len == 0) throw ContractError("cannot encode an empty question batch");
  for (auto len : tokens.lengths) {
    if (len == 0) throw ContractError("cannot encode an empty question");
  }
  Tensor<T> h(Shape{tokens.batch, gru.hidden_size()});
  std::vector<std::uint8_t> active(tokens.batch);
  for (std::size_t t = 0; t < tokens.max_len; ++t) {
    const std::vector<int> ids = tokens.column(t);
    const Tensor<T> next = gru_step(embedding(embed_table, std::span<const int>(ids)), h, gru);
    bool all_active = true;
    for (std::size_t i = 0; i < tokens.batch; ++i) {
      active[i] = t < tokens.lengths[i] ? 1 : 0;
      all_active = all_active && active[i];
    }
    h = all_active ? next : select_rows(std::span<const std::uint8_t>(active), next, h);
  }
  return h;
}

template <typename T>
Tensor<T> encode_question(std::span<const int> tokens, const Tensor<T>& embed_table, const GruState<T>& gru) {
  const std::vector<int> q(tokens.begin(), tokens.end());
  return encode_question(TokenBatch::from(std::span<const std::vector<int>>(&q, 1)), embed_table, gru);
}

template <typename T>
Tensor<T> coord_maps(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ShapeError("coordinate maps need positive extents");
  auto linspace = [](std::size_t i, std::size_t n) {
    return n == 1 ? T{0} : T{-1} + T{2} * static_cast<T>(i) / static_cast<T>(n - 1);
  };
  Tensor<T> maps(Shape{2, height, width});
  auto m = maps.data();
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      m[y * width + x] = linspace(y, height);
      m[height * width + y * width + x] = linspace(x, width);
    }
  }
  return maps;
}

template <typename T>
Tensor<T> append_coord_maps(const Tensor<T>& features) {
  if (features.rank() != 4) throw ShapeError("append_coord_maps expects [N,C,H,W], got " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), h = features.dim(2), w = features.dim(3);
  const Tensor<T> maps = coord_maps<T>(h, w);
  Tensor<T> tiled(Shape{n, 2, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(maps.data().begin(), maps.data().end(), tiled.data().begin() + i * 2 * h * w);
  }
  const Tensor<T> parts[] = {features, tiled};
  return concat(std::span<const Tensor<T>>(parts), 1);
}

template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& input, const Tensor<T>& question_embedding,
                                 ResidualBlock<T>& block, Mode mode) {
  const Tensor<T> entry = relu(conv2d(append_coord_maps(input), block.entry_kernel, block.entry_bias, 1, 0));

  auto modulate = [&](const Tensor<T>& f, CbnLayer<T>& layer) {
    auto [delta_gamma, beta] = predict_cbn_params(question_embedding, layer.projection);
    return mode == Mode::train ? cbn_apply(f, delta_gamma, beta, layer.stats.eps, &layer.stats)
                               : cbn_apply_eval(f, delta_gamma, beta, layer.stats);
  };

  Tensor<T> body = relu(modulate(conv2d(entry, block.conv1, 1, 1), block.cbn1));
  body = relu(modulate(conv2d(body, block.conv2, 1, 1), block.cbn2));
  return add(body, entry);
}

#define CBN_INSTANTIATE_LAYERS(T)                                                                            \
  template struct NormStats<T>;                                                                              \
  template struct BnState<T>;                                                                                \
  template Tensor<T> batch_norm_train(const Tensor<T>&, BnState<T>&);                                        \
  template Tensor<T> batch_norm_eval(const Tensor<T>&, const BnState<T>&);                                   \
  template std::pair<Tensor<T>, Tensor<T>> predict_cbn_params(const Tensor<T>&, const CbnProjection<T>&);    \
  template Tensor<T> cbn_apply(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, NormStats<T>*);      \
  template Tensor<T> cbn_apply_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const NormStats<T>&); \
  template Tensor<T> gru_step(const Tensor<T>&, const Tensor<T>&, const GruState<T>&);                       \
  template Tensor<T> encode_question(const TokenBatch&, const Tensor<T>&, const GruState<T>&);               \
  template Tensor<T> encode_question(std::span<const int>, const Tensor<T>&, const GruState<T>&);            \
  template Tensor<T> coord_maps<T>(std::size_t, std::size_t);                                                \
  template Tensor<T> append_coord_maps(const Tensor<T>&);                                                    \
  template Tensor<T> residual_block_forward(const Tensor<T>&, const Tensor<T>&, ResidualBlock<T>&, Mode);

CBN_INSTANTIATE_LAYERS(float)
CBN_INSTANTIATE_LAYERS(double)

}  // namespace cbn::nn
