#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "hatstory/errors.hpp"
#include "hatstory/random.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Gated recurrent unit weights. Input-to-hidden matrices are [d_in x d_h],
/// hidden-to-hidden matrices [d_h x d_h], biases [d_h].
struct GruParams {
  Tensor w_z, w_r, w_h;
  Tensor u_z, u_r, u_h;
  Tensor b_z, b_r, b_h;

  std::size_t input_dim() const { return w_z.dim(0); }
  std::size_t hidden_dim() const { return w_z.dim(1); }

  static GruParams zeros(std::size_t d_in, std::size_t d_h) {
    GruParams p;
    p.w_z = Tensor::zeros({d_in, d_h});
    p.w_r = Tensor::zeros({d_in, d_h});
    p.w_h = Tensor::zeros({d_in, d_h});
    p.u_z = Tensor::zeros({d_h, d_h});
    p.u_r = Tensor::zeros({d_h, d_h});
    p.u_h = Tensor::zeros({d_h, d_h});
    p.b_z = Tensor::zeros({d_h});
    p.b_r = Tensor::zeros({d_h});
    p.b_h = Tensor::zeros({d_h});
    return p;
  }

  /// Xavier weights, zero biases.
  static GruParams init(Rng& rng, std::size_t d_in, std::size_t d_h) {
    GruParams p = zeros(d_in, d_h);
    for (Tensor* w : {&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h}) *w = seeded_init(rng, w->shape(), XavierInit{});
    return p;
  }

  void validate() const {
    const std::size_t d_in = input_dim();
    const std::size_t d_h = hidden_dim();
    for (const Tensor* w : {&w_z, &w_r, &w_h}) {
      if (w->shape() != Shape{d_in, d_h}) throw DimensionError("GRU input weights disagree: " + shape_string(w->shape()));
    }
    for (const Tensor* u : {&u_z, &u_r, &u_h}) {
      if (u->shape() != Shape{d_h, d_h}) throw DimensionError("GRU recurrent weights disagree: " + shape_string(u->shape()));
    }
    for (const Tensor* b : {&b_z, &b_r, &b_h}) {
      if (b->shape() != Shape{d_h}) throw DimensionError("GRU bias disagrees: " + shape_string(b->shape()));
    }
  }

  void append_named(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".w_z", w_z);
    out.emplace_back(prefix + ".w_r", w_r);
    out.emplace_back(prefix + ".w_h", w_h);
    out.emplace_back(prefix + ".u_z", u_z);
    out.emplace_back(prefix + ".u_r", u_r);
    out.emplace_back(prefix + ".u_h", u_h);
    out.emplace_back(prefix + ".b_z", b_z);
    out.emplace_back(prefix + ".b_r", b_r);
    out.emplace_back(prefix + ".b_h", b_h);
  }
};

/// z = s(W_z'x + U_z'h + b_z), r = s(W_r'x + U_r'h + b_r),
/// c = tanh(W_h'x + U_h'(r * h) + b_h), h' = (1 - z) * h + z * c.
inline Tensor gru_step(const GruParams& p, const Tensor& x, const Tensor& h) {
  if (x.shape() != Shape{p.input_dim()} || h.shape() != Shape{p.hidden_dim()}) {
    throw DimensionError("gru_step: input " + shape_string(x.shape()) + " / state " + shape_string(h.shape()) +
                         " do not match cell " + std::to_string(p.input_dim()) + "->" + std::to_string(p.hidden_dim()));
  }
  const Tensor z = sigmoid(matmul(x, p.w_z) + matmul(h, p.u_z) + p.b_z);
  const Tensor r = sigmoid(matmul(x, p.w_r) + matmul(h, p.u_r) + p.b_r);
  const Tensor c = tanh(matmul(x, p.w_h) + matmul(r * h, p.u_h) + p.b_h);
  return h + z * (c - h);
}

/// Runs the cell over `xs` from a zero state and returns every hidden state.
inline std::vector<Tensor> run_gru(const GruParams& p, const std::vector<Tensor>& xs) {
  std::vector<Tensor> states;
  states.reserve(xs.size());
  Tensor h = Tensor::zeros({p.hidden_dim()});
  for (const Tensor& x : xs) {
    h = gru_step(p, x, h);
    states.push_back(h);
  }
  return states;
}

struct BiGruOutput {
  std::vector<Tensor> outputs;  // concat(forward_i, backward_i), width 2 d_h
  Tensor forward_last;          // forward state after the last element
  Tensor backward_last;         // backward state after the first element
};

inline BiGruOutput bi_gru_full(const GruParams& fwd, const GruParams& bwd, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("bi_gru: empty input sequence");
  if (fwd.input_dim() != bwd.input_dim() || fwd.hidden_dim() != bwd.hidden_dim()) {
    throw DimensionError("bi_gru: forward and backward cells differ in shape");
  }
  const std::vector<Tensor> forward = run_gru(fwd, xs);
  const std::vector<Tensor> reversed_in(xs.rbegin(), xs.rend());
  std::vector<Tensor> backward = run_gru(bwd, reversed_in);
  std::reverse(backward.begin(), backward.end());
  BiGruOutput out;
  out.outputs.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out.outputs.push_back(concat({forward[i], backward[i]}));
  out.forward_last = forward.back();
  out.backward_last = backward.front();
  return out;
}

inline std::vector<Tensor> bi_gru(const GruParams& fwd, const GruParams& bwd, const std::vector<Tensor>& xs) {
  return bi_gru_full(fwd, bwd, xs).outputs;
}

enum class Activation { kNone, kTanh };

struct MlpLayer {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]
  Activation activation = Activation::kNone;
};

struct MlpParams {
  std::vector<MlpLayer> layers;

  std::size_t input_dim() const { return layers.front().weight.dim(0); }
  std::size_t output_dim() const { return layers.back().weight.dim(1); }

  /// Affine layers of the given widths: tanh on hidden layers, none on the output.
  static MlpParams init(Rng& rng, const std::vector<std::size_t>& widths) {
    if (widths.size() < 2) throw ContractError("mlp needs at least input and output widths");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      MlpLayer layer;
      layer.weight = seeded_init(rng, {widths[i], widths[i + 1]}, XavierInit{});
      layer.bias = Tensor::zeros({widths[i + 1]});
      layer.activation = i + 2 < widths.size() ? Activation::kTanh : Activation::kNone;
      p.layers.push_back(std::move(layer));
    }
    return p;
  }

  void validate() const {
    if (layers.empty()) throw DimensionError("mlp has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const MlpLayer& l = layers[i];
      if (l.weight.rank() != 2 || l.bias.shape() != Shape{l.weight.dim(1)}) {
        throw DimensionError("mlp layer " + std::to_string(i) + " weight/bias shapes disagree");
      }
      if (i > 0 && layers[i - 1].weight.dim(1) != l.weight.dim(0)) {
        throw DimensionError("mlp layer " + std::to_string(i) + " does not chain with its predecessor");
      }
    }
  }

  void append_named(const std::string& prefix, NamedTensors& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(prefix + "." + std::to_string(i) + ".weight", layers[i].weight);
      out.emplace_back(prefix + "." + std::to_string(i) + ".bias", layers[i].bias);
    }
  }
};

/// Accepts a vector [d] or a batch of rows [m x d].
inline Tensor mlp(const MlpParams& p, const Tensor& x) {
  if (x.shape().empty() || x.shape().back() != p.input_dim()) {
    throw DimensionError("mlp: input " + shape_string(x.shape()) + " does not match input width " +
                         std::to_string(p.input_dim()));
  }
  Tensor h = x;
  for (const MlpLayer& layer : p.layers) {
    h = add_bias(matmul(h, layer.weight), layer.bias);
    if (layer.activation == Activation::kTanh) h = tanh(h);
  }
  return h;
}

struct EmbeddingTable {
  Tensor table;  // [|V| x d_w]

  std::size_t vocab_size() const { return table.dim(0); }
  std::size_t width() const { return table.dim(1); }

  static EmbeddingTable init(Rng& rng, std::size_t vocab, std::size_t width) {
    return {seeded_init(rng, {vocab, width}, UniformInit{-0.1, 0.1})};
  }
};

inline Tensor embed(const EmbeddingTable& e, long id) {
  if (id < 0 || static_cast<std::size_t>(id) >= e.vocab_size()) {
    throw IndexError("embed: token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(e.vocab_size()));
  }
  return row(e.table, static_cast<std::size_t>(id));
}

HATSTORY_END
