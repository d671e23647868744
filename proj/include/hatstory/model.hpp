#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/random.hpp"
#include "hatstory/recurrent.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

enum class ModelKind {
  kHierarchical,  // album encoder + photo selector + story generator
  kEncDec,        // final encoder state drives every sentence
  kEncAttnDec,    // per-sentence soft attention over photo representations
};

inline std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kHierarchical: return "h-attn";
    case ModelKind::kEncDec: return "enc-dec";
    case ModelKind::kEncAttnDec: return "enc-attn-dec";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& name) {
  if (name == "h-attn") return ModelKind::kHierarchical;
  if (name == "enc-dec") return ModelKind::kEncDec;
  if (name == "enc-attn-dec") return ModelKind::kEncAttnDec;
  throw ConfigError("unknown model kind '" + name + "' (expected h-attn, enc-dec or enc-attn-dec)");
}

struct ModelConfig {
  std::size_t k = 16;    // photo feature / representation width
  std::size_t d_s = 16;  // selector hidden width
  std::size_t d_g = 32;  // generator hidden width
  std::size_t d_w = 16;  // word embedding width
  std::size_t vocab = 0;
  std::size_t steps = kStorySentences;
  ModelKind kind = ModelKind::kHierarchical;
  bool reset_state_per_sentence = false;

  void validate() const {
    if (k == 0 || k % 2 != 0) throw ConfigError("feature width k must be positive and even, got " + std::to_string(k));
    if (d_s == 0 || d_g == 0 || d_w == 0) throw ConfigError("hidden widths must be positive");
    if (vocab < 3) throw ConfigError("vocabulary must hold at least the BOS and EOS ids");
    if (steps == 0) throw ConfigError("summary step count must be positive");
  }
};

struct ModelParams {
  ModelConfig config;
  GruParams enc_fwd;
  GruParams enc_bwd;
  GruParams sel_gru;
  MlpParams sel_mlp;
  GruParams gen_gru;
  EmbeddingTable embedding;
  MlpParams vocab_proj;
  MlpParams bridge;    // enc-dec: final encoder state -> visual input
  MlpParams attn_mlp;  // enc-attn-dec: [decoder state, v_i] -> score

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const std::size_t half = cfg.k / 2;
    p.enc_fwd = GruParams::init(rng, cfg.k, half);
    p.enc_bwd = GruParams::init(rng, cfg.k, half);
    p.sel_gru = GruParams::init(rng, cfg.k, cfg.d_s);
    p.sel_mlp = MlpParams::init(rng, {cfg.d_s + cfg.k, cfg.d_s + cfg.k, 1});
    p.gen_gru = GruParams::init(rng, cfg.d_w + cfg.k, cfg.d_g);
    p.embedding = EmbeddingTable::init(rng, cfg.vocab, cfg.d_w);
    p.vocab_proj = MlpParams::init(rng, {cfg.d_g, cfg.vocab});
    p.bridge = MlpParams::init(rng, {cfg.k, cfg.k});
    p.attn_mlp = MlpParams::init(rng, {cfg.d_g + cfg.k, cfg.d_g + cfg.k, 1});
    return p;
  }

  /// Every tensor in a fixed order; this order is the checkpoint manifest.
  NamedTensors named_tensors() const {
    NamedTensors out;
    enc_fwd.append_named("encoder.forward", out);
    enc_bwd.append_named("encoder.backward", out);
    sel_gru.append_named("selector.gru", out);
    sel_mlp.append_named("selector.mlp", out);
    gen_gru.append_named("generator.gru", out);
    out.emplace_back("generator.embedding", embedding.table);
    vocab_proj.append_named("generator.projection", out);
    bridge.append_named("baseline.bridge", out);
    attn_mlp.append_named("baseline.attention", out);
    return out;
  }

  /// Tensors the configured model kind reads; the optimizer updates exactly these.
  std::vector<Tensor> trainable() const {
    NamedTensors named;
    enc_fwd.append_named("", named);
    enc_bwd.append_named("", named);
    switch (config.kind) {
      case ModelKind::kHierarchical:
        sel_gru.append_named("", named);
        sel_mlp.append_named("", named);
        break;
      case ModelKind::kEncDec: bridge.append_named("", named); break;
      case ModelKind::kEncAttnDec: attn_mlp.append_named("", named); break;
    }
    gen_gru.append_named("", named);
    named.emplace_back("", embedding.table);
    vocab_proj.append_named("", named);
    std::vector<Tensor> out;
    for (auto& [name, t] : named) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_tensors()) t.set_requires_grad(on);
  }

  void validate() const {
    config.validate();
    for (const GruParams* g : {&enc_fwd, &enc_bwd, &sel_gru, &gen_gru}) g->validate();
    for (const MlpParams* m : {&sel_mlp, &vocab_proj, &bridge, &attn_mlp}) m->validate();
    const std::size_t half = config.k / 2;
    auto expect = [](bool ok, const char* what) {
      if (!ok) throw DimensionError(std::string("model parameters disagree with config: ") + what);
    };
    expect(enc_fwd.input_dim() == config.k && enc_fwd.hidden_dim() == half, "encoder.forward");
    expect(enc_bwd.input_dim() == config.k && enc_bwd.hidden_dim() == half, "encoder.backward");
    expect(sel_gru.input_dim() == config.k && sel_gru.hidden_dim() == config.d_s, "selector.gru");
    expect(sel_mlp.input_dim() == config.d_s + config.k && sel_mlp.output_dim() == 1, "selector.mlp");
    expect(gen_gru.input_dim() == config.d_w + config.k && gen_gru.hidden_dim() == config.d_g, "generator.gru");
    expect(embedding.table.shape() == Shape{config.vocab, config.d_w}, "generator.embedding");
    expect(vocab_proj.input_dim() == config.d_g && vocab_proj.output_dim() == config.vocab, "generator.projection");
    expect(bridge.input_dim() == config.k && bridge.output_dim() == config.k, "baseline.bridge");
    expect(attn_mlp.input_dim() == config.d_g + config.k && attn_mlp.output_dim() == 1, "baseline.attention");
  }
};

// ---------------------------------------------------------------------------
// Album encoder.

struct AlbumEncoding {
  Tensor v;  // [n x k], photo representations
  std::size_t n = 0;
  Tensor forward_last;   // [k/2]
  Tensor backward_last;  // [k/2]
};

/// v_i = relu(concat(fwd_i, bwd_i) + f_i) with a bidirectional GRU whose
/// per-direction width is k/2.
inline AlbumEncoding encode_album(const ModelParams& params, const Tensor& features) {
  const std::size_t k = params.config.k;
  if (features.rank() != 2 || features.dim(1) != k) {
    throw DimensionError("encode_album: features " + shape_string(features.shape()) + " do not have width " +
                         std::to_string(k));
  }
  const std::size_t n = features.dim(0);
  std::vector<Tensor> xs;
  xs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) xs.push_back(row(features, i));
  const BiGruOutput context = bi_gru_full(params.enc_fwd, params.enc_bwd, xs);
  std::vector<Tensor> reps;
  reps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) reps.push_back(relu(context.outputs[i] + xs[i]));
  return {stack(reps), n, context.forward_last, context.backward_last};
}

// ---------------------------------------------------------------------------
// Photo selector.

struct SelectStep {
  Tensor p;      // [n], sums to 1 over unmasked photos
  Tensor state;  // [d_s]
};

/// One pointer step: advance the selector GRU on the previous summary vector,
/// score every photo with s(mlp([state, v_i])), zero masked photos and
/// renormalize.
inline SelectStep select_step(const ModelParams& params, const Tensor& v, const Tensor& prev_g, const Tensor& state,
                              const std::vector<bool>& mask) {
  const std::size_t n = v.dim(0);
  if (!mask.empty() && mask.size() != n) throw DimensionError("select_step: mask length differs from photo count");
  const bool any_masked = std::find(mask.begin(), mask.end(), true) != mask.end();
  if (any_masked && std::all_of(mask.begin(), mask.end(), [](bool m) { return m; })) {
    throw ContractError("select_step: every photo is masked");
  }
  Tensor next = gru_step(params.sel_gru, prev_g, state);
  const Tensor scores = mlp(params.sel_mlp, concat({repeat_rows(next, n), v}, 1));
  Tensor raw = sigmoid(reshape(scores, {n}));
  if (any_masked) {
    std::vector<Real> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = mask[i] ? 0.0 : 1.0;
    raw = raw * Tensor::vector(std::move(keep));
  }
  return {raw / sum(raw), std::move(next)};
}

enum class SelectionKind { kSoftTrain, kHardTest, kOracle };

struct SelectionMode {
  SelectionKind kind = SelectionKind::kSoftTrain;
  std::vector<std::size_t> oracle;

  static SelectionMode soft() { return {SelectionKind::kSoftTrain, {}}; }
  static SelectionMode hard() { return {SelectionKind::kHardTest, {}}; }
  static SelectionMode from_oracle(std::vector<std::size_t> indices) {
    return {SelectionKind::kOracle, std::move(indices)};
  }
};

struct SelectionResult {
  Tensor probs;  // [T x n]
  std::vector<std::size_t> indices;
  Tensor summaries;           // [T x k], row t = probs_t' V
  std::vector<Tensor> g;      // the rows of `summaries`, as recorded
};

/// Index of the largest entry among unmasked positions; ties go to the lower index.
inline std::size_t masked_argmax(std::span<const Real> values, const std::vector<bool>& mask) {
  std::size_t best = values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    if (best == values.size() || values[i] > values[best]) best = i;
  }
  return best;
}

inline SelectionResult select_summary(const ModelParams& params, const AlbumEncoding& enc, const SelectionMode& mode) {
  const std::size_t n = enc.n;
  const std::size_t steps = params.config.steps;
  SelectionResult out;
  std::vector<Tensor> rows;

  if (mode.kind == SelectionKind::kOracle) {
    if (mode.oracle.size() != steps) throw ContractError("oracle selection needs exactly one index per summary step");
    if (std::set<std::size_t>(mode.oracle.begin(), mode.oracle.end()).size() != steps) {
      throw ContractError("oracle selection indices must be distinct");
    }
    for (std::size_t idx : mode.oracle) {
      if (idx >= n) throw IndexError("oracle selection index " + std::to_string(idx) + " outside album");
      std::vector<Real> one_hot(n, 0.0);
      one_hot[idx] = 1.0;
      rows.push_back(Tensor::vector(std::move(one_hot)));
      out.g.push_back(matmul(rows.back(), enc.v));
    }
    out.indices = mode.oracle;
  } else {
    const bool hard = mode.kind == SelectionKind::kHardTest;
    if (hard && n < steps) {
      throw ContractError("hard selection needs at least " + std::to_string(steps) + " photos, album has " +
                          std::to_string(n));
    }
    Tensor state = Tensor::zeros({params.config.d_s});
    Tensor prev_g = matmul(Tensor::full({n}, 1 / static_cast<Real>(n)), enc.v);
    std::vector<bool> chosen(n, false);
    for (std::size_t t = 0; t < steps; ++t) {
      SelectStep step = select_step(params, enc.v, prev_g, state, hard ? chosen : std::vector<bool>{});
      const std::size_t pick_idx = masked_argmax(step.p.data(), hard ? chosen : std::vector<bool>{});
      if (hard) chosen[pick_idx] = true;
      out.indices.push_back(pick_idx);
      Tensor g = matmul(step.p, enc.v);
      rows.push_back(step.p);
      out.g.push_back(g);
      prev_g = g;
      state = step.state;
    }
  }
  out.probs = stack(rows);
  out.summaries = stack(out.g);
  return out;
}

// ---------------------------------------------------------------------------
// Story generator.

struct WordStep {
  Tensor logits;  // [|V|]
  Tensor state;   // [d_g]
};

/// GRU input is concat(embedding(prev), g); logits are an affine map of the new state.
inline WordStep decode_word_step(const ModelParams& params, TokenId prev, const Tensor& g, const Tensor& h) {
  Tensor next = gru_step(params.gen_gru, concat({embed(params.embedding, prev), g}), h);
  return {mlp(params.vocab_proj, next), next};
}

/// Teacher-forced log p(S). `visual(t, state)` supplies the visual input of
/// sentence t given the generator state at the start of that sentence.
template <class VisualFn>
Tensor story_log_prob_with(const ModelParams& params, const Story& story, VisualFn&& visual) {
  validate_story(story, params.config.steps, params.config.vocab);
  std::vector<Tensor> terms;
  terms.reserve(story.token_count());
  Tensor h = Tensor::zeros({params.config.d_g});
  for (std::size_t t = 0; t < story.sentences.size(); ++t) {
    if (params.config.reset_state_per_sentence) h = Tensor::zeros({params.config.d_g});
    const Tensor g = visual(t, h);
    TokenId prev = kBos;
    for (TokenId tok : story.sentences[t]) {
      WordStep step = decode_word_step(params, prev, g, h);
      terms.push_back(pick(log_softmax(step.logits), static_cast<std::size_t>(tok)));
      h = step.state;
      prev = tok;
    }
  }
  return add_n(terms);
}

/// Sum over sentences t and words l of log p(s_{t,l}), sentence t conditioned
/// on summary vector g_t. This is -L_gen.
inline Tensor story_log_prob(const ModelParams& params, const AlbumEncoding&, const SelectionResult& sel,
                             const Story& story) {
  if (sel.g.size() != params.config.steps) throw ContractError("selection has the wrong number of summary steps");
  return story_log_prob_with(params, story, [&](std::size_t t, const Tensor&) { return sel.g[t]; });
}

struct Hypothesis {
  Sentence tokens;
  Real log_prob = 0.0;
  Tensor state;
  std::size_t order = 0;  // creation order, for tie-breaking
};

/// Length-capped beam search over decode_word_step from state `h0`. Each step
/// keeps the best `beam - completed` expansions; those ending in EOS (or
/// reaching `max_len`) move to the completed pool, so exactly `beam`
/// hypotheses complete when the vocabulary is large enough. Returns the best
/// completed hypothesis; ties go to the earlier created one, which also means
/// the lower token id among siblings.
inline Hypothesis beam_decode(const ModelParams& params, const Tensor& g, std::size_t beam, std::size_t max_len,
                              const Tensor& h0) {
  if (beam == 0) throw ContractError("beam_decode: beam must be at least 1");
  if (max_len == 0) throw ContractError("beam_decode: max_len must be at least 1");
  Tape::Suspend no_grad;
  const std::size_t vocab = params.config.vocab;
  std::vector<Hypothesis> active{Hypothesis{{}, 0.0, h0, 0}};
  std::vector<Hypothesis> completed;
  std::size_t counter = 1;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    Real log_prob;
    std::size_t order;
  };

  for (std::size_t len = 1; len <= max_len && !active.empty(); ++len) {
    std::vector<Candidate> candidates;
    std::vector<Tensor> states;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Hypothesis& hyp = active[a];
      const TokenId prev = hyp.tokens.empty() ? kBos : hyp.tokens.back();
      WordStep step = decode_word_step(params, prev, g, hyp.state);
      const Tensor logp = log_softmax(step.logits);
      states.push_back(step.state);
      for (std::size_t tok = 0; tok < vocab; ++tok) {
        candidates.push_back({a, static_cast<TokenId>(tok), hyp.log_prob + logp[tok], counter++});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& x, const Candidate& y) { return x.log_prob > y.log_prob; });
    std::vector<Hypothesis> next;
    const std::size_t slots = beam - completed.size();
    for (std::size_t c = 0; c < std::min(slots, candidates.size()); ++c) {
      const Candidate& cand = candidates[c];
      Hypothesis h{active[cand.parent].tokens, cand.log_prob, states[cand.parent], cand.order};
      h.tokens.push_back(cand.token);
      if (cand.token == kEos || len == max_len) {
        completed.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
  }
  return *std::min_element(completed.begin(), completed.end(), [](const Hypothesis& x, const Hypothesis& y) {
    return x.log_prob > y.log_prob || (x.log_prob == y.log_prob && x.order < y.order);
  });
}

inline Hypothesis beam_decode(const ModelParams& params, const Tensor& g, std::size_t beam, std::size_t max_len) {
  return beam_decode(params, g, beam, max_len, Tensor::zeros({params.config.d_g}));
}

/// Decodes one sentence per summary step, carrying the generator state across
/// sentences (unless configured to reset). Sentences cut at max_len get an EOS
/// appended.
template <class VisualFn>
Story generate_with(const ModelParams& params, VisualFn&& visual, std::size_t beam, std::size_t max_len) {
  Tape::Suspend no_grad;
  Story story;
  Tensor h = Tensor::zeros({params.config.d_g});
  for (std::size_t t = 0; t < params.config.steps; ++t) {
    if (params.config.reset_state_per_sentence) h = Tensor::zeros({params.config.d_g});
    const Tensor g = visual(t, h);
    Hypothesis best = beam_decode(params, g, beam, max_len, h);
    if (best.tokens.back() != kEos) best.tokens.push_back(kEos);
    story.sentences.push_back(std::move(best.tokens));
    h = best.state;
  }
  return story;
}

struct GeneratedStory {
  Story story;
  SelectionResult selection;  // hierarchical model
  Tensor attention;           // [T x n], enc-attn-dec only
};

/// Full hierarchical pipeline: encode, select (hard or oracle), decode.
inline GeneratedStory generate_story(const ModelParams& params, const Tensor& features, std::size_t beam,
                                     std::size_t max_len, const SelectionMode& mode = SelectionMode::hard()) {
  Tape::Suspend no_grad;
  const AlbumEncoding enc = encode_album(params, features);
  GeneratedStory out;
  out.selection = select_summary(params, enc, mode);
  out.story = generate_with(params, [&](std::size_t t, const Tensor&) { return out.selection.g[t]; }, beam, max_len);
  return out;
}

// ---------------------------------------------------------------------------
// Baselines sharing the album encoder and the word decoder.

/// enc-dec: affine map of concat(final forward state, final backward state),
/// the same vector for every sentence.
inline Tensor enc_dec_visual(const ModelParams& params, const AlbumEncoding& enc) {
  return mlp(params.bridge, concat({enc.forward_last, enc.backward_last}));
}

inline Tensor enc_dec_log_prob(const ModelParams& params, const Tensor& features, const Story& story) {
  const AlbumEncoding enc = encode_album(params, features);
  const Tensor g = enc_dec_visual(params, enc);
  return story_log_prob_with(params, story, [&](std::size_t, const Tensor&) { return g; });
}

inline Story enc_dec_generate(const ModelParams& params, const Tensor& features, std::size_t beam,
                              std::size_t max_len) {
  Tape::Suspend no_grad;
  const AlbumEncoding enc = encode_album(params, features);
  const Tensor g = enc_dec_visual(params, enc);
  return generate_with(params, [&](std::size_t, const Tensor&) { return g; }, beam, max_len);
}

/// alpha = softmax_i(mlp([state, v_i])).
inline Tensor attention_weights(const ModelParams& params, const AlbumEncoding& enc, const Tensor& state) {
  const Tensor scores = mlp(params.attn_mlp, concat({repeat_rows(state, enc.n), enc.v}, 1));
  return softmax(reshape(scores, {enc.n}));
}

struct AttentiveResult {
  Tensor log_prob;
  Story story;
  Tensor attention;  // [T x n]
};

inline AttentiveResult enc_attn_dec_log_prob(const ModelParams& params, const Tensor& features, const Story& story) {
  const AlbumEncoding enc = encode_album(params, features);
  std::vector<Tensor> alphas;
  AttentiveResult out;
  out.log_prob = story_log_prob_with(params, story, [&](std::size_t, const Tensor& h) {
    alphas.push_back(attention_weights(params, enc, h));
    return matmul(alphas.back(), enc.v);
  });
  out.story = story;
  out.attention = stack(alphas);
  return out;
}

inline AttentiveResult enc_attn_dec_generate(const ModelParams& params, const Tensor& features, std::size_t beam,
                                             std::size_t max_len) {
  Tape::Suspend no_grad;
  const AlbumEncoding enc = encode_album(params, features);
  std::vector<Tensor> alphas;
  AttentiveResult out;
  out.story = generate_with(
      params,
      [&](std::size_t, const Tensor& h) {
        alphas.push_back(attention_weights(params, enc, h));
        return matmul(alphas.back(), enc.v);
      },
      beam, max_len);
  out.attention = stack(alphas);
  out.log_prob = Tensor::scalar(0.0);
  return out;
}

/// log p(S | album) under the configured model kind; the hierarchical model
/// uses soft selection.
inline Tensor model_log_prob(const ModelParams& params, const Tensor& features, const Story& story) {
  switch (params.config.kind) {
    case ModelKind::kHierarchical: {
      const AlbumEncoding enc = encode_album(params, features);
      return story_log_prob(params, enc, select_summary(params, enc, SelectionMode::soft()), story);
    }
    case ModelKind::kEncDec: return enc_dec_log_prob(params, features, story);
    case ModelKind::kEncAttnDec: return enc_attn_dec_log_prob(params, features, story).log_prob;
  }
  throw ContractError("unknown model kind");
}

/// Generation under the configured model kind.
inline GeneratedStory generate(const ModelParams& params, const Tensor& features, std::size_t beam,
                               std::size_t max_len, const SelectionMode& mode = SelectionMode::hard()) {
  switch (params.config.kind) {
    case ModelKind::kHierarchical: return generate_story(params, features, beam, max_len, mode);
    case ModelKind::kEncDec: {
      GeneratedStory out;
      out.story = enc_dec_generate(params, features, beam, max_len);
      return out;
    }
    case ModelKind::kEncAttnDec: {
      AttentiveResult r = enc_attn_dec_generate(params, features, beam, max_len);
      GeneratedStory out;
      out.story = std::move(r.story);
      out.attention = r.attention;
      return out;
    }
  }
  throw ContractError("unknown model kind");
}

HATSTORY_END
