#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/model.hpp"
#include "hatstory/random.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

struct TrainConfig {
  double lambda = 1.0;  // ranking-loss weight
  double margin = 1.0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  std::size_t k = 0;  // 0: take the width declared by the dataset
  std::size_t d_s = 16;
  std::size_t d_g = 32;
  std::size_t d_w = 16;
  std::size_t beam = 3;
  std::size_t max_len = 12;
  std::size_t min_count = 1;
  std::string model = "h-attn";
  bool reset_state_per_sentence = false;
  bool printed_rank_sign = false;  // max(0, m - log p(S') + log p(S)), as typeset
  bool retrieval_per_word = false;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(margin > 0.0)) throw ConfigError("margin must be > 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (beam == 0 || max_len == 0) throw ConfigError("beam and max_len must be positive");
    parse_model_kind(model);
  }

  ModelConfig model_config(std::size_t data_k, std::size_t vocab) const {
    if (k != 0 && k != data_k) {
      throw ConfigError("config k=" + std::to_string(k) + " disagrees with dataset k=" + std::to_string(data_k));
    }
    ModelConfig mc;
    mc.k = data_k;
    mc.d_s = d_s;
    mc.d_g = d_g;
    mc.d_w = d_w;
    mc.vocab = vocab;
    mc.kind = parse_model_kind(model);
    mc.reset_state_per_sentence = reset_state_per_sentence;
    return mc;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda},
                     {"margin", c.margin},
                     {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"epsilon", c.epsilon},
                     {"clip_norm", c.clip_norm},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"k", c.k},
                     {"d_s", c.d_s},
                     {"d_g", c.d_g},
                     {"d_w", c.d_w},
                     {"beam", c.beam},
                     {"max_len", c.max_len},
                     {"min_count", c.min_count},
                     {"model", c.model},
                     {"reset_state_per_sentence", c.reset_state_per_sentence},
                     {"printed_rank_sign", c.printed_rank_sign},
                     {"retrieval_per_word", c.retrieval_per_word}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json known = c;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  };
  read("lambda", c.lambda);
  read("margin", c.margin);
  read("learning_rate", c.learning_rate);
  read("beta1", c.beta1);
  read("beta2", c.beta2);
  read("epsilon", c.epsilon);
  read("clip_norm", c.clip_norm);
  read("epochs", c.epochs);
  read("batch_size", c.batch_size);
  read("seed", c.seed);
  read("k", c.k);
  read("d_s", c.d_s);
  read("d_g", c.d_g);
  read("d_w", c.d_w);
  read("beam", c.beam);
  read("max_len", c.max_len);
  read("min_count", c.min_count);
  read("model", c.model);
  read("reset_state_per_sentence", c.reset_state_per_sentence);
  read("printed_rank_sign", c.printed_rank_sign);
  read("retrieval_per_word", c.retrieval_per_word);
}

// ---------------------------------------------------------------------------
// Losses.

/// L_gen = -log p(S | album), soft selection for the hierarchical model.
inline Tensor generation_loss(const ModelParams& params, const Tensor& features, const Story& story) {
  return neg(model_log_prob(params, features, story));
}

/// Order-preserving hinge max(0, m + log p(S') - log p(S)): zero once the true
/// order beats the shuffled one by the margin. `printed_sign` selects the
/// mirrored form max(0, m - log p(S') + log p(S)).
inline Tensor ranking_loss(const Tensor& log_p_pos, const Tensor& log_p_neg, double margin, bool printed_sign = false) {
  return printed_sign ? relu(margin - log_p_neg + log_p_pos) : relu(margin + log_p_neg - log_p_pos);
}

inline double ranking_loss(double log_p_pos, double log_p_neg, double margin, bool printed_sign = false) {
  return printed_sign ? std::max(0.0, margin - log_p_neg + log_p_pos) : std::max(0.0, margin + log_p_neg - log_p_pos);
}

/// Shuffles sentence order uniformly, redrawing identity permutations. After
/// 100 identity draws the first two sentences are swapped instead.
inline Story make_negative(const Story& story, Rng& rng) {
  const std::size_t n = story.sentences.size();
  if (n < 2) throw ContractError("make_negative needs at least two sentences");
  std::vector<std::size_t> perm(n);
  bool found = false;
  for (int attempt = 0; attempt < 100 && !found; ++attempt) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    for (std::size_t i = 0; i < n; ++i) found = found || perm[i] != i;
  }
  if (!found) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[0], perm[1]);
  }
  Story out;
  for (std::size_t i : perm) out.sentences.push_back(story.sentences[i]);
  return out;
}

struct LossParts {
  Tensor total;
  Tensor generation;
  Tensor ranking;  // zero scalar when lambda == 0
};

/// L = L_gen(S) + lambda * L_rank(S, S') with one fresh negative S' drawn from
/// `rng`. With lambda == 0 no negative is drawn and total is L_gen itself.
inline LossParts total_loss(const ModelParams& params, const Tensor& features, const Story& story,
                            const TrainConfig& cfg, Rng& rng) {
  std::function<Tensor(const Story&)> log_prob;
  AlbumEncoding enc;
  SelectionResult sel;
  if (params.config.kind == ModelKind::kHierarchical) {
    enc = encode_album(params, features);
    sel = select_summary(params, enc, SelectionMode::soft());
    log_prob = [&](const Story& s) { return story_log_prob(params, enc, sel, s); };
  } else {
    log_prob = [&](const Story& s) { return model_log_prob(params, features, s); };
  }
  const Tensor pos = log_prob(story);
  const Tensor gen = neg(pos);
  LossParts parts{gen, gen, Tensor::scalar(0.0)};
  if (cfg.lambda == 0.0) return parts;
  const Story negative = make_negative(story, rng);
  parts.ranking = ranking_loss(pos, log_prob(negative), cfg.margin, cfg.printed_rank_sign);
  parts.total = parts.generation + cfg.lambda * parts.ranking;
  return parts;
}

// ---------------------------------------------------------------------------
// Adam.

struct OptimizerState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;
};

/// Bias-corrected Adam on every tensor in `params`, reading each tensor's
/// accumulated gradient multiplied by `grad_scale`.
inline void adam_step(std::span<Tensor> params, OptimizerState& state, const AdamConfig& cfg,
                      double grad_scale = 1.0) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("adam_step: trainable tensor " + std::to_string(i) + " has no gradient");
    }
  }
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state tracks other parameters");
  double scale = grad_scale;
  if (cfg.clip_norm > 0.0) {
    Real sq = 0.0;
    for (const Tensor& p : params) {
      for (Real g : p.grad()) sq += (g * grad_scale) * (g * grad_scale);
    }
    const double norm = static_cast<double>(std::sqrt(sq));
    if (norm > cfg.clip_norm) scale *= cfg.clip_norm / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != values.size()) throw ContractError("adam_step: optimizer state shape mismatch");
    for (std::size_t j = 0; j < values.size(); ++j) {
      const Real g = grad[j] * scale;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const Real m_hat = m[j] / c1;
      const Real v_hat = v[j] / c2;
      values[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_gen_loss = 0.0;
  double mean_rank_loss = 0.0;
  double gen_per_word = 0.0;  // total generation loss / total target tokens
};

struct TrainResult {
  std::vector<EpochStats> curve;
  OptimizerState optimizer;
};

/// Called after every epoch; returning false stops training.
using EpochObserver = std::function<bool(const EpochStats&)>;

/// Minimizes L_gen + lambda L_rank over every (album, story) pair. Selection
/// stays latent: gt_summaries are never read.
inline TrainResult train(ModelParams& params, const std::vector<Album>& albums, const TrainConfig& cfg,
                         const EpochObserver& observer = {}) {
  cfg.validate();
  struct Pair {
    std::size_t album;
    std::size_t story;
  };
  std::vector<Pair> pairs;
  for (std::size_t a = 0; a < albums.size(); ++a) {
    if (albums[a].features.rank() != 2 || albums[a].features.dim(1) != params.config.k) {
      throw DataError("album " + albums[a].album_id + ": feature width does not match the model");
    }
    for (std::size_t s = 0; s < albums[a].stories.size(); ++s) {
      try {
        validate_story(albums[a].stories[s], params.config.steps, params.config.vocab);
      } catch (const Error& e) {
        throw DataError("album " + albums[a].album_id + ": " + e.what());
      }
      pairs.push_back({a, s});
    }
  }
  if (pairs.empty()) throw DataError("training set has no stories");

  std::vector<Tensor> trainable = params.trainable();
  for (Tensor& t : trainable) t.set_requires_grad(true);
  const AdamConfig adam{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.clip_norm};
  Rng rng(cfg.seed + 1);
  TrainResult result;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<Pair>(pairs));
    double loss_sum = 0.0;
    double gen_sum = 0.0;
    double rank_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(pairs.size(), start + cfg.batch_size);
      for (Tensor& t : trainable) t.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const Album& album = albums[pairs[b].album];
        const Story& story = album.stories[pairs[b].story];
        Tape tape;
        Tape::Scope scope(tape);
        const LossParts parts = total_loss(params, album.features, story, cfg, rng);
        tape.backward(parts.total);
        loss_sum += parts.total.item();
        gen_sum += parts.generation.item();
        rank_sum += parts.ranking.item();
        tokens += story.token_count();
      }
      adam_step(trainable, result.optimizer, adam, 1.0 / static_cast<double>(end - start));
    }
    const double count = static_cast<double>(pairs.size());
    EpochStats stats{epoch, loss_sum / count, gen_sum / count, rank_sum / count,
                     gen_sum / static_cast<double>(tokens)};
    if (!std::isfinite(stats.mean_loss)) throw NumericError("training loss diverged at epoch " + std::to_string(epoch));
    result.curve.push_back(stats);
    if (observer && !observer(stats)) break;
  }
  for (Tensor& t : trainable) t.clear_grad();
  return result;
}

inline std::string loss_curve_csv(const std::vector<EpochStats>& curve) {
  std::string out = "epoch,mean_loss,mean_gen_loss,mean_rank_loss\n";
  char buf[128];
  for (const EpochStats& s : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", s.epoch, s.mean_loss, s.mean_gen_loss, s.mean_rank_loss);
    out += buf;
  }
  return out;
}

HATSTORY_END
