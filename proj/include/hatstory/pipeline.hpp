#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "hatstory/checkpoint.hpp"
#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/evaluation.hpp"
#include "hatstory/gradcheck.hpp"
#include "hatstory/model.hpp"
#include "hatstory/random.hpp"
#include "hatstory/recurrent.hpp"
#include "hatstory/tensor.hpp"
#include "hatstory/training.hpp"

HATSTORY_BEGIN

// ---------------------------------------------------------------------------
// Training entry point shared by the CLI and the acceptance runs.

/// Initializes a model from Rng(cfg.seed) and trains it on `data`.
struct TrainedModel {
  ModelParams params;
  TrainResult result;
};

inline TrainedModel train_model(const Dataset& data, const TrainConfig& cfg, const EpochObserver& observer = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  TrainedModel out;
  out.params = ModelParams::init(cfg.model_config(data.k, data.vocab.size()), rng);
  out.result = train(out.params, data.albums, cfg, observer);
  return out;
}

/// Seed, dims and a hash of the serialized checkpoint.
inline nlohmann::json report_fingerprint(const ModelParams& params, const Vocabulary& vocab, const TrainConfig& cfg) {
  const auto& c = params.config;
  return {{"seed", cfg.seed},
          {"model", model_kind_name(c.kind)},
          {"dims", {{"k", c.k}, {"d_s", c.d_s}, {"d_g", c.d_g}, {"d_w", c.d_w}, {"vocab", c.vocab}}},
          {"config", config_fingerprint(cfg)},
          {"checkpoint", hex64(fnv1a64(serialize_checkpoint(params, vocab, cfg)))}};
}

// ---------------------------------------------------------------------------
// Evaluation tasks.

inline std::vector<std::size_t> oracle_indices(const Album& album) {
  if (album.gt_summaries.empty()) throw DataError("album " + album.album_id + " has no ground-truth summary");
  std::vector<std::size_t> out;
  for (const auto& id : album.gt_summaries.front()) out.push_back(album.photo_index(id));
  return out;
}

struct GenerationOptions {
  std::size_t beam = 3;
  std::size_t max_len = 12;
  bool oracle_selection = false;
  std::size_t bleu_order = 3;
};

inline GeneratedStory generate_for(const ModelParams& params, const Album& album, const GenerationOptions& opt) {
  if (opt.oracle_selection) {
    if (params.config.kind != ModelKind::kHierarchical) throw ConfigError("oracle selection needs the h-attn model");
    return generate_story(params, album.features, opt.beam, opt.max_len, SelectionMode::from_oracle(oracle_indices(album)));
  }
  return generate(params, album.features, opt.beam, opt.max_len);
}

/// Per album: the generated story scored against every reference story of that
/// album. Aggregates: corpus BLEU-n (pooled counts, not a mean of items) and
/// mean CIDEr.
inline MetricReport evaluate_generation(const ModelParams& params, const Vocabulary& vocab,
                                        const std::vector<Album>& albums, const GenerationOptions& opt) {
  if (albums.empty()) throw DataError("eval-gen: no albums");
  std::vector<std::vector<TokenId>> hyps;
  std::vector<std::vector<std::vector<TokenId>>> refs;
  std::vector<std::string> texts;
  for (const Album& album : albums) {
    if (album.stories.empty()) throw DataError("album " + album.album_id + " has no reference story");
    const GeneratedStory g = generate_for(params, album, opt);
    hyps.push_back(flatten_story(g.story));
    std::vector<std::vector<TokenId>> r;
    for (const Story& s : album.stories) r.push_back(flatten_story(s));
    refs.push_back(std::move(r));
    std::string text;
    for (const auto& s : g.story.sentences) text += (text.empty() ? "" : " ") + detokenize(s, vocab);
    texts.push_back(std::move(text));
  }
  const std::vector<double> cider_items = cider_per_item(hyps, refs);
  MetricReport report;
  report.task = "generation";
  const std::string bleu_key = "bleu" + std::to_string(opt.bleu_order);
  for (std::size_t i = 0; i < albums.size(); ++i) {
    report.per_item.push_back({{"album_id", albums[i].album_id},
                               {bleu_key, bleu_n(std::vector<std::vector<TokenId>>{hyps[i]},
                                                 std::vector<std::vector<std::vector<TokenId>>>{refs[i]},
                                                 opt.bleu_order)},
                               {"cider", cider_items[i]},
                               {"story", texts[i]}});
  }
  report.aggregate[bleu_key] = bleu_n(hyps, refs, opt.bleu_order);
  report.aggregate["cider"] = cider(hyps, refs);
  return report;
}

/// Hard-test selection of the hierarchical model, or with `attention_baseline`
/// the five photos with the largest accumulated enc-attn-dec attention during
/// generation. Aggregates are item means.
inline MetricReport evaluate_summarization(const ModelParams& params, const std::vector<Album>& albums,
                                           bool attention_baseline, std::size_t beam = 3, std::size_t max_len = 12) {
  if (albums.empty()) throw DataError("eval-summ: no albums");
  const ModelKind need = attention_baseline ? ModelKind::kEncAttnDec : ModelKind::kHierarchical;
  if (params.config.kind != need) {
    throw ConfigError("eval-summ" + std::string(attention_baseline ? " --baseline attn-agg" : "") + " needs a " +
                      model_kind_name(need) + " checkpoint, got " + model_kind_name(params.config.kind));
  }
  MetricReport report;
  report.task = attention_baseline ? "summarization-attn-agg" : "summarization";
  double p_sum = 0.0;
  double r_sum = 0.0;
  for (const Album& album : albums) {
    std::vector<std::size_t> picks;
    if (attention_baseline) {
      picks = attention_aggregate_topk(enc_attn_dec_generate(params, album.features, beam, max_len).attention);
    } else {
      Tape::Suspend no_grad;
      picks = select_summary(params, encode_album(params, album.features), SelectionMode::hard()).indices;
    }
    std::vector<std::string> ids;
    for (std::size_t i : picks) ids.push_back(album.photo_ids[i]);
    const PrecisionRecall pr = summary_precision_recall<std::string>(ids, album.gt_summaries);
    p_sum += pr.precision;
    r_sum += pr.recall;
    report.per_item.push_back({{"album_id", album.album_id},
                               {"selected", ids},
                               {"precision", pr.precision},
                               {"recall", pr.recall}});
  }
  const double count = static_cast<double>(albums.size());
  report.aggregate["precision"] = p_sum / count;
  report.aggregate["recall"] = r_sum / count;
  return report;
}

/// Each album's first story queries a pool of `pool_size` albums (0: all of
/// them): the album itself plus the following ones in dataset order, wrapping
/// around. R@k are means of per-query hit indicators; MedR is the median rank.
inline MetricReport evaluate_retrieval(const ModelParams& params, const std::vector<Album>& albums,
                                       std::size_t pool_size, bool per_word = false) {
  if (albums.empty()) throw DataError("eval-retrieval: no albums");
  const std::size_t pool = pool_size == 0 ? albums.size() : pool_size;
  if (pool > albums.size()) {
    throw ConfigError("pool size " + std::to_string(pool) + " exceeds the " + std::to_string(albums.size()) +
                      " available albums");
  }
  MetricReport report;
  report.task = "retrieval";
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < albums.size(); ++q) {
    if (albums[q].stories.empty()) throw DataError("album " + albums[q].album_id + " has no story to query with");
    std::vector<const Tensor*> candidates;
    for (std::size_t j = 0; j < pool; ++j) candidates.push_back(&albums[(q + j) % albums.size()].features);
    const RetrievalEntry entry = retrieve(params, albums[q].stories.front(), candidates, 0, per_word);
    ranks.push_back(entry.rank);
    report.per_item.push_back({{"album_id", albums[q].album_id},
                               {"rank", entry.rank},
                               {"hit_at_1", entry.rank <= 1 ? 1.0 : 0.0},
                               {"hit_at_5", entry.rank <= 5 ? 1.0 : 0.0},
                               {"hit_at_10", entry.rank <= 10 ? 1.0 : 0.0}});
  }
  const RetrievalResult result = RetrievalResult::from_ranks(ranks);
  report.aggregate["r_at_1"] = result.recall_at_1;
  report.aggregate["r_at_5"] = result.recall_at_5;
  report.aggregate["r_at_10"] = result.recall_at_10;
  report.aggregate["medr"] = result.median;
  report.aggregate["pool_size"] = static_cast<double>(pool);
  return report;
}

/// Fraction of (story, fresh shuffled negative) pairs with log p(S) > log p(S').
inline double order_preference_rate(const ModelParams& params, const std::vector<Album>& albums, Rng& rng,
                                    std::size_t negatives_per_story = 1) {
  Tape::Suspend no_grad;
  std::size_t wins = 0;
  std::size_t total = 0;
  for (const Album& album : albums) {
    for (const Story& story : album.stories) {
      const double pos = model_log_prob(params, album.features, story).item();
      for (std::size_t j = 0; j < negatives_per_story; ++j) {
        const double neg_lp = model_log_prob(params, album.features, make_negative(story, rng)).item();
        wins += pos > neg_lp ? 1 : 0;
        ++total;
      }
    }
  }
  if (total == 0) throw DataError("order_preference_rate: no stories");
  return static_cast<double>(wins) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Gradient checks on a toy instance.

struct ToyInstance {
  ModelParams params;
  Tensor features;  // [n x k]
  Story story;
};

/// n=2 photos, k=4, |V|=7 (ids 3..6 act as words), short random sentences.
inline ToyInstance make_toy_instance(std::uint64_t seed, ModelKind kind = ModelKind::kHierarchical) {
  Rng rng(seed);
  ModelConfig mc;
  mc.k = 4;
  mc.d_s = 3;
  mc.d_g = 4;
  mc.d_w = 3;
  mc.vocab = 7;
  mc.kind = kind;
  ToyInstance toy;
  toy.params = ModelParams::init(mc, rng);
  std::vector<Real> f(2 * mc.k);
  for (Real& x : f) x = rng.uniform(-1.0, 1.0);
  toy.features = Tensor({2, mc.k}, std::move(f));
  for (std::size_t t = 0; t < kStorySentences; ++t) {
    Sentence s;
    const std::size_t words = 1 + rng.below(2);
    for (std::size_t w = 0; w < words; ++w) s.push_back(static_cast<TokenId>(3 + rng.below(4)));
    s.push_back(kEos);
    toy.story.sentences.push_back(std::move(s));
  }
  return toy;
}

struct ModuleCheck {
  std::string module;
  GradCheckReport report;
};

/// Central-difference checks per module; "training" is the full model under
/// total_loss with lambda = 1 and a fixed negative.
inline std::vector<ModuleCheck> gradcheck_suite(std::uint64_t seed, double step = 1e-5, double tol = 1e-4) {
  std::vector<ModuleCheck> out;
  Rng rng(seed);

  {
    std::vector<Tensor> ps{seeded_init(rng, {3, 4}, UniformInit{-1.0, 1.0}), seeded_init(rng, {4}, UniformInit{-1.0, 1.0}),
                           seeded_init(rng, {4, 3}, UniformInit{-1.0, 1.0})};
    const Tensor weights = seeded_init(rng, {3, 3}, UniformInit{-1.0, 1.0});
    const Tensor mixer = seeded_init(rng, {7, 3}, UniformInit{-1.0, 1.0});
    auto f = [&] {
      const Tensor hidden = sigmoid(add_bias(matmul(tanh(ps[0]), ps[2]), Tensor::vector({0.1, -0.2, 0.3})));
      const Tensor mixed = concat({hidden, repeat_rows(relu(ps[1] * 2.0 - 0.5), 3)}, 1);
      return sum(log_softmax(matmul(mixed, mixer) * weights, 1)) + mean(exp(ps[1] * 0.5)) +
             sum(log(sigmoid(ps[1]))) / sum(softmax(ps[1], 0) + 1.0);
    };
    out.push_back({"numerics", grad_check(f, ps, step, tol)});
  }

  {
    const GruParams fwd = GruParams::init(rng, 4, 2);
    const GruParams bwd = GruParams::init(rng, 4, 2);
    const MlpParams head = MlpParams::init(rng, {4, 4, 1});
    const EmbeddingTable table = EmbeddingTable::init(rng, 5, 4);
    NamedTensors named;
    fwd.append_named("fwd", named);
    bwd.append_named("bwd", named);
    head.append_named("head", named);
    named.emplace_back("embedding", table.table);
    std::vector<Tensor> ps;
    for (auto& [name, t] : named) ps.push_back(t);
    auto f = [&] {
      const std::vector<Tensor> xs{embed(table, 1), embed(table, 4), embed(table, 2)};
      std::vector<Tensor> scores;
      for (const Tensor& h : bi_gru(fwd, bwd, xs)) scores.push_back(mlp(head, h));
      return sum(tanh(add_n(scores)));
    };
    out.push_back({"recurrent", grad_check(f, ps, step, tol)});
  }

  const struct {
    const char* name;
    ModelKind kind;
  } models[] = {{"model", ModelKind::kHierarchical},
                {"model.enc-dec", ModelKind::kEncDec},
                {"model.enc-attn-dec", ModelKind::kEncAttnDec}};
  for (const auto& m : models) {
    ToyInstance toy = make_toy_instance(seed + 17, m.kind);
    std::vector<Tensor> ps = toy.params.trainable();
    auto f = [&] { return model_log_prob(toy.params, toy.features, toy.story); };
    out.push_back({m.name, grad_check(f, ps, step, tol)});
  }

  {
    ToyInstance toy = make_toy_instance(seed + 17);
    std::vector<Tensor> ps = toy.params.trainable();
    ps.push_back(toy.features);
    TrainConfig cfg;
    cfg.lambda = 1.0;
    cfg.margin = 1.0;
    auto f = [&] {
      Rng negatives(seed + 29);
      return total_loss(toy.params, toy.features, toy.story, cfg, negatives).total;
    };
    out.push_back({"training", grad_check(f, ps, step, tol)});
  }
  return out;
}

HATSTORY_END
