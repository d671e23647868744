#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/model.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

// ---------------------------------------------------------------------------
// Album summarization.

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// Scores `pred` against the union G of the ground-truth sets:
/// precision = |pred & G| / |pred|, recall = |pred & G| / |G|.
template <class Id>
PrecisionRecall summary_precision_recall(std::span<const Id> pred, const std::vector<std::vector<Id>>& gt_sets) {
  const std::set<Id> predicted(pred.begin(), pred.end());
  if (predicted.size() != pred.size()) throw ContractError("summary_precision_recall: duplicate predicted ids");
  if (pred.empty()) throw ContractError("summary_precision_recall: empty prediction");
  std::set<Id> truth;
  for (const auto& s : gt_sets) truth.insert(s.begin(), s.end());
  if (truth.empty()) throw ContractError("summary_precision_recall: empty ground truth");
  std::size_t hits = 0;
  for (const Id& id : predicted) hits += truth.count(id);
  return {static_cast<double>(hits) / static_cast<double>(pred.size()),
          static_cast<double>(hits) / static_cast<double>(truth.size())};
}

/// Column sums of `attn` [T x n]; returns the `k` columns with the largest
/// totals in descending order, ties to the lower index.
inline std::vector<std::size_t> attention_aggregate_topk(const Tensor& attn, std::size_t k = kStorySentences) {
  if (attn.rank() != 2) throw DimensionError("attention_aggregate_topk: expected [T x n], got " + shape_string(attn.shape()));
  const std::size_t steps = attn.dim(0);
  const std::size_t n = attn.dim(1);
  if (n < k) {
    throw ContractError("attention_aggregate_topk: album has " + std::to_string(n) + " photos, need " + std::to_string(k));
  }
  std::vector<double> totals(n, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) totals[i] += attn.at(t, i);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return totals[a] > totals[b]; });
  order.resize(k);
  return order;
}

// ---------------------------------------------------------------------------
// Generation metrics.

namespace detail {

template <class Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(const std::vector<Token>& words, std::size_t n) {
  std::map<std::vector<Token>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++counts[std::vector<Token>(words.begin() + i, words.begin() + i + n)];
  return counts;
}

}  // namespace detail

/// Corpus BLEU-n with uniform weights: clipped n-gram precisions pooled over
/// the corpus, geometric mean, brevity penalty exp(1 - r/c) when c <= r, where
/// r sums the reference lengths closest to each hypothesis (shorter on ties).
/// Any zero precision gives 0; orders longer than every hypothesis are left
/// out of the mean.
template <class Token>
double bleu_n(const std::vector<std::vector<Token>>& hypotheses,
              const std::vector<std::vector<std::vector<Token>>>& references, std::size_t n = 3) {
  if (hypotheses.empty()) throw ContractError("bleu_n: empty corpus");
  if (hypotheses.size() != references.size()) throw ContractError("bleu_n: hypothesis and reference counts differ");
  if (n == 0) throw ContractError("bleu_n: order must be positive");
  std::vector<double> matched(n, 0.0);
  std::vector<double> total(n, 0.0);
  double hyp_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& refs = references[i];
    if (refs.empty()) throw ContractError("bleu_n: item without references");
    hyp_len += static_cast<double>(hyp.size());
    std::size_t closest = refs.front().size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
      if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) closest = r.size();
    }
    ref_len += static_cast<double>(closest);
    for (std::size_t order = 1; order <= n; ++order) {
      const auto hyp_counts = detail::ngram_counts(hyp, order);
      std::map<std::vector<Token>, std::size_t> max_ref;
      for (const auto& r : refs) {
        for (const auto& [gram, c] : detail::ngram_counts(r, order)) max_ref[gram] = std::max(max_ref[gram], c);
      }
      for (const auto& [gram, c] : hyp_counts) {
        auto it = max_ref.find(gram);
        matched[order - 1] += static_cast<double>(std::min(c, it == max_ref.end() ? std::size_t{0} : it->second));
        total[order - 1] += static_cast<double>(c);
      }
    }
  }
  if (hyp_len == 0.0) return ref_len == 0.0 ? 1.0 : 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t o = 0; o < n; ++o) {
    if (total[o] == 0.0) continue;  // no hypothesis that long
    if (matched[o] == 0.0) return 0.0;
    log_sum += std::log(matched[o] / total[o]);
    ++orders;
  }
  const double bp = hyp_len <= ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

/// Single-reference convenience form.
template <class Token>
double bleu_n(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references,
              std::size_t n = 3) {
  std::vector<std::vector<std::vector<Token>>> wrapped;
  for (const auto& r : references) wrapped.push_back({r});
  return bleu_n(hypotheses, wrapped, n);
}

/// CIDEr (no length penalty, no clipping): per n in 1..4, TF-IDF vectors with
/// tf the raw n-gram count and idf log(N / max(1, df)), df counted over the
/// items' reference sets; cosine similarity averaged over references and over
/// n, times 10, averaged over items. Zero vectors have similarity 0.
template <class Token>
std::vector<double> cider_per_item(const std::vector<std::vector<Token>>& hypotheses,
                                   const std::vector<std::vector<std::vector<Token>>>& references) {
  constexpr std::size_t kMaxOrder = 4;
  if (references.empty()) throw ContractError("cider: empty reference corpus");
  if (hypotheses.size() != references.size()) throw ContractError("cider: hypothesis and reference counts differ");
  std::map<std::vector<Token>, double> df;
  for (const auto& refs : references) {
    if (refs.empty()) throw ContractError("cider: item without references");
    std::set<std::vector<Token>> seen;
    for (const auto& r : refs) {
      for (std::size_t n = 1; n <= kMaxOrder; ++n) {
        for (const auto& [gram, c] : detail::ngram_counts(r, n)) seen.insert(gram);
      }
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_n = std::log(static_cast<double>(references.size()));
  using Vec = std::map<std::vector<Token>, double>;
  auto vectorize = [&](const std::vector<Token>& words, std::size_t n) {
    Vec v;
    for (const auto& [gram, c] : detail::ngram_counts(words, n)) {
      auto it = df.find(gram);
      v[gram] = static_cast<double>(c) * (log_n - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second)));
    }
    return v;
  };
  auto cosine = [](const Vec& a, const Vec& b) {
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (const auto& [g, x] : a) {
      na += x * x;
      auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& [g, y] : b) nb += y * y;
    return na == 0.0 || nb == 0.0 ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
  };
  std::vector<double> scores;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    double score = 0.0;
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      const Vec hv = vectorize(hypotheses[i], n);
      double sim = 0.0;
      for (const auto& r : references[i]) sim += cosine(hv, vectorize(r, n));
      score += sim / static_cast<double>(references[i].size());
    }
    scores.push_back(10.0 * score / static_cast<double>(kMaxOrder));
  }
  return scores;
}

template <class Token>
double cider(const std::vector<std::vector<Token>>& hypotheses,
             const std::vector<std::vector<std::vector<Token>>>& references) {
  const auto per_item = cider_per_item(hypotheses, references);
  return std::accumulate(per_item.begin(), per_item.end(), 0.0) / static_cast<double>(per_item.size());
}

/// Story tokens as one sequence, EOS markers removed.
inline std::vector<TokenId> flatten_story(const Story& story) {
  std::vector<TokenId> out;
  for (const auto& s : story.sentences) {
    for (TokenId id : s) {
      if (id != kEos) out.push_back(id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval.

inline double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw ContractError("recall_at_k: empty rank list");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double median_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw ContractError("median_rank: empty rank list");
  std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size() / 2;
  if (sorted.size() % 2 == 1) return static_cast<double>(sorted[m]);
  return 0.5 * static_cast<double>(sorted[m - 1] + sorted[m]);
}

/// 1-based rank of `target` under descending score; equal scores rank the
/// lower index first.
inline std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw IndexError("rank_of: target outside score list");
  std::size_t rank = 1;
  for (std::size_t m = 0; m < scores.size(); ++m) {
    if (scores[m] > scores[target] || (m < target && scores[m] == scores[target])) ++rank;
  }
  return rank;
}

struct RetrievalEntry {
  std::size_t rank = 0;
  std::vector<double> scores;
};

/// Scores every album by log p(query | album) (soft selection for the
/// hierarchical model) and ranks `true_index` among them.
inline RetrievalEntry retrieve(const ModelParams& params, const Story& query, const std::vector<const Tensor*>& albums,
                               std::size_t true_index, bool per_word = false) {
  Tape::Suspend no_grad;
  RetrievalEntry out;
  const double words = static_cast<double>(query.token_count());
  for (const Tensor* features : albums) {
    const double lp = model_log_prob(params, *features, query).item();
    out.scores.push_back(per_word ? lp / words : lp);
  }
  out.rank = rank_of(out.scores, true_index);
  return out;
}

struct RetrievalResult {
  std::vector<std::size_t> ranks;
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double median = 0.0;

  static RetrievalResult from_ranks(std::vector<std::size_t> ranks) {
    RetrievalResult r;
    r.recall_at_1 = recall_at_k(ranks, 1);
    r.recall_at_5 = recall_at_k(ranks, 5);
    r.recall_at_10 = recall_at_k(ranks, 10);
    r.median = median_rank(ranks);
    r.ranks = std::move(ranks);
    return r;
  }
};

// ---------------------------------------------------------------------------
// Reports.

struct MetricReport {
  std::string task;
  std::vector<nlohmann::json> per_item;  // flat objects, one per album or query
  std::map<std::string, double> aggregate;
  nlohmann::json fingerprint = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"task", task}, {"per_item", per_item}, {"aggregate", aggregate}, {"fingerprint", fingerprint}};
  }

  /// One row per item; columns are the union of item keys in sorted order.
  std::string to_csv() const {
    std::set<std::string> columns;
    for (const auto& item : per_item) {
      for (const auto& [key, value] : item.items()) columns.insert(key);
    }
    std::ostringstream os;
    bool first = true;
    for (const auto& c : columns) {
      os << (first ? "" : ",") << c;
      first = false;
    }
    os << '\n';
    for (const auto& item : per_item) {
      first = true;
      for (const auto& c : columns) {
        os << (first ? "" : ",");
        first = false;
        if (!item.contains(c)) continue;
        const auto& v = item.at(c);
        os << (v.is_string() ? v.get<std::string>() : v.dump());
      }
      os << '\n';
    }
    return os.str();
  }
};

HATSTORY_END
