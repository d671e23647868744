#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hatstory/errors.hpp"
#include "hatstory/random.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kStorySentences = 5;
inline constexpr const char* kDatasetFormat = "hatstory-v1";

using Sentence = std::vector<TokenId>;

/// One sentence per summary step, each terminated by EOS.
struct Story {
  std::vector<Sentence> sentences;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }

  bool operator==(const Story&) const = default;
};

/// Throws ContractError unless `story` has `steps` EOS-terminated sentences of
/// ids below `vocab_size`.
inline void validate_story(const Story& story, std::size_t steps, std::size_t vocab_size) {
  if (story.sentences.size() != steps) {
    throw ContractError("story has " + std::to_string(story.sentences.size()) + " sentences, expected " +
                        std::to_string(steps));
  }
  for (const auto& s : story.sentences) {
    if (s.empty() || s.back() != kEos) throw ContractError("story sentence does not end in EOS");
    for (TokenId id : s) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab_size));
      }
    }
  }
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<TokenId>(i);
  }

  /// Ids are assigned by descending frequency, then lexicographically; tokens
  /// seen fewer than `min_count` times are left out (and map to UNK).
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count = 1) {
    std::map<std::string, std::size_t> counts;
    for (const auto& sent : corpus) {
      for (const auto& tok : sent) ++counts[tok];
    }
    std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    v.min_count_ = min_count;
    for (const auto& [tok, count] : ordered) {
      if (count < min_count || v.ids_.count(tok)) continue;
      v.ids_[tok] = static_cast<TokenId>(v.tokens_.size());
      v.tokens_.push_back(tok);
    }
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    if (tokens.size() < 4 || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
      throw FormatError("vocabulary token list must start with the four special tokens");
    }
    for (std::size_t i = 4; i < tokens.size(); ++i) {
      if (v.ids_.count(tokens[i])) throw FormatError("duplicate vocabulary token '" + tokens[i] + "'");
      v.ids_[tokens[i]] = static_cast<TokenId>(i);
      v.tokens_.push_back(tokens[i]);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_count() const { return min_count_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t min_count_ = 1;
};

/// Lowercases and splits on whitespace; every ASCII punctuation character is a
/// token of its own.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline Sentence tokenize(const std::string& text, const Vocabulary& vocab) {
  Sentence ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  ids.push_back(kEos);
  return ids;
}

/// Inverse of tokenize up to whitespace: drops EOS, joins with single spaces.
inline std::string detokenize(const Sentence& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

struct Album {
  std::string album_id;
  std::vector<std::string> photo_ids;
  Tensor features;  // [n x k]
  std::vector<std::vector<std::string>> gt_summaries;
  std::vector<Story> stories;

  std::size_t size() const { return photo_ids.size(); }

  std::size_t photo_index(const std::string& photo_id) const {
    auto it = std::find(photo_ids.begin(), photo_ids.end(), photo_id);
    if (it == photo_ids.end()) throw IndexError("album " + album_id + " has no photo '" + photo_id + "'");
    return static_cast<std::size_t>(it - photo_ids.begin());
  }
};

struct Dataset {
  std::size_t k = 0;
  Vocabulary vocab;
  std::vector<Album> albums;
};

struct AlbumBounds {
  std::size_t min_photos = kStorySentences;
  std::size_t max_photos = 1000000;
};

inline void validate_album(const Album& a, std::size_t k, std::size_t vocab_size, const AlbumBounds& bounds = {}) {
  const std::size_t n = a.photo_ids.size();
  if (n < std::max(bounds.min_photos, kStorySentences) || n > bounds.max_photos) {
    throw DataError("album " + a.album_id + ": photo count " + std::to_string(n) + " outside [" +
                    std::to_string(std::max(bounds.min_photos, kStorySentences)) + ", " +
                    std::to_string(bounds.max_photos) + "]");
  }
  if (a.features.shape() != Shape{n, k}) {
    throw DataError("album " + a.album_id + ": feature matrix " + shape_string(a.features.shape()) + " expected [" +
                    std::to_string(n) + "x" + std::to_string(k) + "]");
  }
  if (std::set<std::string>(a.photo_ids.begin(), a.photo_ids.end()).size() != n) {
    throw DataError("album " + a.album_id + ": duplicate photo ids");
  }
  if (a.gt_summaries.size() > 2) throw DataError("album " + a.album_id + ": more than two gt_summaries");
  for (const auto& summary : a.gt_summaries) {
    if (summary.size() != kStorySentences ||
        std::set<std::string>(summary.begin(), summary.end()).size() != kStorySentences) {
      throw DataError("album " + a.album_id + ": gt_summary must list 5 distinct photo ids");
    }
    for (const auto& id : summary) {
      if (std::find(a.photo_ids.begin(), a.photo_ids.end(), id) == a.photo_ids.end()) {
        throw DataError("album " + a.album_id + ": gt_summary photo '" + id + "' not in album");
      }
    }
  }
  for (const Story& s : a.stories) {
    try {
      validate_story(s, kStorySentences, vocab_size);
    } catch (const Error& e) {
      throw DataError("album " + a.album_id + ": " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// JSON-lines dataset file: a header line {"format":"hatstory-v1","k":K}, then
// one album object per line with stories stored as plain text.

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << nlohmann::json{{"format", kDatasetFormat}, {"k", ds.k}}.dump() << '\n';
  for (const Album& a : ds.albums) {
    nlohmann::json photos = nlohmann::json::array();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto r = a.features.data().subspan(i * ds.k, ds.k);
      photos.push_back({{"photo_id", a.photo_ids[i]}, {"features", std::vector<double>(r.begin(), r.end())}});
    }
    nlohmann::json stories = nlohmann::json::array();
    for (const Story& s : a.stories) {
      std::vector<std::string> sents;
      for (const auto& sent : s.sentences) sents.push_back(detokenize(sent, ds.vocab));
      stories.push_back({{"sentences", sents}});
    }
    nlohmann::json line{{"album_id", a.album_id}, {"photos", photos}, {"gt_summaries", a.gt_summaries},
                        {"stories", stories}};
    out << line.dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

struct LoadOptions {
  std::size_t min_count = 1;
  AlbumBounds bounds;
  std::optional<Vocabulary> vocab;  // e.g. a checkpoint's; replaces the one built from the stories
};

inline Dataset load_dataset(const std::string& path, const LoadOptions& opts = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path);
  std::string line;
  std::size_t line_no = 0;
  Dataset ds;
  if (!std::getline(in, line)) throw DataError(path + ": missing header line");
  ++line_no;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != kDatasetFormat) throw DataError("unknown format");
    ds.k = header.at("k").get<std::size_t>();
    if (ds.k == 0) throw DataError("k must be positive");
  } catch (const std::exception& e) {
    throw DataError(path + ":1: bad header: " + e.what());
  }

  struct Pending {
    Album album;
    std::vector<std::vector<std::string>> story_text;
  };
  std::vector<Pending> pending;
  std::vector<std::vector<std::string>> corpus;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Pending p;
    try {
      const auto j = nlohmann::json::parse(line);
      p.album.album_id = j.at("album_id").get<std::string>();
      std::vector<Real> features;
      for (const auto& photo : j.at("photos")) {
        p.album.photo_ids.push_back(photo.at("photo_id").get<std::string>());
        const auto f = photo.at("features").get<std::vector<Real>>();
        if (f.size() != ds.k) {
          throw DataError("photo " + p.album.photo_ids.back() + " has " + std::to_string(f.size()) +
                          " features, header declares k=" + std::to_string(ds.k));
        }
        features.insert(features.end(), f.begin(), f.end());
      }
      if (p.album.photo_ids.empty()) throw DataError("photo count 0");
      p.album.features = Tensor({p.album.photo_ids.size(), ds.k}, std::move(features));
      if (j.contains("gt_summaries")) {
        p.album.gt_summaries = j.at("gt_summaries").get<std::vector<std::vector<std::string>>>();
      }
      if (j.contains("stories")) {
        for (const auto& s : j.at("stories")) {
          p.story_text.push_back(s.at("sentences").get<std::vector<std::string>>());
          if (p.story_text.back().size() != kStorySentences) {
            throw DataError("story has " + std::to_string(p.story_text.back().size()) + " sentences, expected 5");
          }
          for (const auto& sent : p.story_text.back()) corpus.push_back(split_words(sent));
        }
      }
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": album '" + p.album.album_id + "': " + e.what());
    }
    pending.push_back(std::move(p));
  }

  ds.vocab = opts.vocab ? *opts.vocab : Vocabulary::build(corpus, opts.min_count);
  std::set<std::string> seen_ids;
  for (Pending& p : pending) {
    for (const auto& text : p.story_text) {
      Story s;
      for (const auto& sent : text) s.sentences.push_back(tokenize(sent, ds.vocab));
      p.album.stories.push_back(std::move(s));
    }
    if (!seen_ids.insert(p.album.album_id).second) throw DataError("duplicate album_id " + p.album.album_id);
    validate_album(p.album, ds.k, ds.vocab.size(), opts.bounds);
    ds.albums.push_back(std::move(p.album));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic albums with planted summaries.

struct SynthSpec {
  std::size_t albums = 20;
  std::size_t n = 10;
  std::size_t k = 16;
  std::size_t classes = 5;
  std::uint64_t seed = 7;
  double noise_sigma = 0.05;
};

namespace synth {

inline const std::vector<std::vector<std::string>>& class_nouns() {
  static const std::vector<std::vector<std::string>> nouns{
      {"dog", "puppy"},    {"beach", "ocean"},   {"cake", "dessert"}, {"car", "truck"},
      {"tree", "forest"},  {"mountain", "hill"}, {"city", "street"},  {"boat", "ship"},
      {"bride", "groom"},  {"band", "concert"},  {"kid", "baby"},     {"flower", "garden"},
      {"church", "tower"}, {"game", "team"},     {"food", "dinner"},  {"snow", "ice"},
  };
  return nouns;
}

// Each template expands to 3..6 tokens with the noun in place of "#".
inline const std::vector<std::vector<std::string>>& templates() {
  static const std::vector<std::vector<std::string>> t{
      {"we", "saw", "the", "#", "."},
      {"the", "#", "was", "great", "."},
      {"look", "at", "the", "#", "!"},
      {"a", "#", "!"},
  };
  return t;
}

inline std::vector<std::string> nouns_for(std::size_t cls) {
  const auto& table = class_nouns();
  if (cls < table.size()) return table[cls];
  return {"thing" + std::to_string(cls), "object" + std::to_string(cls)};
}

/// True when `words` is one template instantiated with one of the nouns of `cls`.
inline bool parses_as_class(const std::vector<std::string>& words, std::size_t cls) {
  for (const auto& t : templates()) {
    for (const auto& noun : nouns_for(cls)) {
      std::vector<std::string> expanded = t;
      std::replace(expanded.begin(), expanded.end(), std::string("#"), noun);
      if (expanded == words) return true;
    }
  }
  return false;
}

}  // namespace synth

struct SynthAlbumInfo {
  std::vector<std::size_t> salient;  // ascending photo positions
  std::vector<std::size_t> classes;  // class of each salient photo
};

struct SynthDataset {
  Dataset dataset;
  std::vector<SynthAlbumInfo> info;
};

/// Five salient photos per album carry a unit class indicator in coordinates
/// [0, classes); every coordinate of every photo gets N(0, sigma) noise.
/// Sentence t of the single story describes the class of the t-th salient
/// photo in album order.
inline SynthDataset synth_generate(const SynthSpec& spec) {
  if (spec.classes == 0 || spec.k < spec.classes + 1) {
    throw ConfigError("synth: need classes >= 1 and k >= classes + 1 (k=" + std::to_string(spec.k) +
                      ", classes=" + std::to_string(spec.classes) + ")");
  }
  if (spec.n < kStorySentences) throw ConfigError("synth: albums need at least 5 photos");
  if (spec.noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be non-negative");
  Rng rng(spec.seed);
  SynthDataset out;
  out.dataset.k = spec.k;
  std::vector<std::vector<std::vector<std::string>>> texts;
  for (std::size_t a = 0; a < spec.albums; ++a) {
    Album album;
    album.album_id = "album" + std::to_string(a);
    std::vector<std::size_t> positions(spec.n);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(positions));
    SynthAlbumInfo info;
    info.salient.assign(positions.begin(), positions.begin() + kStorySentences);
    std::sort(info.salient.begin(), info.salient.end());
    for (std::size_t t = 0; t < kStorySentences; ++t) info.classes.push_back(rng.below(spec.classes));

    std::vector<Real> features(spec.n * spec.k);
    for (Real& f : features) f = spec.noise_sigma > 0.0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
    for (std::size_t t = 0; t < kStorySentences; ++t) features[info.salient[t] * spec.k + info.classes[t]] += 1.0;
    album.features = Tensor({spec.n, spec.k}, std::move(features));
    for (std::size_t i = 0; i < spec.n; ++i) album.photo_ids.push_back(album.album_id + "_p" + std::to_string(i));
    std::vector<std::string> summary;
    for (std::size_t pos : info.salient) summary.push_back(album.photo_ids[pos]);
    album.gt_summaries.push_back(summary);

    std::vector<std::vector<std::string>> story_words;
    for (std::size_t t = 0; t < kStorySentences; ++t) {
      const auto& tmpl = synth::templates()[rng.below(synth::templates().size())];
      const auto nouns = synth::nouns_for(info.classes[t]);
      const auto& noun = nouns[rng.below(nouns.size())];
      std::vector<std::string> words = tmpl;
      std::replace(words.begin(), words.end(), std::string("#"), noun);
      story_words.push_back(std::move(words));
    }
    texts.push_back(std::move(story_words));
    out.dataset.albums.push_back(std::move(album));
    out.info.push_back(std::move(info));
  }

  std::vector<std::vector<std::string>> corpus;
  for (const auto& story : texts) corpus.insert(corpus.end(), story.begin(), story.end());
  out.dataset.vocab = Vocabulary::build(corpus, 1);
  for (std::size_t a = 0; a < texts.size(); ++a) {
    Story s;
    for (const auto& words : texts[a]) {
      Sentence ids;
      for (const auto& w : words) ids.push_back(out.dataset.vocab.id(w));
      ids.push_back(kEos);
      s.sentences.push_back(std::move(ids));
    }
    out.dataset.albums[a].stories.push_back(std::move(s));
  }
  return out;
}

HATSTORY_END
