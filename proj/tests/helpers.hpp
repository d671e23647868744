#pragma once

#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <span>
#include <vector>

#include "hatstory/hatstory.hpp"

namespace hatstory::test {

// Property suites are instantiated over these seeds; suite names end in
// "Property" so the acceptance run can select them.
inline auto seeds() { return ::testing::Range<std::uint64_t>(1, 25); }

class Seeded : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  std::uint64_t seed() const { return GetParam(); }
};

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  return seeded_init(rng, shape, UniformInit{lo, hi});
}

inline void expect_all_near(std::span<const Real> a, std::span<const Real> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(static_cast<double>(a[i]), static_cast<double>(b[i]), tol) << i;
}

inline void expect_all_eq(std::span<const Real> a, std::span<const Real> b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

inline ModelConfig small_config(std::size_t k, std::size_t vocab, ModelKind kind = ModelKind::kHierarchical) {
  ModelConfig mc;
  mc.k = k;
  mc.d_s = 3;
  mc.d_g = 5;
  mc.d_w = 3;
  mc.vocab = vocab;
  mc.kind = kind;
  return mc;
}

inline ModelParams random_model(Rng& rng, std::size_t k, std::size_t vocab, ModelKind kind = ModelKind::kHierarchical) {
  return ModelParams::init(small_config(k, vocab, kind), rng);
}

/// Words drawn from ids [3, vocab), each sentence EOS-terminated.
inline Story random_story(Rng& rng, std::size_t vocab, std::size_t steps = kStorySentences, std::size_t max_words = 3) {
  Story s;
  for (std::size_t t = 0; t < steps; ++t) {
    Sentence sent;
    const std::size_t words = 1 + rng.below(max_words);
    for (std::size_t w = 0; w < words; ++w) sent.push_back(static_cast<TokenId>(3 + rng.below(vocab - 3)));
    sent.push_back(kEos);
    s.sentences.push_back(std::move(sent));
  }
  return s;
}

/// Argmax decoding from `h0`; ties to the lower id; stops at EOS or max_len.
inline Sentence greedy_decode(const ModelParams& p, const Tensor& g, std::size_t max_len, Tensor h) {
  Tape::Suspend no_grad;
  Sentence out;
  TokenId prev = kBos;
  while (out.size() < max_len) {
    WordStep step = decode_word_step(p, prev, g, h);
    const auto logits = step.logits.data();
    const auto best = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(best);
    h = step.state;
    prev = best;
    if (best == kEos) break;
  }
  return out;
}

inline Real sequence_log_prob(const ModelParams& p, const Tensor& g, const Sentence& s, Tensor h) {
  Tape::Suspend no_grad;
  Real lp = 0.0;
  TokenId prev = kBos;
  for (TokenId t : s) {
    WordStep step = decode_word_step(p, prev, g, h);
    lp += log_softmax(step.logits)[static_cast<std::size_t>(t)];
    h = step.state;
    prev = t;
  }
  return lp;
}

inline SynthDataset small_synth(std::uint64_t seed, std::size_t albums = 4, double noise = 0.05) {
  SynthSpec spec;
  spec.albums = albums;
  spec.n = 6;
  spec.k = 8;
  spec.classes = 3;
  spec.seed = seed;
  spec.noise_sigma = noise;
  return synth_generate(spec);
}

/// Fresh per-test directory under the system temp dir.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  std::string name = std::string(info->test_suite_name()) + "." + info->name();
  for (char& c : name) {
    if (c == '/') c = '_';
  }
  const auto dir = std::filesystem::temp_directory_path() / "hatstory_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace hatstory::test
