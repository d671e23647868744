#include <cmath>
#include <set>

#include "gradcheck_ext.hpp"
#include "helpers.hpp"

using namespace hatstory;
using namespace hatstory::test;

namespace {

void zero_gru(GruParams& g) { g = GruParams::zeros(g.input_dim(), g.hidden_dim()); }

void zero_mlp(MlpParams& m, double out_bias = 0.0) {
  for (auto& l : m.layers) {
    l.weight = Tensor::zeros(l.weight.shape());
    l.bias = Tensor::zeros(l.bias.shape());
  }
  m.layers.back().bias = Tensor::full(m.layers.back().bias.shape(), out_bias);
}

Tensor one_hot_rows(std::size_t n, std::size_t k) {
  std::vector<Real> f(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) f[i * k + i] = 1.0;
  return Tensor({n, k}, f);
}

// y = x W + b computed with explicit loops.
std::vector<Real> affine(const std::vector<Real>& x, const Tensor& w, const Tensor& b) {
  std::vector<Real> y(w.dim(1));
  for (std::size_t j = 0; j < y.size(); ++j) {
    y[j] = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w.at(i, j);
  }
  return y;
}

std::vector<Real> hand_gru(const GruParams& p, const std::vector<Real>& x, const std::vector<Real>& h) {
  auto lin = [&](const Tensor& w, const Tensor& u, const Tensor& b, const std::vector<Real>& hh) {
    std::vector<Real> a = affine(x, w, b);
    const std::vector<Real> c = affine(hh, u, Tensor::zeros({u.dim(1)}));
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += c[j];
    return a;
  };
  const auto az = lin(p.w_z, p.u_z, p.b_z, h);
  const auto ar = lin(p.w_r, p.u_r, p.b_r, h);
  std::vector<Real> rh(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) rh[j] = h[j] / (1.0 + std::exp(-ar[j]));
  const auto ac = lin(p.w_h, p.u_h, p.b_h, rh);
  std::vector<Real> out(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    const Real z = 1.0 / (1.0 + std::exp(-az[j]));
    out[j] = (1.0 - z) * h[j] + z * std::tanh(ac[j]);
  }
  return out;
}

std::vector<Real> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Real hand_log_softmax(const std::vector<Real>& logits, std::size_t i) {
  Real m = logits[0];
  for (Real v : logits) m = std::max(m, v);
  Real s = 0.0;
  for (Real v : logits) s += std::exp(v - m);
  return logits[i] - m - std::log(s);
}

// Selector whose pick at step t is photo order[t] with probability 1 - O(e^-50).
// Photos are one-hot rows e_i, the encoder is zeroed so v_i = e_i, and the
// selector state follows the fixed schedule s_t = tanh(2) (1 - 2^-(t+1)); each
// photo has two steep hidden units forming a window around its step.
ModelParams rigged_model(const std::vector<std::size_t>& order, std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig mc;
  mc.k = 6;
  mc.d_s = 4;
  mc.d_g = 5;
  mc.d_w = 3;
  mc.vocab = vocab;
  ModelParams p = ModelParams::init(mc, rng);
  zero_gru(p.enc_fwd);
  zero_gru(p.enc_bwd);
  zero_gru(p.sel_gru);
  p.sel_gru.b_h = Tensor::full({mc.d_s}, 2.0);
  std::vector<Real> s;
  for (std::size_t t = 0; t < order.size(); ++t) s.push_back(std::tanh(Real(2)) * (1 - std::pow(Real(0.5), Real(t + 1))));
  const std::size_t width = mc.d_s + mc.k;
  std::vector<Real> w0(width * width, 0.0), b0(width, 0.0), w1(width, 0.0);
  const Real m = 4000.0;
  for (std::size_t t = 0; t < order.size(); ++t) {
    const Real lo = t == 0 ? 0.0 : (s[t - 1] + s[t]) / 2;
    const Real hi = t + 1 == order.size() ? 2.0 : (s[t] + s[t + 1]) / 2;
    const std::size_t a = 2 * t, b = 2 * t + 1;
    w0[0 * width + a] = m;
    w0[0 * width + b] = m;
    w0[(mc.d_s + order[t]) * width + a] = m;
    w0[(mc.d_s + order[t]) * width + b] = m;
    b0[a] = -m * lo - m;
    b0[b] = -m * hi - m;
    w1[a] = 50.0;
    w1[b] = -50.0;
  }
  p.sel_mlp.layers[0].weight = Tensor({width, width}, w0);
  p.sel_mlp.layers[0].bias = Tensor::vector(b0);
  p.sel_mlp.layers[1].weight = Tensor({width, 1}, w1);
  p.sel_mlp.layers[1].bias = Tensor::vector({-50.0});
  (void)n;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder.

TEST(Encoder, ZeroGruGivesReluOfFeatures) {
  Rng rng(1);
  ModelParams p = random_model(rng, 4, 8);
  zero_gru(p.enc_fwd);
  zero_gru(p.enc_bwd);
  const Tensor f = random_tensor(rng, {3, 4});
  expect_all_eq(encode_album(p, f).v.data(), relu(f).data());
}

TEST(Encoder, ReluClipsNegativeFeature) {
  Rng rng(2);
  ModelParams p = random_model(rng, 2, 8);
  zero_gru(p.enc_fwd);
  zero_gru(p.enc_bwd);
  const Tensor f = Tensor::matrix({{-1, 2}, {-1, 2}, {-1, 2}, {-1, 2}, {-1, 2}});
  const Tensor v = encode_album(p, f).v;
  EXPECT_EQ(v.at(0, 0), 0.0);
  EXPECT_EQ(v.at(0, 1), 2.0);
}

TEST(Encoder, MatchesManualComposition) {
  Rng rng(3);
  const ModelParams p = random_model(rng, 4, 8);
  const Tensor f = random_tensor(rng, {3, 4});
  std::vector<Tensor> xs{row(f, 0), row(f, 1), row(f, 2)};
  const auto ctx = bi_gru(p.enc_fwd, p.enc_bwd, xs);
  const Tensor v = encode_album(p, f).v;
  for (std::size_t i = 0; i < 3; ++i) expect_all_eq(row(v, i).data(), relu(ctx[i] + xs[i]).data());
}

TEST(Encoder, RejectsWrongWidth) {
  Rng rng(4);
  const ModelParams p = random_model(rng, 4, 8);
  EXPECT_THROW(encode_album(p, Tensor::zeros({3, 6})), DimensionError);
}

// ---------------------------------------------------------------------------
// Selector.

TEST(Selector, ConstantScoresAreUniform) {
  Rng rng(5);
  ModelParams p = random_model(rng, 4, 8);
  zero_mlp(p.sel_mlp, 0.7);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {6, 4}));
  const SelectStep step = select_step(p, enc.v, Tensor::zeros({4}), Tensor::zeros({3}), {});
  for (Real x : step.p.data()) EXPECT_NEAR(static_cast<double>(x), 1.0 / 6, 1e-15);
}

TEST(Selector, MaskForcesRenormalization) {
  Rng rng(6);
  const ModelParams p = random_model(rng, 4, 8);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {2, 4}));
  const SelectStep step = select_step(p, enc.v, Tensor::zeros({4}), Tensor::zeros({3}), {true, false});
  expect_all_eq(step.p.data(), std::vector<Real>{0.0, 1.0});
  EXPECT_THROW(select_step(p, enc.v, Tensor::zeros({4}), Tensor::zeros({3}), {true, true}), ContractError);
}

TEST(Selector, MatchesScalarEvaluation) {
  Rng rng(7);
  ModelParams p = random_model(rng, 2, 8);
  for (auto& l : p.sel_mlp.layers) l.bias = random_tensor(rng, l.bias.shape());
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {3, 2}));
  const Tensor prev = random_tensor(rng, {2});
  const Tensor state0 = random_tensor(rng, {3});
  const SelectStep step = select_step(p, enc.v, prev, state0, {});
  const std::vector<Real> state = hand_gru(p.sel_gru, vec(prev), vec(state0));
  expect_all_near(step.state.data(), state, 1e-12);
  std::vector<Real> raw;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<Real> x = state;
    for (std::size_t j = 0; j < 2; ++j) x.push_back(enc.v.at(i, j));
    std::vector<Real> hidden = affine(x, p.sel_mlp.layers[0].weight, p.sel_mlp.layers[0].bias);
    for (Real& h : hidden) h = std::tanh(h);
    const Real score = affine(hidden, p.sel_mlp.layers[1].weight, p.sel_mlp.layers[1].bias)[0];
    raw.push_back(1.0 / (1.0 + std::exp(-score)));
  }
  const Real total = raw[0] + raw[1] + raw[2];
  for (Real& r : raw) r /= total;
  expect_all_near(step.p.data(), raw, 1e-12);
}

TEST(Selection, OracleRowsAreExactPhotos) {
  Rng rng(8);
  const ModelParams p = random_model(rng, 4, 8);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {7, 4}));
  const std::vector<std::size_t> idx{6, 0, 3, 2, 5};
  const SelectionResult sel = select_summary(p, enc, SelectionMode::from_oracle(idx));
  EXPECT_EQ(sel.indices, idx);
  for (std::size_t t = 0; t < 5; ++t) expect_all_eq(sel.g[t].data(), row(enc.v, idx[t]).data());
  EXPECT_THROW(select_summary(p, enc, SelectionMode::from_oracle({0, 0, 1, 2, 3})), ContractError);
  EXPECT_THROW(select_summary(p, enc, SelectionMode::from_oracle({0, 1, 2, 3})), ContractError);
  EXPECT_THROW(select_summary(p, enc, SelectionMode::from_oracle({0, 1, 2, 3, 9})), IndexError);
}

TEST(Selection, ConstantScoresAverageThePhotos) {
  Rng rng(9);
  ModelParams p = random_model(rng, 4, 8);
  zero_mlp(p.sel_mlp, -1.3);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {6, 4}));
  const SelectionResult sel = select_summary(p, enc, SelectionMode::soft());
  std::vector<Real> mean_v(4, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) mean_v[j] += enc.v.at(i, j) / 6;
  for (const Tensor& g : sel.g) expect_all_near(g.data(), mean_v, 1e-12);
}

TEST(Selection, RiggedHardPicksMatchBruteForce) {
  const std::vector<std::size_t> order{3, 0, 5, 1, 4};
  const ModelParams p = rigged_model(order, 6, 8, 10);
  const AlbumEncoding enc = encode_album(p, one_hot_rows(6, 6));
  const SelectionResult sel = select_summary(p, enc, SelectionMode::hard());
  EXPECT_EQ(sel.indices, order);

  // Same recursion, stepped by hand.
  std::vector<bool> mask(6, false);
  Tensor prev = matmul(Tensor::full({6}, 1.0 / 6), enc.v);
  Tensor state = Tensor::zeros({4});
  for (std::size_t t = 0; t < 5; ++t) {
    const SelectStep step = select_step(p, enc.v, prev, state, mask);
    std::size_t best = 6;
    for (std::size_t i = 0; i < 6; ++i)
      if (!mask[i] && (best == 6 || step.p[i] > step.p[best])) best = i;
    EXPECT_EQ(best, sel.indices[t]);
    EXPECT_GT(step.p[best], 1.0 - 1e-15);
    mask[best] = true;
    prev = matmul(step.p, enc.v);
    state = step.state;
  }
}

TEST(Selection, HardNeedsFivePhotos) {
  Rng rng(11);
  const ModelParams p = random_model(rng, 4, 8);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {4, 4}));
  EXPECT_THROW(select_summary(p, enc, SelectionMode::hard()), ContractError);
}

// ---------------------------------------------------------------------------
// Generator and story likelihood.

TEST(Generator, ZeroProjectionIsUniform) {
  Rng rng(12);
  ModelParams p = random_model(rng, 4, 8);
  zero_mlp(p.vocab_proj);
  const WordStep step = decode_word_step(p, kBos, random_tensor(rng, {4}), random_tensor(rng, {5}));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(static_cast<double>(log_softmax(step.logits)[i]), -std::log(8.0), 1e-15);
  }
}

TEST(Generator, MatchesHandEvaluation) {
  Rng rng(13);
  ModelConfig mc = small_config(4, 3);
  mc.d_g = 2;
  ModelParams p = ModelParams::init(mc, rng);
  p.vocab_proj.layers[0].bias = random_tensor(rng, {3});
  for (Tensor* b : {&p.gen_gru.b_z, &p.gen_gru.b_r, &p.gen_gru.b_h}) *b = random_tensor(rng, {2});
  const Tensor g = random_tensor(rng, {4});
  const Tensor h = random_tensor(rng, {2});
  const WordStep step = decode_word_step(p, 1, g, h);
  std::vector<Real> x = vec(row(p.embedding.table, 1));
  for (Real v : g.data()) x.push_back(v);
  const std::vector<Real> h2 = hand_gru(p.gen_gru, x, vec(h));
  expect_all_near(step.state.data(), h2, 1e-12);
  expect_all_near(step.logits.data(), affine(h2, p.vocab_proj.layers[0].weight, p.vocab_proj.layers[0].bias), 1e-12);
}

TEST(Generator, DeadVisualWeightsIgnoreTheSummary) {
  Rng rng(14);
  ModelParams p = random_model(rng, 4, 8);
  for (Tensor* w : {&p.gen_gru.w_z, &p.gen_gru.w_r, &p.gen_gru.w_h}) {
    auto d = w->mutable_data();
    for (std::size_t r = 3; r < 7; ++r)
      for (std::size_t c = 0; c < 5; ++c) d[r * 5 + c] = 0.0;
  }
  const Tensor h = random_tensor(rng, {5});
  const WordStep a = decode_word_step(p, 4, random_tensor(rng, {4}), h);
  const WordStep b = decode_word_step(p, 4, random_tensor(rng, {4}), h);
  expect_all_eq(a.logits.data(), b.logits.data());
}

TEST(StoryLogProb, UniformModel) {
  Rng rng(15);
  ModelParams p = random_model(rng, 4, 8);
  zero_mlp(p.vocab_proj);
  Story s;
  for (std::size_t words : {1, 2, 1, 0, 1}) {
    Sentence sent(words, 5);
    sent.push_back(kEos);
    s.sentences.push_back(sent);
  }
  ASSERT_EQ(s.token_count(), 10u);
  EXPECT_NEAR(static_cast<double>(model_log_prob(p, random_tensor(rng, {5, 4}), s).item()), -10 * std::log(8.0),
              1e-12);
}

TEST(StoryLogProb, AlbumsAreIndependent) {
  Rng rng(16);
  const ModelParams p = random_model(rng, 4, 8);
  std::vector<Tensor> albums;
  std::vector<Story> stories;
  for (int i = 0; i < 4; ++i) {
    albums.push_back(random_tensor(rng, {5 + rng.below(3), 4}));
    stories.push_back(random_story(rng, 8));
  }
  std::vector<Real> forward, backward(4);
  for (int i = 0; i < 4; ++i) forward.push_back(model_log_prob(p, albums[i], stories[i]).item());
  for (int i = 3; i >= 0; --i) backward[i] = model_log_prob(p, albums[i], stories[i]).item();
  expect_all_eq(forward, backward);
}

TEST(StoryLogProb, TwoSentenceToyMatchesStepArithmetic) {
  Rng rng(17);
  ModelConfig mc = small_config(4, 3);
  mc.steps = 2;
  const ModelParams p = ModelParams::init(mc, rng);
  const Tensor f = random_tensor(rng, {3, 4});
  Story s{{{0, 1, kEos}, {kEos}}};
  const AlbumEncoding enc = encode_album(p, f);
  const SelectionResult sel = select_summary(p, enc, SelectionMode::soft());
  Real expected = 0.0;
  std::vector<Real> h(5, 0.0);
  for (std::size_t t = 0; t < 2; ++t) {
    TokenId prev = kBos;
    for (TokenId tok : s.sentences[t]) {
      std::vector<Real> x = vec(row(p.embedding.table, static_cast<std::size_t>(prev)));
      for (Real v : sel.g[t].data()) x.push_back(v);
      h = hand_gru(p.gen_gru, x, h);
      expected += hand_log_softmax(affine(h, p.vocab_proj.layers[0].weight, p.vocab_proj.layers[0].bias),
                                   static_cast<std::size_t>(tok));
      prev = tok;
    }
  }
  EXPECT_NEAR(static_cast<double>(model_log_prob(p, f, s).item()), static_cast<double>(expected), 1e-10);
}

TEST(StoryLogProb, ResetStateOption) {
  Rng rng(18);
  ModelConfig mc = small_config(4, 8);
  const ModelParams carry = ModelParams::init(mc, rng);
  ModelParams reset = carry;
  reset.config.reset_state_per_sentence = true;
  const Tensor f = random_tensor(rng, {5, 4});
  const Story s = random_story(rng, 8);
  EXPECT_NE(model_log_prob(carry, f, s).item(), model_log_prob(reset, f, s).item());
}

TEST(StoryLogProb, RejectsMalformedStory) {
  Rng rng(19);
  const ModelParams p = random_model(rng, 4, 8);
  const Tensor f = random_tensor(rng, {5, 4});
  Story s = random_story(rng, 8);
  s.sentences[2].pop_back();
  EXPECT_THROW(model_log_prob(p, f, s), ContractError);
  s = random_story(rng, 8, 4);
  EXPECT_THROW(model_log_prob(p, f, s), ContractError);
  s = random_story(rng, 8);
  s.sentences[0][0] = 8;
  EXPECT_THROW(model_log_prob(p, f, s), IndexError);
}

// ---------------------------------------------------------------------------
// Beam search.

namespace {

// Best complete sequence of length <= max_len: ends in EOS, or has max_len
// tokens. Enumerated in lexicographic order, ties to the first found.
Sentence exhaustive_best(const ModelParams& p, const Tensor& g, std::size_t max_len) {
  const auto vocab = static_cast<TokenId>(p.config.vocab);
  Sentence best;
  Real best_lp = -std::numeric_limits<Real>::infinity();
  std::function<void(Sentence&)> walk = [&](Sentence& prefix) {
    for (TokenId t = 0; t < vocab; ++t) {
      prefix.push_back(t);
      if (t == kEos || prefix.size() == max_len) {
        const Real lp = sequence_log_prob(p, g, prefix, Tensor::zeros({p.config.d_g}));
        if (lp > best_lp) {
          best_lp = lp;
          best = prefix;
        }
      } else {
        walk(prefix);
      }
      prefix.pop_back();
    }
  };
  Sentence prefix;
  walk(prefix);
  return best;
}

}  // namespace

TEST(Beam, ThreeMatchesExhaustiveOnFiftyModels) {
  int agree = 0;
  for (std::uint64_t m = 0; m < 50; ++m) {
    Rng rng(500 + m);
    const ModelParams p = random_model(rng, 4, 3);
    Tensor g = Tensor::zeros({4});
    for (Real& x : g.mutable_data()) x = rng.normal();
    agree += beam_decode(p, g, 3, 3).tokens == exhaustive_best(p, g, 3);
  }
  EXPECT_EQ(agree, 50);
}

TEST(Beam, UniformLogitsGiveCanonicalSequences) {
  Rng rng(20);
  ModelParams p = random_model(rng, 4, 6);
  zero_mlp(p.vocab_proj);
  const Tensor g = random_tensor(rng, {4});
  EXPECT_EQ(beam_decode(p, g, 3, 4).tokens, (Sentence{kEos}));
  EXPECT_EQ(beam_decode(p, g, 1, 4).tokens, (Sentence{0, 0, 0, 0}));
  EXPECT_EQ(beam_decode(p, g, 1, 4).tokens, beam_decode(p, g, 1, 4).tokens);
}

TEST(Beam, RejectsZeroSizes) {
  Rng rng(21);
  const ModelParams p = random_model(rng, 4, 6);
  EXPECT_THROW(beam_decode(p, Tensor::zeros({4}), 0, 3), ContractError);
  EXPECT_THROW(beam_decode(p, Tensor::zeros({4}), 3, 0), ContractError);
}

TEST(Generate, EverySentenceEndsInEos) {
  Rng rng(22);
  ModelParams p = random_model(rng, 4, 6);
  zero_mlp(p.vocab_proj);
  const GeneratedStory out = generate_story(p, random_tensor(rng, {6, 4}), 1, 3);
  ASSERT_EQ(out.story.sentences.size(), 5u);
  for (const auto& s : out.story.sentences) EXPECT_EQ(s, (Sentence{0, 0, 0, kEos}));
}

TEST(Generate, OracleSelectionEqualsRiggedSelector) {
  const std::vector<std::size_t> order{2, 0, 4, 1, 3};
  const ModelParams p = rigged_model(order, 5, 9, 23);
  const Tensor f = one_hot_rows(5, 6);
  for (std::size_t beam : {1u, 3u}) {
    const GeneratedStory hard = generate_story(p, f, beam, 6);
    const GeneratedStory oracle = generate_story(p, f, beam, 6, SelectionMode::from_oracle(order));
    EXPECT_EQ(hard.selection.indices, order);
    EXPECT_EQ(hard.story, oracle.story);
    for (std::size_t t = 0; t < 5; ++t) expect_all_near(hard.selection.g[t].data(), oracle.selection.g[t].data(), 1e-15);
  }
}

// ---------------------------------------------------------------------------
// Baselines.

TEST(EncDec, ZeroEncoderGivesUnconditionalModel) {
  Rng rng(24);
  ModelParams p = random_model(rng, 4, 8, ModelKind::kEncDec);
  zero_gru(p.enc_fwd);
  zero_gru(p.enc_bwd);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {5, 4}));
  expect_all_eq(enc_dec_visual(p, enc).data(), std::vector<Real>(4, 0.0));
  const Story s = random_story(rng, 8);
  EXPECT_EQ(model_log_prob(p, random_tensor(rng, {5, 4}), s).item(), model_log_prob(p, random_tensor(rng, {7, 4}), s).item());
}

TEST(EncDec, MatchesStepOracle) {
  Rng rng(25);
  const ModelParams p = random_model(rng, 4, 7, ModelKind::kEncDec);
  const Tensor f = random_tensor(rng, {2, 4});
  const Story s = random_story(rng, 7);
  const Tensor g = enc_dec_visual(p, encode_album(p, f));
  Real expected = 0.0;
  std::vector<Real> h(5, 0.0);
  for (const Sentence& sent : s.sentences) {
    TokenId prev = kBos;
    for (TokenId tok : sent) {
      std::vector<Real> x = vec(row(p.embedding.table, static_cast<std::size_t>(prev)));
      for (Real v : g.data()) x.push_back(v);
      h = hand_gru(p.gen_gru, x, h);
      expected += hand_log_softmax(affine(h, p.vocab_proj.layers[0].weight, p.vocab_proj.layers[0].bias),
                                   static_cast<std::size_t>(tok));
      prev = tok;
    }
  }
  EXPECT_NEAR(static_cast<double>(model_log_prob(p, f, s).item()), static_cast<double>(expected), 1e-10);
}

TEST(EncAttnDec, ConstantScoresAttendUniformly) {
  Rng rng(26);
  ModelParams p = random_model(rng, 4, 8, ModelKind::kEncAttnDec);
  zero_mlp(p.attn_mlp, 0.4);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {5, 4}));
  const Tensor alpha = attention_weights(p, enc, random_tensor(rng, {5}));
  for (Real a : alpha.data()) EXPECT_NEAR(static_cast<double>(a), 0.2, 1e-15);
  std::vector<Real> mean_v(4, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) mean_v[j] += enc.v.at(i, j) / 5;
  expect_all_near(matmul(alpha, enc.v).data(), mean_v, 1e-15);
}

TEST(EncAttnDec, SinglePhotoAlbum) {
  Rng rng(27);
  const ModelParams p = random_model(rng, 4, 8, ModelKind::kEncAttnDec);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {1, 4}));
  const Tensor alpha = attention_weights(p, enc, random_tensor(rng, {5}));
  expect_all_eq(alpha.data(), std::vector<Real>{1.0});
  expect_all_eq(matmul(alpha, enc.v).data(), row(enc.v, 0).data());
}

// ---------------------------------------------------------------------------
// Properties.

class ModelProperty : public Seeded {};

TEST_P(ModelProperty, EncoderOutputsNonNegative) {
  Rng rng(seed());
  const ModelParams p = random_model(rng, 6, 8);
  const Tensor v = encode_album(p, random_tensor(rng, {3 + rng.below(8), 6}, -3.0, 3.0)).v;
  for (Real x : v.data()) EXPECT_GE(x, 0.0);
}

TEST_P(ModelProperty, SelectionInvariants) {
  Rng rng(seed());
  const ModelParams p = random_model(rng, 4, 8);
  const std::size_t n = 5 + rng.below(6);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {n, 4}, -2.0, 2.0));
  for (const SelectionMode& mode : {SelectionMode::soft(), SelectionMode::hard()}) {
    const SelectionResult sel = select_summary(p, enc, mode);
    ASSERT_EQ(sel.probs.shape(), (Shape{5, n}));
    ASSERT_EQ(sel.indices.size(), 5u);
    for (std::size_t t = 0; t < 5; ++t) {
      Real total = 0.0;
      std::vector<Real> g(4, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const Real pi = sel.probs.at(t, i);
        EXPECT_GE(pi, 0.0);
        total += pi;
        for (std::size_t j = 0; j < 4; ++j) g[j] += pi * enc.v.at(i, j);
      }
      EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-12);
      expect_all_near(sel.g[t].data(), g, 1e-9);
      expect_all_eq(row(sel.summaries, t).data(), sel.g[t].data());
    }
    if (mode.kind == SelectionKind::kHardTest) {
      EXPECT_EQ(std::set<std::size_t>(sel.indices.begin(), sel.indices.end()).size(), 5u);
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t u = 0; u < t; ++u) EXPECT_EQ(sel.probs.at(t, sel.indices[u]), 0.0);
    }
  }
}

TEST_P(ModelProperty, HardSelectionMatchesBruteForce) {
  Rng rng(seed());
  const ModelParams p = random_model(rng, 4, 8);
  const AlbumEncoding enc = encode_album(p, random_tensor(rng, {6, 4}, -2.0, 2.0));
  const SelectionResult sel = select_summary(p, enc, SelectionMode::hard());
  std::vector<bool> mask(6, false);
  Tensor prev = matmul(Tensor::full({6}, 1.0 / 6), enc.v);
  Tensor state = Tensor::zeros({3});
  for (std::size_t t = 0; t < 5; ++t) {
    const SelectStep step = select_step(p, enc.v, prev, state, mask);
    std::size_t best = 6;
    for (std::size_t i = 0; i < 6; ++i)
      if (!mask[i] && (best == 6 || step.p[i] > step.p[best])) best = i;
    EXPECT_EQ(best, sel.indices[t]);
    mask[best] = true;
    prev = matmul(step.p, enc.v);
    state = step.state;
  }
}

TEST_P(ModelProperty, BeamOneEqualsGreedy) {
  // 24 seeds x 5 models covers 120 random models.
  for (std::uint64_t m = 0; m < 5; ++m) {
    Rng rng(seed() * 1000 + m);
    const ModelParams p = random_model(rng, 4, 4 + rng.below(6));
    const Tensor g = random_tensor(rng, {4}, -2.0, 2.0);
    const Tensor h0 = random_tensor(rng, {5});
    EXPECT_EQ(beam_decode(p, g, 1, 8, h0).tokens, greedy_decode(p, g, 8, h0));
  }
}

TEST_P(ModelProperty, BeamThreeMatchesExhaustiveOnToy) {
  Rng rng(seed() + 9000);
  const ModelParams p = random_model(rng, 4, 3);
  const Tensor g = random_tensor(rng, {4}, -2.0, 2.0);
  EXPECT_EQ(beam_decode(p, g, 3, 3).tokens, exhaustive_best(p, g, 3));
}

TEST_P(ModelProperty, ForwardPathsAreDeterministic) {
  for (ModelKind kind : {ModelKind::kHierarchical, ModelKind::kEncDec, ModelKind::kEncAttnDec}) {
    Rng rng(seed());
    const ModelParams p = random_model(rng, 4, 8, kind);
    const Tensor f = random_tensor(rng, {6, 4});
    const Story s = random_story(rng, 8);
    EXPECT_EQ(model_log_prob(p, f, s).item(), model_log_prob(p, f, s).item());
    const GeneratedStory a = generate(p, f, 3, 5);
    const GeneratedStory b = generate(p, f, 3, 5);
    EXPECT_EQ(a.story, b.story);
    EXPECT_EQ(a.selection.indices, b.selection.indices);
  }
}

TEST_P(ModelProperty, LogProbGradientsPassGradCheck) {
  // Extended precision: in double, central-difference rounding noise on
  // |f| ~ 20 with step 1e-5 is ~1e-10, comparable to the smallest selector
  // gradients of this toy.
  for (const ModuleCheckSummary& m : gradcheck_suite_extended(seed(), 1e-5, 1e-4)) {
    if (m.module.rfind("model", 0) != 0) continue;
    EXPECT_TRUE(m.pass) << m.module << " max_rel_err " << m.max_rel_err;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, ModelProperty, seeds());
