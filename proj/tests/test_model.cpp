#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "mexp/model.hpp"

using namespace mexp;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Mat mul(const Mat& x, const Matrix<double>& w) {
  Mat out(x.size(), Vec(static_cast<std::size_t>(w.cols()), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index k = 0; k < w.rows(); ++k) {
        out[i][j] += x[i][k] * w(k, j);
      }
    }
  }
  return out;
}

Mat norm(const Mat& x, const LayerNormWeights<double>& w) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0;
    for (double v : x[i]) mean += v;
    mean /= x[i].size();
    double var = 0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= x[i].size();
    for (std::size_t k = 0; k < x[i].size(); ++k) {
      out[i][k] = (x[i][k] - mean) / std::sqrt(var + 1e-5) * w.gain(0, k) + w.bias(0, k);
    }
  }
  return out;
}

Mat attend(const Mat& xq, const Mat& xkv, const AttentionWeights<double>& w, int heads,
           bool causal) {
  const Mat q = mul(xq, w.wq), k = mul(xkv, w.wk), v = mul(xkv, w.wv);
  const std::size_t d = q[0].size(), dh = d / heads;
  Mat z(xq.size(), Vec(d, 0.0));
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < xq.size(); ++i) {
      const std::size_t keys = causal ? i + 1 : xkv.size();
      Vec s(keys);
      double total = 0;
      for (std::size_t j = 0; j < keys; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < dh; ++t) dot += q[i][h * dh + t] * k[j][h * dh + t];
        s[j] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
        total += s[j];
      }
      for (std::size_t j = 0; j < keys; ++j) {
        for (std::size_t t = 0; t < dh; ++t) z[i][h * dh + t] += s[j] / total * v[j][h * dh + t];
      }
    }
  }
  return mul(z, w.wo);
}

Mat ffn(const Mat& x, const FeedForwardWeights<double>& w) {
  Mat h = mul(x, w.w1);
  for (auto& row : h)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + w.b1(0, j));
  Mat out = mul(h, w.w2);
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += w.b2(0, j);
  return out;
}

void add(Mat& x, const Mat& y) {
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < x[i].size(); ++k) x[i][k] += y[i][k];
}

// Straight-line reference for one unpadded sequence pair.
Mat reference_logits(const Model<double>& m, const std::vector<TokenId>& src,
                     const std::vector<TokenId>& tgt) {
  const auto& p = m.params;
  const int heads = m.config.n_heads;
  Mat x, y;
  for (std::size_t t = 0; t < src.size(); ++t) {
    Vec row(m.config.d_model);
    for (int k = 0; k < m.config.d_model; ++k)
      row[k] = p.token_embedding(src[t], k) + p.encoder_positions(t, k);
    x.push_back(row);
  }
  for (const auto& l : p.encoder) {
    add(x, attend(norm(x, l.norm_attn), norm(x, l.norm_attn), l.self_attn, heads, false));
    add(x, ffn(norm(x, l.norm_ffn), l.ffn));
  }
  const Mat enc = norm(x, p.encoder_norm);
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    Vec row(m.config.d_model);
    for (int k = 0; k < m.config.d_model; ++k)
      row[k] = p.token_embedding(tgt[t], k) + p.decoder_positions(t, k);
    y.push_back(row);
  }
  for (const auto& l : p.decoder) {
    const Mat s = norm(y, l.norm_self);
    add(y, attend(s, s, l.self_attn, heads, true));
    add(y, attend(norm(y, l.norm_cross), enc, l.cross_attn, heads, false));
    add(y, ffn(norm(y, l.norm_ffn), l.ffn));
  }
  const Mat hid = norm(y, p.decoder_norm);
  Mat logits(hid.size(), Vec(m.config.vocab_size, 0.0));
  for (std::size_t i = 0; i < hid.size(); ++i)
    for (int v = 0; v < m.config.vocab_size; ++v)
      for (int k = 0; k < m.config.d_model; ++k) logits[i][v] += hid[i][k] * p.token_embedding(v, k);
  return logits;
}

}  // namespace

TEST_CASE("config validation and head geometry") {
  ModelConfig c = testing::tiny_config();
  CHECK_NOTHROW(c.validate());
  c.d_model = 256;
  c.n_heads = 8;
  CHECK(c.head_dim() == 32);
  c.d_model = 7;
  c.n_heads = 2;
  CHECK_THROWS_AS(c.validate(), UsageError);
  const auto base = testing::tiny_config();
  CHECK(head_slots(base, true).size() == 2 + 4);
  CHECK(head_slots(base, false).size() == 4);
  CHECK(slot_in_range(base, {Side::decoder, 0, AttentionKind::cross, 1}));
  CHECK_FALSE(slot_in_range(base, {Side::decoder, 1, AttentionKind::self, 0}));
  CHECK_FALSE(slot_in_range(base, {Side::encoder, 0, AttentionKind::cross, 0}));
}

TEST_CASE("init is deterministic and parameter count is consistent") {
  const auto c = testing::tiny_config();
  const auto a = init_model<float>(c);
  const auto b = init_model<float>(c);
  const auto pa = parameter_list(a.params);
  const auto pb = parameter_list(b.params);
  std::size_t total = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(*pa[i].second == *pb[i].second);
    total += static_cast<std::size_t>(pa[i].second->size());
  }
  CHECK(total == parameter_count(c));
  auto other = c;
  other.seed = 4;
  CHECK(parameter_list(init_model<float>(other).params)[0].second->isApprox(*pa[0].second) == false);
}

TEST_CASE("forward matches a straight-line reference") {
  const auto c = testing::tiny_config();
  auto model = init_model<double>(c);
  testing::jitter(model, 1);
  const Vocabulary vocab(8);
  const auto batch = testing::tiny_batch(vocab, 5, 1);
  const auto logits = forward(model, batch.src, batch.tgt_in);
  const std::vector<TokenId> src(batch.src.ids.begin(), batch.src.ids.begin() + batch.src.lengths[0]);
  const std::vector<TokenId> tgt(batch.tgt_in.ids.begin(),
                                 batch.tgt_in.ids.begin() + batch.tgt_in.lengths[0]);
  const auto ref = reference_logits(model, src, tgt);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t v = 0; v < ref[i].size(); ++v)
      worst = std::max(worst, std::abs(ref[i][v] - logits(static_cast<Eigen::Index>(i), v)));
  CHECK(worst < 1e-10);
}

TEST_CASE("padding does not leak into real rows") {
  const auto c = testing::tiny_config();
  auto model = init_model<double>(c);
  testing::jitter(model, 2);
  const Vocabulary vocab(8);
  const auto batch = testing::tiny_batch(vocab, 6, 4);
  const auto all = forward(model, batch.src, batch.tgt_in);
  for (int b = 0; b < batch.batch(); ++b) {
    const auto one = slice_batch(batch, b, 1);
    const auto single = forward(model, one.src, one.tgt_in);
    for (int t = 0; t < batch.tgt_in.lengths[b]; ++t) {
      const auto r = static_cast<Eigen::Index>(b) * batch.tgt_in.len + t;
      CHECK((all.row(r) - single.row(t)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("analytic gradients match finite differences") {
  auto model = init_model<double>(testing::tiny_config());
  testing::jitter(model, 7);
  const auto batch = testing::tiny_batch(Vocabulary(8), 9, 3);
  const auto check = testing::gradient_check(model, batch);
  INFO("worst entry " << check.worst);
  CHECK(check.max_rel_error < 1e-4);
  CHECK(check.checked == parameter_count(model.config));
}

// Tied, unscaled readout gives logits of unit variance at init, so the
// expected loss sits about 0.5 nats above ln V.
TEST_CASE("loss at init is close to uniform") {
  ModelConfig c = testing::tiny_config();
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab_size = 1004;
  c.max_src_len = 16;
  const Vocabulary vocab(1000);
  const auto model = init_model<float>(c);
  const auto batch = testing::tiny_batch(vocab, 1, 32);
  const double loss = loss_and_grads(model, batch).loss;
  CHECK(std::abs(loss - std::log(1004.0)) < 0.1 * std::log(1004.0));
}

TEST_CASE("all-pad labels are rejected") {
  const auto model = init_model<double>(testing::tiny_config());
  auto batch = testing::tiny_batch(Vocabulary(8), 2, 2);
  std::fill(batch.labels.begin(), batch.labels.end(), batch.pad);
  CHECK_THROWS_AS(loss_and_grads(model, batch), DataError);
}

TEST_CASE("gradients do not depend on the thread count") {
  ModelConfig c = testing::tiny_config();
  const auto model = init_model<float>(c);
  const auto batch = testing::tiny_batch(Vocabulary(8), 4, 150);
  const auto one = loss_and_grads(model, batch, 1);
  const auto four = loss_and_grads(model, batch, 4);
  CHECK(one.loss == four.loss);
  const auto g1 = parameter_list(one.grads);
  const auto g4 = parameter_list(four.grads);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(*g1[i].second == *g4[i].second);
  }
}

TEST_CASE("overrides with the model's own trace change nothing") {
  auto model = init_model<double>(testing::tiny_config());
  testing::jitter(model, 3);
  const auto batch = testing::tiny_batch(Vocabulary(8), 8, 3);
  ActivationTrace<double> trace;
  const auto clean = forward<double>(model, batch.src, batch.tgt_in, nullptr, &trace);
  HeadOverrides<double> same(trace.heads.begin(), trace.heads.end());
  const auto patched = forward<double>(model, batch.src, batch.tgt_in, &same);
  CHECK(clean == patched);

  HeadOverrides<double> zero;
  const HeadSlot slot{Side::decoder, 0, AttentionKind::cross, 0};
  zero[slot] = Matrix<double>::Zero(trace.heads.at(slot).rows(), trace.heads.at(slot).cols());
  CHECK(forward<double>(model, batch.src, batch.tgt_in, &zero) != clean);

  HeadOverrides<double> wrong;
  wrong[slot] = Matrix<double>::Zero(1, 1);
  CHECK_THROWS_AS(forward<double>(model, batch.src, batch.tgt_in, &wrong), DataError);
}

TEST_CASE("adam steps") {
  auto model = init_model<double>(testing::tiny_config());
  const auto before = model;
  auto opt = make_adam(model, AdamConfig{0.01});
  adam_step(model, zeros_like(model.params), opt);
  const auto pa = parameter_list(before.params);
  const auto pb = parameter_list(model.params);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(*pa[i].second == *pb[i].second);
  }

  auto grads = zeros_like(model.params);
  grads.token_embedding(0, 0) = 0.37;
  grads.token_embedding(1, 0) = -5.0;
  auto model2 = before;
  auto opt2 = make_adam(model2, AdamConfig{0.01});
  adam_step(model2, grads, opt2);
  CHECK(model2.params.token_embedding(0, 0) - before.params.token_embedding(0, 0) ==
        doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(model2.params.token_embedding(1, 0) - before.params.token_embedding(1, 0) ==
        doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("memorizes a single example") {
  ModelConfig c = testing::tiny_config();
  c.d_model = 16;
  c.d_ff = 32;
  auto model = init_model<float>(c);
  const Vocabulary vocab(8);
  const auto batch = testing::tiny_batch(vocab, 12, 1);
  auto opt = make_adam(model, AdamConfig{3e-3});
  for (int step = 0; step < 500; ++step) {
    const auto lg = loss_and_grads(model, batch);
    adam_step(model, lg.grads, opt);
  }
  const auto out = greedy_decode(model, batch.src, c.max_tgt_len, vocab.plus(), vocab.eos());
  std::vector<TokenId> expected(batch.labels.begin(), batch.labels.begin() + batch.tgt_in.lengths[0]);
  CHECK(out[0] == expected);
}

TEST_CASE("precision conversion roundtrips") {
  const auto m = init_model<float>(testing::tiny_config());
  const auto back = convert_model<float>(convert_model<double>(m));
  CHECK(*parameter_list(back.params)[5].second == *parameter_list(m.params)[5].second);
}
