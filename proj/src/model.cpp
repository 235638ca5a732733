#include "mexp/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "mexp/rng.hpp"

namespace mexp {

// ---------------------------------------------------------------------------
// Configuration and slot bookkeeping

void ModelConfig::validate() const {
  if (n_layers_enc < 1 || n_layers_dec < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 ||
      vocab_size < 1 || max_src_len < 1 || max_tgt_len < 1) {
    throw UsageError("model: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw UsageError("model: d_model (" + std::to_string(d_model) +
                     ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers_enc", c.n_layers_enc}, {"n_layers_dec", c.n_layers_dec},
                     {"d_model", c.d_model},           {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},                 {"vocab_size", c.vocab_size},
                     {"max_src_len", c.max_src_len},   {"max_tgt_len", c.max_tgt_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers_enc").get_to(c.n_layers_enc);
  j.at("n_layers_dec").get_to(c.n_layers_dec);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_src_len").get_to(c.max_src_len);
  j.at("max_tgt_len").get_to(c.max_tgt_len);
  j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
}

std::string to_string(Side side) { return side == Side::encoder ? "encoder" : "decoder"; }

std::string to_string(AttentionKind kind) { return kind == AttentionKind::self ? "self" : "cross"; }

std::string to_string(const HeadSlot& slot) {
  return to_string(slot.side) + "." + std::to_string(slot.layer) + "." + to_string(slot.kind) +
         "." + std::to_string(slot.head);
}

std::vector<HeadSlot> head_slots(const ModelConfig& config, bool include_encoder,
                                 bool include_decoder) {
  std::vector<HeadSlot> slots;
  if (include_encoder) {
    for (int l = 0; l < config.n_layers_enc; ++l) {
      for (int h = 0; h < config.n_heads; ++h) {
        slots.push_back({Side::encoder, l, AttentionKind::self, h});
      }
    }
  }
  if (include_decoder) {
    for (int l = 0; l < config.n_layers_dec; ++l) {
      for (const auto kind : {AttentionKind::self, AttentionKind::cross}) {
        for (int h = 0; h < config.n_heads; ++h) {
          slots.push_back({Side::decoder, l, kind, h});
        }
      }
    }
  }
  return slots;
}

bool slot_in_range(const ModelConfig& config, const HeadSlot& slot) {
  if (slot.head < 0 || slot.head >= config.n_heads || slot.layer < 0) {
    return false;
  }
  if (slot.side == Side::encoder) {
    return slot.kind == AttentionKind::self && slot.layer < config.n_layers_enc;
  }
  return slot.layer < config.n_layers_dec;
}

// ---------------------------------------------------------------------------
// Parameter containers

template <class S>
std::vector<std::pair<std::string, Matrix<S>*>> parameter_list(Parameters<S>& p) {
  std::vector<std::pair<std::string, Matrix<S>*>> out;
  auto norm = [&out](const std::string& prefix, LayerNormWeights<S>& w) {
    out.emplace_back(prefix + ".gain", &w.gain);
    out.emplace_back(prefix + ".bias", &w.bias);
  };
  auto attn = [&out](const std::string& prefix, AttentionWeights<S>& w) {
    out.emplace_back(prefix + ".wq", &w.wq);
    out.emplace_back(prefix + ".wk", &w.wk);
    out.emplace_back(prefix + ".wv", &w.wv);
    out.emplace_back(prefix + ".wo", &w.wo);
  };
  auto ffn = [&out](const std::string& prefix, FeedForwardWeights<S>& w) {
    out.emplace_back(prefix + ".w1", &w.w1);
    out.emplace_back(prefix + ".b1", &w.b1);
    out.emplace_back(prefix + ".w2", &w.w2);
    out.emplace_back(prefix + ".b2", &w.b2);
  };
  out.emplace_back("token_embedding", &p.token_embedding);
  out.emplace_back("encoder_positions", &p.encoder_positions);
  out.emplace_back("decoder_positions", &p.decoder_positions);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    norm(prefix + ".norm_attn", p.encoder[l].norm_attn);
    attn(prefix + ".self_attn", p.encoder[l].self_attn);
    norm(prefix + ".norm_ffn", p.encoder[l].norm_ffn);
    ffn(prefix + ".ffn", p.encoder[l].ffn);
  }
  norm("encoder_norm", p.encoder_norm);
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string prefix = "decoder." + std::to_string(l);
    norm(prefix + ".norm_self", p.decoder[l].norm_self);
    attn(prefix + ".self_attn", p.decoder[l].self_attn);
    norm(prefix + ".norm_cross", p.decoder[l].norm_cross);
    attn(prefix + ".cross_attn", p.decoder[l].cross_attn);
    norm(prefix + ".norm_ffn", p.decoder[l].norm_ffn);
    ffn(prefix + ".ffn", p.decoder[l].ffn);
  }
  norm("decoder_norm", p.decoder_norm);
  return out;
}

template <class S>
std::vector<std::pair<std::string, const Matrix<S>*>> parameter_list(const Parameters<S>& p) {
  auto mutable_list = parameter_list(const_cast<Parameters<S>&>(p));
  std::vector<std::pair<std::string, const Matrix<S>*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, ptr] : mutable_list) {
    out.emplace_back(std::move(name), ptr);
  }
  return out;
}

template <class S>
Parameters<S> zeros_like(const Parameters<S>& like) {
  Parameters<S> out = like;
  for (auto& [name, m] : parameter_list(out)) {
    m->setZero();
  }
  return out;
}

namespace {

template <class S>
Parameters<S> shaped_parameters(const ModelConfig& c) {
  const int d = c.d_model;
  auto norm = [d] {
    return LayerNormWeights<S>{Matrix<S>::Zero(1, d), Matrix<S>::Zero(1, d)};
  };
  auto attn = [d] {
    return AttentionWeights<S>{Matrix<S>::Zero(d, d), Matrix<S>::Zero(d, d), Matrix<S>::Zero(d, d),
                               Matrix<S>::Zero(d, d)};
  };
  auto ffn = [d, &c] {
    return FeedForwardWeights<S>{Matrix<S>::Zero(d, c.d_ff), Matrix<S>::Zero(1, c.d_ff),
                                 Matrix<S>::Zero(c.d_ff, d), Matrix<S>::Zero(1, d)};
  };
  Parameters<S> p;
  p.token_embedding = Matrix<S>::Zero(c.vocab_size, d);
  p.encoder_positions = Matrix<S>::Zero(c.max_src_len, d);
  p.decoder_positions = Matrix<S>::Zero(c.max_tgt_len, d);
  for (int l = 0; l < c.n_layers_enc; ++l) {
    p.encoder.push_back({norm(), norm(), attn(), ffn()});
  }
  for (int l = 0; l < c.n_layers_dec; ++l) {
    p.decoder.push_back({norm(), norm(), norm(), attn(), attn(), ffn()});
  }
  p.encoder_norm = norm();
  p.decoder_norm = norm();
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::size_t parameter_count(const ModelConfig& config) {
  config.validate();
  const auto p = shaped_parameters<float>(config);
  std::size_t n = 0;
  for (const auto& [name, m] : parameter_list(p)) {
    n += static_cast<std::size_t>(m->size());
  }
  return n;
}

template <class S>
Model<S> init_model(const ModelConfig& config) {
  config.validate();
  Model<S> model{config, shaped_parameters<S>(config)};
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  std::uint64_t index = 0;
  for (auto& [name, m] : parameter_list(model.params)) {
    CounterRng rng(config.seed, Stream::init, index++);
    if (ends_with(name, ".gain")) {
      m->setOnes();
    } else if (ends_with(name, ".bias") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
      m->setZero();
    } else {
      const double std = (name == "token_embedding" || ends_with(name, "_positions"))
                             ? embed_std
                             : 1.0 / std::sqrt(static_cast<double>(m->rows()));
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        m->data()[i] = static_cast<S>(std * rng.normal());
      }
    }
  }
  return model;
}

template <class To, class From>
Model<To> convert_model(const Model<From>& model) {
  Model<To> out{model.config, shaped_parameters<To>(model.config)};
  auto src = parameter_list(model.params);
  auto dst = parameter_list(out.params);
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].second = src[i].second->template cast<To>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

TokenBatch make_token_batch(std::span<const std::vector<TokenId>> seqs, TokenId pad) {
  TokenBatch batch;
  batch.batch = static_cast<int>(seqs.size());
  batch.len = 1;
  for (const auto& s : seqs) {
    batch.len = std::max(batch.len, static_cast<int>(s.size()));
  }
  batch.ids.assign(static_cast<std::size_t>(batch.batch * batch.len), pad);
  batch.lengths.resize(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    if (seqs[b].empty()) {
      throw DataError("batch: empty sequence");
    }
    std::copy(seqs[b].begin(), seqs[b].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b) * batch.len);
    batch.lengths[b] = static_cast<int>(seqs[b].size());
  }
  return batch;
}

SupervisedBatch make_supervised_batch(std::span<const TokenSeq> sources,
                                      std::span<const TokenSeq> targets, const Vocabulary& vocab) {
  if (sources.size() != targets.size() || sources.empty()) {
    throw DataError("batch: need equally many (>= 1) sources and targets");
  }
  std::vector<std::vector<TokenId>> src;
  std::vector<std::vector<TokenId>> tgt_in;
  std::vector<std::vector<TokenId>> labels;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& t = targets[i].ids;
    if (t.size() < 2) {
      throw DataError("batch: target needs a start token and at least one label");
    }
    src.push_back(sources[i].ids);
    tgt_in.emplace_back(t.begin(), t.end() - 1);
    labels.emplace_back(t.begin() + 1, t.end());
  }
  SupervisedBatch out;
  out.pad = vocab.pad();
  out.src = make_token_batch(src, vocab.pad());
  out.tgt_in = make_token_batch(tgt_in, vocab.pad());
  const auto label_batch = make_token_batch(labels, vocab.pad());
  out.labels = label_batch.ids;
  return out;
}

TokenBatch slice_batch(const TokenBatch& batch, int first, int count) {
  TokenBatch out;
  out.batch = count;
  out.len = batch.len;
  const auto begin = batch.ids.begin() + static_cast<std::ptrdiff_t>(first) * batch.len;
  out.ids.assign(begin, begin + static_cast<std::ptrdiff_t>(count) * batch.len);
  out.lengths.assign(batch.lengths.begin() + first, batch.lengths.begin() + first + count);
  return out;
}

SupervisedBatch slice_batch(const SupervisedBatch& batch, int first, int count) {
  SupervisedBatch out;
  out.pad = batch.pad;
  out.src = slice_batch(batch.src, first, count);
  out.tgt_in = slice_batch(batch.tgt_in, first, count);
  const auto begin = batch.labels.begin() + static_cast<std::ptrdiff_t>(first) * batch.tgt_in.len;
  out.labels.assign(begin, begin + static_cast<std::ptrdiff_t>(count) * batch.tgt_in.len);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels

namespace {

constexpr double kNormEps = 1e-5;
constexpr int kChunkRows = 64;

template <class S>
struct NormCache {
  Matrix<S> xhat;
  std::vector<S> rstd;
};

template <class S>
void layer_norm_forward(const Matrix<S>& x, const LayerNormWeights<S>& w, Matrix<S>& y,
                        NormCache<S>& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  y.resize(n, d);
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<std::size_t>(n));
  const S* gain = w.gain.data();
  const S* bias = w.bias.data();
  for (Eigen::Index r = 0; r < n; ++r) {
    const S* xr = x.data() + r * d;
    S mean = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      mean += xr[k];
    }
    mean /= static_cast<S>(d);
    S var = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      const S c = xr[k] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kNormEps));
    cache.rstd[static_cast<std::size_t>(r)] = rstd;
    S* xh = cache.xhat.data() + r * d;
    S* yr = y.data() + r * d;
    for (Eigen::Index k = 0; k < d; ++k) {
      xh[k] = (xr[k] - mean) * rstd;
      yr[k] = xh[k] * gain[k] + bias[k];
    }
  }
}

// Accumulates into dx and the weight gradients.
template <class S>
void layer_norm_backward(const Matrix<S>& dy, const LayerNormWeights<S>& w,
                         const NormCache<S>& cache, LayerNormWeights<S>& grad, Matrix<S>& dx) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  const S* gain = w.gain.data();
  S* dgain = grad.gain.data();
  S* dbias = grad.bias.data();
  std::vector<S> dxhat(static_cast<std::size_t>(d));
  for (Eigen::Index r = 0; r < n; ++r) {
    const S* dyr = dy.data() + r * d;
    const S* xh = cache.xhat.data() + r * d;
    S mean_dxhat = 0;
    S mean_dxhat_xhat = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      dgain[k] += dyr[k] * xh[k];
      dbias[k] += dyr[k];
      const S g = dyr[k] * gain[k];
      dxhat[static_cast<std::size_t>(k)] = g;
      mean_dxhat += g;
      mean_dxhat_xhat += g * xh[k];
    }
    mean_dxhat /= static_cast<S>(d);
    mean_dxhat_xhat /= static_cast<S>(d);
    const S rstd = cache.rstd[static_cast<std::size_t>(r)];
    S* dxr = dx.data() + r * d;
    for (Eigen::Index k = 0; k < d; ++k) {
      dxr[k] += rstd * (dxhat[static_cast<std::size_t>(k)] - mean_dxhat - xh[k] * mean_dxhat_xhat);
    }
  }
}

template <class S>
struct FfnCache {
  Matrix<S> hidden;  // post-ReLU
};

template <class S>
void ffn_forward(const Matrix<S>& x, const FeedForwardWeights<S>& w, Matrix<S>& out,
                 FfnCache<S>& cache) {
  cache.hidden.noalias() = x * w.w1;
  cache.hidden.rowwise() += w.b1.row(0);
  cache.hidden = cache.hidden.cwiseMax(S(0));
  out.noalias() = cache.hidden * w.w2;
  out.rowwise() += w.b2.row(0);
}

template <class S>
void ffn_backward(const Matrix<S>& dy, const Matrix<S>& x, const FeedForwardWeights<S>& w,
                  const FfnCache<S>& cache, FeedForwardWeights<S>& grad, Matrix<S>& dx) {
  grad.b2 += dy.colwise().sum();
  grad.w2.noalias() += cache.hidden.transpose() * dy;
  Matrix<S> dh = dy * w.w2.transpose();
  dh = (cache.hidden.array() > S(0)).select(dh, S(0));
  grad.b1 += dh.colwise().sum();
  grad.w1.noalias() += x.transpose() * dh;
  dx.noalias() += dh * w.w1.transpose();
}

template <class S>
struct AttnCache {
  Matrix<S> q, k, v, z;
  std::vector<S> probs;  // [b][h][i][j]
  int batch = 0;
  int lq = 0;
  int lk = 0;
  bool causal = false;
  std::vector<int> key_len;
  std::vector<char> overridden;  // per head
};

// Number of visible keys for query i of sample b.
inline int visible_keys(const std::vector<int>& key_len, int b, int i, bool causal) {
  const int limit = key_len[static_cast<std::size_t>(b)];
  return causal ? std::min(limit, i + 1) : limit;
}

template <class S>
void attention_forward(const AttentionWeights<S>& w, const Matrix<S>& xq, const Matrix<S>& xkv,
                       int batch, int lq, int lk, std::span<const int> key_len, bool causal,
                       int n_heads, std::span<const Matrix<S>* const> overrides,
                       std::span<Matrix<S>* const> trace_heads,
                       std::span<Matrix<S>* const> trace_patterns, AttnCache<S>& cache,
                       Matrix<S>& out) {
  const int d = static_cast<int>(w.wq.rows());
  const int dh = d / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  cache.batch = batch;
  cache.lq = lq;
  cache.lk = lk;
  cache.causal = causal;
  cache.key_len.assign(key_len.begin(), key_len.end());
  cache.q.noalias() = xq * w.wq;
  cache.k.noalias() = xkv * w.wk;
  cache.v.noalias() = xkv * w.wv;
  cache.z.resize(static_cast<Eigen::Index>(batch) * lq, d);
  cache.probs.assign(static_cast<std::size_t>(batch) * n_heads * lq * lk, S(0));
  cache.overridden.assign(static_cast<std::size_t>(n_heads), 0);

  std::vector<S> scores(static_cast<std::size_t>(lk));
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < lq; ++i) {
        const int keys = visible_keys(cache.key_len, b, i, causal);
        const S* qi = cache.q.data() + (static_cast<Eigen::Index>(b) * lq + i) * d + h * dh;
        S best = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < keys; ++j) {
          const S* kj = cache.k.data() + (static_cast<Eigen::Index>(b) * lk + j) * d + h * dh;
          S s = 0;
          for (int t = 0; t < dh; ++t) {
            s += qi[t] * kj[t];
          }
          s *= scale;
          scores[static_cast<std::size_t>(j)] = s;
          best = std::max(best, s);
        }
        S total = 0;
        for (int j = 0; j < keys; ++j) {
          const S e = std::exp(scores[static_cast<std::size_t>(j)] - best);
          scores[static_cast<std::size_t>(j)] = e;
          total += e;
        }
        S* p = cache.probs.data() + ((static_cast<std::size_t>(b) * n_heads + h) * lq + i) * lk;
        S* zi = cache.z.data() + (static_cast<Eigen::Index>(b) * lq + i) * d + h * dh;
        std::fill(zi, zi + dh, S(0));
        for (int j = 0; j < keys; ++j) {
          p[j] = scores[static_cast<std::size_t>(j)] / total;
          const S* vj = cache.v.data() + (static_cast<Eigen::Index>(b) * lk + j) * d + h * dh;
          for (int t = 0; t < dh; ++t) {
            zi[t] += p[j] * vj[t];
          }
        }
      }
    }
  }

  const Eigen::Index rows = static_cast<Eigen::Index>(batch) * lq;
  for (int h = 0; h < n_heads; ++h) {
    if (const Matrix<S>* o = overrides[static_cast<std::size_t>(h)]; o != nullptr) {
      if (o->rows() != rows || o->cols() != dh) {
        throw DataError("forward: override for head " + std::to_string(h) + " has shape " +
                        std::to_string(o->rows()) + "x" + std::to_string(o->cols()) +
                        ", expected " + std::to_string(rows) + "x" + std::to_string(dh));
      }
      cache.z.middleCols(h * dh, dh) = *o;
      cache.overridden[static_cast<std::size_t>(h)] = 1;
    }
    if (Matrix<S>* t = trace_heads[static_cast<std::size_t>(h)]; t != nullptr) {
      *t = cache.z.middleCols(h * dh, dh);
    }
    if (Matrix<S>* t = trace_patterns[static_cast<std::size_t>(h)]; t != nullptr) {
      t->resize(rows, lk);
      for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < lq; ++i) {
          const S* p = cache.probs.data() + ((static_cast<std::size_t>(b) * n_heads + h) * lq + i) * lk;
          std::copy(p, p + lk, t->data() + (static_cast<Eigen::Index>(b) * lq + i) * lk);
        }
      }
    }
  }
  out.noalias() = cache.z * w.wo;
}

// Accumulates input gradients into dxq and dxkv (which may alias).
template <class S>
void attention_backward(const Matrix<S>& dout, const AttentionWeights<S>& w, const Matrix<S>& xq,
                        const Matrix<S>& xkv, int n_heads, const AttnCache<S>& cache,
                        AttentionWeights<S>& grad, Matrix<S>& dxq, Matrix<S>& dxkv) {
  const int d = static_cast<int>(w.wq.rows());
  const int dh = d / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const int batch = cache.batch;
  const int lq = cache.lq;
  const int lk = cache.lk;

  grad.wo.noalias() += cache.z.transpose() * dout;
  const Matrix<S> dz = dout * w.wo.transpose();
  Matrix<S> dq = Matrix<S>::Zero(cache.q.rows(), d);
  Matrix<S> dk = Matrix<S>::Zero(cache.k.rows(), d);
  Matrix<S> dv = Matrix<S>::Zero(cache.v.rows(), d);
  std::vector<S> dp(static_cast<std::size_t>(lk));

  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      if (cache.overridden[static_cast<std::size_t>(h)] != 0) {
        continue;
      }
      for (int i = 0; i < lq; ++i) {
        const int keys = visible_keys(cache.key_len, b, i, cache.causal);
        const Eigen::Index qrow = static_cast<Eigen::Index>(b) * lq + i;
        const S* p = cache.probs.data() + ((static_cast<std::size_t>(b) * n_heads + h) * lq + i) * lk;
        const S* dzi = dz.data() + qrow * d + h * dh;
        S weighted = 0;
        for (int j = 0; j < keys; ++j) {
          const Eigen::Index krow = static_cast<Eigen::Index>(b) * lk + j;
          const S* vj = cache.v.data() + krow * d + h * dh;
          S* dvj = dv.data() + krow * d + h * dh;
          S acc = 0;
          for (int t = 0; t < dh; ++t) {
            acc += dzi[t] * vj[t];
            dvj[t] += p[j] * dzi[t];
          }
          dp[static_cast<std::size_t>(j)] = acc;
          weighted += p[j] * acc;
        }
        const S* qi = cache.q.data() + qrow * d + h * dh;
        S* dqi = dq.data() + qrow * d + h * dh;
        for (int j = 0; j < keys; ++j) {
          const S ds = p[j] * (dp[static_cast<std::size_t>(j)] - weighted) * scale;
          const Eigen::Index krow = static_cast<Eigen::Index>(b) * lk + j;
          const S* kj = cache.k.data() + krow * d + h * dh;
          S* dkj = dk.data() + krow * d + h * dh;
          for (int t = 0; t < dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
  }

  grad.wq.noalias() += xq.transpose() * dq;
  grad.wk.noalias() += xkv.transpose() * dk;
  grad.wv.noalias() += xkv.transpose() * dv;
  dxq.noalias() += dq * w.wq.transpose();
  dxkv.noalias() += dk * w.wk.transpose();
  dxkv.noalias() += dv * w.wv.transpose();
}

template <class S>
struct EncoderLayerCache {
  NormCache<S> norm_attn, norm_ffn;
  Matrix<S> attn_in, ffn_in;
  AttnCache<S> attn;
  FfnCache<S> ffn;
};

template <class S>
struct DecoderLayerCache {
  NormCache<S> norm_self, norm_cross, norm_ffn;
  Matrix<S> self_in, cross_in, ffn_in;
  AttnCache<S> self_attn, cross_attn;
  FfnCache<S> ffn;
};

template <class S>
struct PassCache {
  std::vector<EncoderLayerCache<S>> encoder;
  std::vector<DecoderLayerCache<S>> decoder;
  NormCache<S> encoder_norm, decoder_norm;
  Matrix<S> enc_out;
  Matrix<S> dec_hidden;
};

template <class S>
void embed(const Matrix<S>& table, const Matrix<S>& positions, const TokenBatch& tokens,
           Matrix<S>& x) {
  if (tokens.len > positions.rows()) {
    throw DataError("forward: sequence length " + std::to_string(tokens.len) +
                    " exceeds the configured maximum " + std::to_string(positions.rows()));
  }
  if (static_cast<int>(tokens.lengths.size()) != tokens.batch ||
      static_cast<int>(tokens.ids.size()) != tokens.batch * tokens.len) {
    throw DataError("forward: inconsistent token batch shape");
  }
  x.resize(static_cast<Eigen::Index>(tokens.batch) * tokens.len, table.cols());
  for (int b = 0; b < tokens.batch; ++b) {
    for (int t = 0; t < tokens.len; ++t) {
      const TokenId id = tokens.at(b, t);
      if (id < 0 || id >= table.rows()) {
        throw DataError("forward: token id " + std::to_string(id) + " outside the vocabulary");
      }
      x.row(static_cast<Eigen::Index>(b) * tokens.len + t) = table.row(id) + positions.row(t);
    }
  }
}

template <class S>
void embed_backward(const Matrix<S>& dx, const TokenBatch& tokens, Matrix<S>& dtable,
                    Matrix<S>& dpositions) {
  for (int b = 0; b < tokens.batch; ++b) {
    for (int t = 0; t < tokens.len; ++t) {
      const auto r = static_cast<Eigen::Index>(b) * tokens.len + t;
      dtable.row(tokens.at(b, t)) += dx.row(r);
      dpositions.row(t) += dx.row(r);
    }
  }
}

// Resolves per-head override/trace pointers for one attention block.
template <class S>
struct HeadHooks {
  std::vector<const Matrix<S>*> overrides;
  std::vector<Matrix<S>*> heads;
  std::vector<Matrix<S>*> patterns;

  HeadHooks(const ModelConfig& config, Side side, int layer, AttentionKind kind,
            const HeadOverrides<S>* ov, ActivationTrace<S>* trace)
      : overrides(static_cast<std::size_t>(config.n_heads), nullptr),
        heads(static_cast<std::size_t>(config.n_heads), nullptr),
        patterns(static_cast<std::size_t>(config.n_heads), nullptr) {
    for (int h = 0; h < config.n_heads; ++h) {
      const HeadSlot slot{side, layer, kind, h};
      if (ov != nullptr) {
        if (const auto it = ov->find(slot); it != ov->end()) {
          overrides[static_cast<std::size_t>(h)] = &it->second;
        }
      }
      if (trace != nullptr) {
        heads[static_cast<std::size_t>(h)] = &trace->heads[slot];
        if (trace->record_patterns) {
          patterns[static_cast<std::size_t>(h)] = &trace->patterns[slot];
        }
      }
    }
  }
};

template <class S>
void check_overrides(const ModelConfig& config, const HeadOverrides<S>* overrides) {
  if (overrides == nullptr) {
    return;
  }
  for (const auto& [slot, value] : *overrides) {
    if (!slot_in_range(config, slot)) {
      throw UsageError("forward: override slot " + to_string(slot) + " is out of range");
    }
  }
}

template <class S>
void encode(const Model<S>& model, const TokenBatch& src, const HeadOverrides<S>* overrides,
            ActivationTrace<S>* trace, PassCache<S>& cache) {
  const auto& c = model.config;
  const auto& p = model.params;
  Matrix<S> x;
  embed(p.token_embedding, p.encoder_positions, src, x);
  cache.encoder.resize(static_cast<std::size_t>(c.n_layers_enc));
  Matrix<S> out;
  for (int l = 0; l < c.n_layers_enc; ++l) {
    auto& lc = cache.encoder[static_cast<std::size_t>(l)];
    const auto& lw = p.encoder[static_cast<std::size_t>(l)];
    const HeadHooks<S> hooks(c, Side::encoder, l, AttentionKind::self, overrides, trace);
    layer_norm_forward(x, lw.norm_attn, lc.attn_in, lc.norm_attn);
    attention_forward<S>(lw.self_attn, lc.attn_in, lc.attn_in, src.batch, src.len, src.len,
                         src.lengths, false, c.n_heads, hooks.overrides, hooks.heads,
                         hooks.patterns, lc.attn, out);
    x += out;
    layer_norm_forward(x, lw.norm_ffn, lc.ffn_in, lc.norm_ffn);
    ffn_forward(lc.ffn_in, lw.ffn, out, lc.ffn);
    x += out;
  }
  layer_norm_forward(x, p.encoder_norm, cache.enc_out, cache.encoder_norm);
}

template <class S>
Matrix<S> decode(const Model<S>& model, const TokenBatch& src, const TokenBatch& tgt_in,
                 const HeadOverrides<S>* overrides, ActivationTrace<S>* trace,
                 PassCache<S>& cache) {
  const auto& c = model.config;
  const auto& p = model.params;
  if (tgt_in.batch != src.batch) {
    throw DataError("forward: source and target batch sizes differ");
  }
  Matrix<S> y;
  embed(p.token_embedding, p.decoder_positions, tgt_in, y);
  cache.decoder.resize(static_cast<std::size_t>(c.n_layers_dec));
  Matrix<S> out;
  for (int l = 0; l < c.n_layers_dec; ++l) {
    auto& lc = cache.decoder[static_cast<std::size_t>(l)];
    const auto& lw = p.decoder[static_cast<std::size_t>(l)];
    const HeadHooks<S> self_hooks(c, Side::decoder, l, AttentionKind::self, overrides, trace);
    const HeadHooks<S> cross_hooks(c, Side::decoder, l, AttentionKind::cross, overrides, trace);
    layer_norm_forward(y, lw.norm_self, lc.self_in, lc.norm_self);
    attention_forward<S>(lw.self_attn, lc.self_in, lc.self_in, tgt_in.batch, tgt_in.len,
                         tgt_in.len, tgt_in.lengths, true, c.n_heads, self_hooks.overrides,
                         self_hooks.heads, self_hooks.patterns, lc.self_attn, out);
    y += out;
    layer_norm_forward(y, lw.norm_cross, lc.cross_in, lc.norm_cross);
    attention_forward<S>(lw.cross_attn, lc.cross_in, cache.enc_out, tgt_in.batch, tgt_in.len,
                         src.len, src.lengths, false, c.n_heads, cross_hooks.overrides,
                         cross_hooks.heads, cross_hooks.patterns, lc.cross_attn, out);
    y += out;
    layer_norm_forward(y, lw.norm_ffn, lc.ffn_in, lc.norm_ffn);
    ffn_forward(lc.ffn_in, lw.ffn, out, lc.ffn);
    y += out;
  }
  layer_norm_forward(y, p.decoder_norm, cache.dec_hidden, cache.decoder_norm);
  Matrix<S> logits = cache.dec_hidden * p.token_embedding.transpose();
  if (trace != nullptr) {
    trace->logits = logits;
  }
  return logits;
}

template <class S>
void backward(const Model<S>& model, const TokenBatch& src, const TokenBatch& tgt_in,
              const Matrix<S>& dlogits, const PassCache<S>& cache, Parameters<S>& g) {
  const auto& c = model.config;
  const auto& p = model.params;

  g.token_embedding.noalias() += dlogits.transpose() * cache.dec_hidden;
  const Matrix<S> dhidden = dlogits * p.token_embedding;
  Matrix<S> dy = Matrix<S>::Zero(dhidden.rows(), dhidden.cols());
  layer_norm_backward(dhidden, p.decoder_norm, cache.decoder_norm, g.decoder_norm, dy);

  Matrix<S> denc = Matrix<S>::Zero(cache.enc_out.rows(), cache.enc_out.cols());
  Matrix<S> dsub;
  for (int l = c.n_layers_dec - 1; l >= 0; --l) {
    const auto& lc = cache.decoder[static_cast<std::size_t>(l)];
    const auto& lw = p.decoder[static_cast<std::size_t>(l)];
    auto& lg = g.decoder[static_cast<std::size_t>(l)];

    dsub = Matrix<S>::Zero(dy.rows(), dy.cols());
    ffn_backward(dy, lc.ffn_in, lw.ffn, lc.ffn, lg.ffn, dsub);
    layer_norm_backward(dsub, lw.norm_ffn, lc.norm_ffn, lg.norm_ffn, dy);

    dsub.setZero();
    attention_backward(dy, lw.cross_attn, lc.cross_in, cache.enc_out, c.n_heads, lc.cross_attn,
                       lg.cross_attn, dsub, denc);
    layer_norm_backward(dsub, lw.norm_cross, lc.norm_cross, lg.norm_cross, dy);

    dsub.setZero();
    attention_backward(dy, lw.self_attn, lc.self_in, lc.self_in, c.n_heads, lc.self_attn,
                       lg.self_attn, dsub, dsub);
    layer_norm_backward(dsub, lw.norm_self, lc.norm_self, lg.norm_self, dy);
  }
  embed_backward(dy, tgt_in, g.token_embedding, g.decoder_positions);

  Matrix<S> dx = Matrix<S>::Zero(denc.rows(), denc.cols());
  layer_norm_backward(denc, p.encoder_norm, cache.encoder_norm, g.encoder_norm, dx);
  for (int l = c.n_layers_enc - 1; l >= 0; --l) {
    const auto& lc = cache.encoder[static_cast<std::size_t>(l)];
    const auto& lw = p.encoder[static_cast<std::size_t>(l)];
    auto& lg = g.encoder[static_cast<std::size_t>(l)];

    dsub = Matrix<S>::Zero(dx.rows(), dx.cols());
    ffn_backward(dx, lc.ffn_in, lw.ffn, lc.ffn, lg.ffn, dsub);
    layer_norm_backward(dsub, lw.norm_ffn, lc.norm_ffn, lg.norm_ffn, dx);

    dsub.setZero();
    attention_backward(dx, lw.self_attn, lc.attn_in, lc.attn_in, c.n_heads, lc.attn,
                       lg.self_attn, dsub, dsub);
    layer_norm_backward(dsub, lw.norm_attn, lc.norm_attn, lg.norm_attn, dx);
  }
  embed_backward(dx, src, g.token_embedding, g.encoder_positions);
}

struct CrossEntropy {
  double loss = 0.0;
  std::size_t tokens = 0;
  std::size_t exact = 0;
};

// Cross-entropy over supervised rows; when dlogits is given it receives
// scale * (softmax - onehot) (zero rows for unsupervised positions).
template <class S>
CrossEntropy cross_entropy(const Matrix<S>& logits, const SupervisedBatch& batch, S scale,
                           Matrix<S>* dlogits) {
  CrossEntropy ce;
  const auto vocab = logits.cols();
  if (dlogits != nullptr) {
    dlogits->setZero(logits.rows(), vocab);
  }
  const int len = batch.tgt_in.len;
  for (int b = 0; b < batch.batch(); ++b) {
    bool all_correct = true;
    bool any = false;
    for (int t = 0; t < len; ++t) {
      const auto r = static_cast<Eigen::Index>(b) * len + t;
      const TokenId label = batch.labels[static_cast<std::size_t>(r)];
      if (label == batch.pad) {
        continue;
      }
      any = true;
      const S* row = logits.data() + r * vocab;
      Eigen::Index argmax = 0;
      S best = row[0];
      for (Eigen::Index k = 1; k < vocab; ++k) {
        if (row[k] > best) {
          best = row[k];
          argmax = k;
        }
      }
      double total = 0.0;
      for (Eigen::Index k = 0; k < vocab; ++k) {
        total += std::exp(static_cast<double>(row[k] - best));
      }
      const double lse = static_cast<double>(best) + std::log(total);
      ce.loss += lse - static_cast<double>(row[label]);
      ++ce.tokens;
      all_correct = all_correct && argmax == label;
      if (dlogits != nullptr) {
        S* drow = dlogits->data() + r * vocab;
        for (Eigen::Index k = 0; k < vocab; ++k) {
          drow[k] = static_cast<S>(std::exp(static_cast<double>(row[k]) - lse)) * scale;
        }
        drow[label] -= scale;
      }
    }
    if (any && all_correct) {
      ++ce.exact;
    }
  }
  return ce;
}

std::size_t supervised_tokens(const SupervisedBatch& batch) {
  return static_cast<std::size_t>(
      std::count_if(batch.labels.begin(), batch.labels.end(),
                    [&batch](TokenId id) { return id != batch.pad; }));
}

template <class S>
void add_into(Parameters<S>& dst, const Parameters<S>& src) {
  auto d = parameter_list(dst);
  const auto s = parameter_list(src);
  for (std::size_t i = 0; i < d.size(); ++i) {
    *d[i].second += *s[i].second;
  }
}

}  // namespace

template <class S>
Matrix<S> forward(const Model<S>& model, const TokenBatch& src, const TokenBatch& tgt_in,
                  const HeadOverrides<S>* overrides, ActivationTrace<S>* trace) {
  check_overrides(model.config, overrides);
  PassCache<S> cache;
  encode(model, src, overrides, trace, cache);
  return decode(model, src, tgt_in, overrides, trace, cache);
}

template <class S>
LossAndGrads<S> loss_and_grads(const Model<S>& model, const SupervisedBatch& batch,
                               unsigned threads) {
  const std::size_t tokens = supervised_tokens(batch);
  if (tokens == 0) {
    throw DataError("loss: batch has no supervised target positions");
  }
  const S scale = S(1) / static_cast<S>(tokens);
  const int chunks = (batch.batch() + kChunkRows - 1) / kChunkRows;

  struct ChunkResult {
    CrossEntropy ce;
    Parameters<S> grads;
  };
  std::vector<ChunkResult> results(static_cast<std::size_t>(chunks));
  auto run_chunk = [&](int k) {
    const int first = k * kChunkRows;
    const int count = std::min(kChunkRows, batch.batch() - first);
    const SupervisedBatch part = chunks == 1 ? batch : slice_batch(batch, first, count);
    PassCache<S> cache;
    encode<S>(model, part.src, nullptr, nullptr, cache);
    const Matrix<S> logits = decode<S>(model, part.src, part.tgt_in, nullptr, nullptr, cache);
    Matrix<S> dlogits;
    auto& r = results[static_cast<std::size_t>(k)];
    r.ce = cross_entropy(logits, part, scale, &dlogits);
    r.grads = zeros_like(model.params);
    backward(model, part.src, part.tgt_in, dlogits, cache, r.grads);
  };

  threads = std::max(1U, std::min(threads, static_cast<unsigned>(chunks)));
  if (threads == 1) {
    for (int k = 0; k < chunks; ++k) {
      run_chunk(k);
    }
  } else {
    std::vector<std::jthread> workers;
    for (unsigned t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        for (int k = static_cast<int>(t); k < chunks; k += static_cast<int>(threads)) {
          run_chunk(k);
        }
      });
    }
  }

  LossAndGrads<S> out;
  out.grads = std::move(results[0].grads);
  double loss = results[0].ce.loss;
  out.exact = results[0].ce.exact;
  for (std::size_t k = 1; k < results.size(); ++k) {
    add_into(out.grads, results[k].grads);
    loss += results[k].ce.loss;
    out.exact += results[k].ce.exact;
  }
  out.tokens = tokens;
  out.loss = static_cast<S>(loss / static_cast<double>(tokens));
  if (!std::isfinite(loss)) {
    throw DivergenceError("loss is not finite");
  }
  return out;
}

template <class S>
LossSum evaluate_loss(const Model<S>& model, const SupervisedBatch& batch) {
  const Matrix<S> logits = forward<S>(model, batch.src, batch.tgt_in);
  const auto ce = cross_entropy<S>(logits, batch, S(1), nullptr);
  return {ce.loss, ce.tokens, ce.exact};
}

template <class S>
AdamState<S> make_adam(const Model<S>& model, const AdamConfig& hyper) {
  return AdamState<S>{hyper, 0, zeros_like(model.params), zeros_like(model.params)};
}

template <class S>
void adam_step(Model<S>& model, const Parameters<S>& grads, AdamState<S>& opt) {
  auto params = parameter_list(model.params);
  const auto g = parameter_list(grads);
  auto m = parameter_list(opt.m);
  auto v = parameter_list(opt.v);
  if (g.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw DataError("adam: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i].second;
    for (const auto* other : {g[i].second, static_cast<const Matrix<S>*>(m[i].second),
                              static_cast<const Matrix<S>*>(v[i].second)}) {
      if (other->rows() != p.rows() || other->cols() != p.cols()) {
        throw DataError("adam: shape mismatch for " + params[i].first);
      }
    }
  }
  ++opt.step;
  const auto& h = opt.hyper;
  const S b1 = static_cast<S>(h.beta1);
  const S b2 = static_cast<S>(h.beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(h.beta1, static_cast<double>(opt.step)));
  const S bc2 = static_cast<S>(1.0 - std::pow(h.beta2, static_cast<double>(opt.step)));
  const S lr = static_cast<S>(h.lr);
  const S eps = static_cast<S>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto pa = params[i].second->array();
    const auto ga = g[i].second->array();
    auto ma = m[i].second->array();
    auto va = v[i].second->array();
    ma = b1 * ma + (S(1) - b1) * ga;
    va = b2 * va + (S(1) - b2) * ga.square();
    pa -= lr * (ma / bc1) / ((va / bc2).sqrt() + eps);
  }
}

template <class S>
std::vector<std::vector<TokenId>> greedy_decode(const Model<S>& model, const TokenBatch& src,
                                                int max_len, TokenId start, TokenId eos,
                                                const OverrideBuilder<S>* builder) {
  max_len = std::min(max_len, model.config.max_tgt_len);
  std::vector<std::vector<TokenId>> out(static_cast<std::size_t>(src.batch));
  if (src.batch == 0 || max_len <= 0) {
    return out;
  }
  PassCache<S> cache;
  HeadOverrides<S> overrides;
  if (builder != nullptr) {
    overrides = (*builder)(src, 1);
    check_overrides(model.config, &overrides);
  }
  encode<S>(model, src, builder != nullptr ? &overrides : nullptr, nullptr, cache);

  std::vector<char> done(static_cast<std::size_t>(src.batch), 0);
  std::vector<std::vector<TokenId>> prefix(static_cast<std::size_t>(src.batch),
                                           std::vector<TokenId>{start});
  for (int step = 1; step <= max_len; ++step) {
    const TokenBatch tgt_in = make_token_batch(prefix, start);
    if (builder != nullptr && step > 1) {
      overrides = (*builder)(src, step);
      check_overrides(model.config, &overrides);
    }
    const Matrix<S> logits =
        decode<S>(model, src, tgt_in, builder != nullptr ? &overrides : nullptr, nullptr, cache);
    bool all_done = true;
    for (int b = 0; b < src.batch; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      if (done[bi] != 0) {
        prefix[bi].push_back(eos);
        continue;
      }
      Eigen::Index best = 0;
      logits.row(static_cast<Eigen::Index>(b) * step + step - 1).maxCoeff(&best);
      const auto id = static_cast<TokenId>(best);
      out[bi].push_back(id);
      prefix[bi].push_back(id);
      if (id == eos) {
        done[bi] = 1;
      } else {
        all_done = false;
      }
    }
    if (all_done) {
      break;
    }
  }
  return out;
}

#define MEXP_INSTANTIATE(S)                                                                     \
  template std::vector<std::pair<std::string, Matrix<S>*>> parameter_list(Parameters<S>&);      \
  template std::vector<std::pair<std::string, const Matrix<S>*>> parameter_list(                \
      const Parameters<S>&);                                                                    \
  template Parameters<S> zeros_like(const Parameters<S>&);                                      \
  template Model<S> init_model<S>(const ModelConfig&);                                          \
  template Matrix<S> forward(const Model<S>&, const TokenBatch&, const TokenBatch&,             \
                             const HeadOverrides<S>*, ActivationTrace<S>*);                     \
  template LossAndGrads<S> loss_and_grads(const Model<S>&, const SupervisedBatch&, unsigned);   \
  template LossSum evaluate_loss(const Model<S>&, const SupervisedBatch&);                      \
  template AdamState<S> make_adam(const Model<S>&, const AdamConfig&);                          \
  template void adam_step(Model<S>&, const Parameters<S>&, AdamState<S>&);                      \
  template std::vector<std::vector<TokenId>> greedy_decode(                                     \
      const Model<S>&, const TokenBatch&, int, TokenId, TokenId, const OverrideBuilder<S>*);

MEXP_INSTANTIATE(float)
MEXP_INSTANTIATE(double)
#undef MEXP_INSTANTIATE

template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);
template Model<double> convert_model<double, double>(const Model<double>&);

}  // namespace mexp
