#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "mexp/codec.hpp"
#include "mexp/error.hpp"

// Encoder-decoder transformer with hand-written reverse mode, Adam, and
// per-head activation capture/override hooks.
//
// Architecture: pre-norm residual blocks, ReLU feed-forward, learned
// positional tables (one per side), one token embedding table shared by
// encoder, decoder and the tied output projection.
namespace mexp {

struct ModelConfig {
  int n_layers_enc = 4;
  int n_layers_dec = 4;
  int d_model = 256;
  int n_heads = 8;
  int d_ff = 1024;
  int vocab_size = 0;
  int max_src_len = 0;
  int max_tgt_len = 0;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  /// Throws UsageError on non-positive dims or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

enum class Side : std::uint8_t { encoder, decoder };
enum class AttentionKind : std::uint8_t { self, cross };

/// Addresses one attention head: encoder heads are always `self`.
struct HeadSlot {
  Side side = Side::decoder;
  int layer = 0;
  AttentionKind kind = AttentionKind::self;
  int head = 0;

  auto operator<=>(const HeadSlot&) const = default;
};

std::string to_string(Side side);
std::string to_string(AttentionKind kind);
std::string to_string(const HeadSlot& slot);

/// All head slots in a fixed order: encoder layers first, then per decoder
/// layer the self heads followed by the cross heads.
std::vector<HeadSlot> head_slots(const ModelConfig& config, bool include_encoder,
                                 bool include_decoder = true);
bool slot_in_range(const ModelConfig& config, const HeadSlot& slot);

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Linear maps are stored input-major (in x out) and applied as x * W.
template <class S>
struct AttentionWeights {
  Matrix<S> wq, wk, wv, wo;
};

template <class S>
struct FeedForwardWeights {
  Matrix<S> w1, b1, w2, b2;
};

template <class S>
struct LayerNormWeights {
  Matrix<S> gain, bias;
};

template <class S>
struct EncoderLayerWeights {
  LayerNormWeights<S> norm_attn, norm_ffn;
  AttentionWeights<S> self_attn;
  FeedForwardWeights<S> ffn;
};

template <class S>
struct DecoderLayerWeights {
  LayerNormWeights<S> norm_self, norm_cross, norm_ffn;
  AttentionWeights<S> self_attn, cross_attn;
  FeedForwardWeights<S> ffn;
};

template <class S>
struct Parameters {
  Matrix<S> token_embedding;    // vocab x d_model, also the output projection
  Matrix<S> encoder_positions;  // max_src_len x d_model
  Matrix<S> decoder_positions;  // max_tgt_len x d_model
  std::vector<EncoderLayerWeights<S>> encoder;
  std::vector<DecoderLayerWeights<S>> decoder;
  LayerNormWeights<S> encoder_norm, decoder_norm;
};

/// Every parameter tensor with a stable dotted name, in the fixed order used
/// by checkpoints, Adam and gradient checks.
template <class S>
std::vector<std::pair<std::string, Matrix<S>*>> parameter_list(Parameters<S>& params);
template <class S>
std::vector<std::pair<std::string, const Matrix<S>*>> parameter_list(const Parameters<S>& params);

/// Same shapes as `like`, all zeros.
template <class S>
Parameters<S> zeros_like(const Parameters<S>& like);

std::size_t parameter_count(const ModelConfig& config);

template <class S>
struct Model {
  ModelConfig config;
  Parameters<S> params;
};

/// Deterministic init from config.seed: N(0, d^-1/2) embeddings, N(0,
/// fan_in^-1/2) projections, zero biases, unit layer-norm gains.
template <class S>
Model<S> init_model(const ModelConfig& config);

template <class To, class From>
Model<To> convert_model(const Model<From>& model);

/// Right-padded token ids, row-major batch x len.
struct TokenBatch {
  int batch = 0;
  int len = 0;
  std::vector<TokenId> ids;
  std::vector<int> lengths;

  TokenId at(int b, int t) const { return ids[static_cast<std::size_t>(b * len + t)]; }
};

TokenBatch make_token_batch(std::span<const std::vector<TokenId>> seqs, TokenId pad);

/// Teacher-forced batch: decoder input is target[:-1], labels target[1:].
struct SupervisedBatch {
  TokenBatch src;
  TokenBatch tgt_in;
  std::vector<TokenId> labels;  // batch x tgt_in.len, pad where unsupervised
  TokenId pad = 0;

  int batch() const { return src.batch; }
};

SupervisedBatch make_supervised_batch(std::span<const TokenSeq> sources,
                                      std::span<const TokenSeq> targets, const Vocabulary& vocab);

/// Rows [first, first + count) of a batch, keeping the padded widths.
SupervisedBatch slice_batch(const SupervisedBatch& batch, int first, int count);
TokenBatch slice_batch(const TokenBatch& batch, int first, int count);

/// Per-head value-weighted outputs (before the output projection) for each
/// slot, rows = batch x query length, cols = head_dim.
template <class S>
using HeadOverrides = std::map<HeadSlot, Matrix<S>>;

template <class S>
struct ActivationTrace {
  std::map<HeadSlot, Matrix<S>> heads;
  /// Attention probabilities (batch x Lq rows, Lk cols) when record_patterns.
  std::map<HeadSlot, Matrix<S>> patterns;
  bool record_patterns = false;
  Matrix<S> logits;
};

/// Logits of shape (batch * tgt_len) x vocab. Overrides replace the named
/// head outputs; the trace records the values actually used.
template <class S>
Matrix<S> forward(const Model<S>& model, const TokenBatch& src, const TokenBatch& tgt_in,
                  const HeadOverrides<S>* overrides = nullptr,
                  ActivationTrace<S>* trace = nullptr);

template <class S>
struct LossAndGrads {
  S loss = 0;                  // mean cross-entropy over supervised positions
  std::size_t tokens = 0;      // supervised positions
  std::size_t exact = 0;       // rows whose argmax matches every label
  Parameters<S> grads;
};

/// Mean token cross-entropy and its gradient. The batch is processed in
/// fixed chunks reduced in order, so results do not depend on `threads`.
/// Throws DataError when no position is supervised and DivergenceError
/// when the loss is not finite.
template <class S>
LossAndGrads<S> loss_and_grads(const Model<S>& model, const SupervisedBatch& batch,
                               unsigned threads = 1);

struct LossSum {
  double sum = 0.0;
  std::size_t tokens = 0;
  std::size_t exact = 0;
};

/// Forward-only cross-entropy sum (no gradients).
template <class S>
LossSum evaluate_loss(const Model<S>& model, const SupervisedBatch& batch);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void to_json(nlohmann::json& j, const AdamConfig& config);
void from_json(const nlohmann::json& j, AdamConfig& config);

template <class S>
struct AdamState {
  AdamConfig hyper;
  std::uint64_t step = 0;
  Parameters<S> m;
  Parameters<S> v;
};

template <class S>
AdamState<S> make_adam(const Model<S>& model, const AdamConfig& hyper);

/// Bias-corrected Adam update; throws DataError on shape mismatch.
template <class S>
void adam_step(Model<S>& model, const Parameters<S>& grads, AdamState<S>& opt);

/// Supplies overrides for a decode step given the source batch and the
/// current decoder input length. Encoder slots are read on the first step.
template <class S>
using OverrideBuilder = std::function<HeadOverrides<S>(const TokenBatch& src, int decoder_len)>;

/// Argmax decoding from `start` until `eos` or max_len generated tokens.
/// Returned sequences exclude the start token and include <eos> when emitted.
template <class S>
std::vector<std::vector<TokenId>> greedy_decode(const Model<S>& model, const TokenBatch& src,
                                                int max_len, TokenId start, TokenId eos,
                                                const OverrideBuilder<S>* builder = nullptr);

}  // namespace mexp
