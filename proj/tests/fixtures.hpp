// Shared helpers for the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "mexp/codec.hpp"
#include "mexp/analysis.hpp"
#include "mexp/model.hpp"
#include "mexp/rng.hpp"

namespace mexp::testing {

// d_model 8, 1+1 layers, 2 heads, vocab 12 (base 8).
inline ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers_enc = 1;
  c.n_layers_dec = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.max_src_len = 12;
  c.max_tgt_len = 5;
  c.seed = seed;
  return c;
}

// Init leaves gains at 1 and biases at 0; jitter everything so those
// parameters have generic gradients too.
template <class S>
void jitter(Model<S>& model, std::uint64_t seed, double scale = 0.1) {
  CounterRng rng(seed, Stream::init, 9999);
  for (auto& [name, m] : parameter_list(model.params)) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      m->data()[i] += static_cast<S>(scale * rng.normal());
    }
  }
}

inline SupervisedBatch tiny_batch(const Vocabulary& vocab, std::uint64_t seed, int rows = 3) {
  std::vector<TokenSeq> sources;
  std::vector<TokenSeq> targets;
  CounterRng rng(seed, Stream::dataset, 0);
  for (int i = 0; i < rows; ++i) {
    ModExpInstance inst;
    inst.a = rng.uniform_int(0, 500);
    inst.b = rng.uniform_int(0, 60);
    inst.c = rng.uniform_int(1, 70);
    inst.d = rng.uniform_int(0, inst.c - 1);
    auto [s, t] = encode_instance(inst, vocab);
    sources.push_back(std::move(s));
    targets.push_back(std::move(t));
  }
  return make_supervised_batch(sources, targets, vocab);
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences against the analytic gradient, every parameter entry.
// Relative error |g - n| / max(|g| + |n|, floor).
inline GradCheck gradient_check(Model<double> model, const SupervisedBatch& batch,
                                double h = 1e-5, double floor = 1e-6) {
  const auto analytic = loss_and_grads(model, batch);
  auto loss_at = [&](const Model<double>& m) { return loss_and_grads(m, batch).loss; };
  GradCheck out;
  auto params = parameter_list(model.params);
  const auto grads = parameter_list(analytic.grads);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix<double>& w = *params[p].second;
    const Matrix<double>& g = *grads[p].second;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double keep = w.data()[i];
      w.data()[i] = keep + h;
      const double up = loss_at(model);
      w.data()[i] = keep - h;
      const double down = loss_at(model);
      w.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = g.data()[i];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor);
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[p].first + "[" + std::to_string(i) + "]";
      }
      ++out.checked;
    }
  }
  return out;
}

// Accuracy 0.2 before `onset`, 0.95 from it on, one point per epoch.
inline AccuracySeries step_curve(std::uint64_t seed, int onset, int epochs = 400,
                                 double noise = 0.0) {
  AccuracySeries s;
  s.modulus = 23;
  CounterRng rng(seed, Stream::dataset, 1);
  for (int e = 1; e <= epochs; ++e) {
    const double base = e < onset ? 0.2 : 0.95;
    s.points.push_back({e, std::clamp(base + noise * rng.normal(), 0.0, 1.0), 100});
  }
  return s;
}

inline AccuracySeries noisy_ramp(std::uint64_t seed, int epochs = 400, double slope = 0.001,
                                 double noise = 0.02) {
  AccuracySeries s;
  s.modulus = 47;
  CounterRng rng(seed, Stream::dataset, 2);
  for (int e = 1; e <= epochs; ++e) {
    const double v = 0.1 + slope * e + noise * rng.normal();
    s.points.push_back({e, std::clamp(v, 0.0, 1.0), 100});
  }
  return s;
}

// Planted covariance: rows = z * diag(sqrt(var)) * Q^T for orthonormal Q.
inline Eigen::MatrixXd planted(const std::vector<double>& var, int dim, int n, std::uint64_t seed) {
  CounterRng rng(seed, Stream::dataset, 0);
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    g.data()[i] = rng.normal();
  }
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::MatrixXd z(n, static_cast<Eigen::Index>(var.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = rng.normal();
  }
  // whiten so the sample covariance of z is exactly the identity
  z.rowwise() -= z.colwise().mean();
  const Eigen::MatrixXd cov = z.transpose() * z / (n - 1);
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  z = z * llt.matrixU().solve(Eigen::MatrixXd::Identity(z.cols(), z.cols()));
  Eigen::MatrixXd scaled = z;
  for (std::size_t k = 0; k < var.size(); ++k) {
    scaled.col(static_cast<Eigen::Index>(k)) *= std::sqrt(var[k]);
  }
  return scaled * q.leftCols(static_cast<Eigen::Index>(var.size())).transpose();
}

}  // namespace mexp::testing
