#pragma once

// Shared fixtures and brute-force oracles for the unit and acceptance tests.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "lstn/corpus.hpp"
#include "lstn/em.hpp"
#include "lstn/model.hpp"

namespace lstn::testing {

/// Vocabulary holding the reserved entries plus w0..w{n-1}.
inline Vocabulary toy_vocab(int n) {
  Dialog d{"v", {}};
  Turn t;
  for (int i = 0; i < n; ++i) t.user.push_back("w" + std::to_string(i));
  t.agent = {"w0"};
  d.turns.push_back(t);
  return Vocabulary::build({d}, 1);
}

inline ModelConfig toy_config(int num_states, int vocab_size, int dim, bool shared = false) {
  ModelConfig c;
  c.num_states = num_states;
  c.vocab_size = vocab_size;
  c.embed_dim = dim;
  c.hidden_dim = dim;
  c.shared_state_embeddings = shared;
  c.max_response_len = 8;
  return c;
}

inline LstnModel random_model(int num_states, int vocab_size, int dim, std::uint64_t seed, double range = 0.8,
                              bool shared = false) {
  return LstnModel::create(toy_config(num_states, vocab_size, dim, shared), range, seed);
}

/// User and agent token ids drawn from the non-reserved range; agent ends in EOS.
inline EncodedDialog random_dialog(int turns, int vocab_size, std::mt19937_64& rng, int max_len = 3) {
  std::uniform_int_distribution<int> word(Vocabulary::kNumReserved, vocab_size - 1);
  std::uniform_int_distribution<int> len(1, max_len);
  EncodedDialog d;
  d.id = "rand";
  for (int i = 0; i < turns; ++i) {
    EncodedTurn t;
    for (int j = len(rng); j > 0; --j) t.user.push_back(word(rng));
    for (int j = len(rng); j > 0; --j) t.agent.push_back(word(rng));
    t.agent.push_back(Vocabulary::kEos);
    d.turns.push_back(std::move(t));
  }
  return d;
}

inline double lse(const std::vector<double>& v) {
  double m = -INFINITY;
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Every quantity the EM code computes recursively, obtained instead by
/// listing all K^N state chains.
struct Enumeration {
  double loglik = 0.0;
  double entropy = 0.0;
  std::vector<Matrix> q;  // same layout as PosteriorTable::log_q, in probabilities
};

template <class JointFn>
Enumeration enumerate_chains(int num_states, int turns, JointFn&& joint) {
  const int k = num_states;
  std::vector<std::vector<int>> chains;
  std::vector<double> logp;
  std::vector<int> z(static_cast<std::size_t>(turns), 0);
  while (true) {
    chains.push_back(z);
    logp.push_back(joint(z));
    int pos = turns - 1;
    while (pos >= 0 && ++z[static_cast<std::size_t>(pos)] == k) z[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
  }
  Enumeration e;
  e.loglik = lse(logp);
  std::vector<Matrix> pair(static_cast<std::size_t>(turns));
  pair[0] = Matrix::Zero(k, 1);
  for (int i = 1; i < turns; ++i) pair[static_cast<std::size_t>(i)] = Matrix::Zero(k, k);
  std::vector<Vector> single(static_cast<std::size_t>(turns), Vector::Zero(k));
  for (std::size_t c = 0; c < chains.size(); ++c) {
    double p = std::exp(logp[c] - e.loglik);
    if (p > 0) e.entropy -= p * (logp[c] - e.loglik);
    const auto& ch = chains[c];
    pair[0](ch[0], 0) += p;
    for (int i = 0; i < turns; ++i) single[static_cast<std::size_t>(i)](ch[static_cast<std::size_t>(i)]) += p;
    for (int i = 1; i < turns; ++i)
      pair[static_cast<std::size_t>(i)](ch[static_cast<std::size_t>(i)], ch[static_cast<std::size_t>(i - 1)]) += p;
  }
  e.q = pair;
  for (int i = 1; i < turns; ++i)
    for (int a = 0; a < k; ++a) e.q[static_cast<std::size_t>(i)].col(a) /= single[static_cast<std::size_t>(i - 1)](a);
  return e;
}

inline Enumeration enumerate(const LstnModel& model, const EncodedDialog& d) {
  return enumerate_chains(model.num_states(), static_cast<int>(d.turns.size()),
                          [&](const std::vector<int>& z) { return joint_logprob(model, d, z); });
}

inline Enumeration enumerate(const DialogFactors& f) {
  const int k = static_cast<int>(f.log_emit[0].size());
  return enumerate_chains(k, f.num_turns(), [&](const std::vector<int>& z) {
    double s = f.log_trans[0](z[0], 0) + f.log_emit[0](z[0]);
    for (std::size_t i = 1; i < z.size(); ++i) s += f.log_trans[i](z[i], z[i - 1]) + f.log_emit[i](z[i]);
    return s;
  });
}

/// One-turn, two-state instance: transitions (0.6, 0.4), emissions (0.5, 0.25).
inline DialogFactors hand_instance() {
  DialogFactors f;
  Matrix t(2, 1);
  t << std::log(0.6), std::log(0.4);
  Vector e(2);
  e << std::log(0.5), std::log(0.25);
  f.log_trans.push_back(t);
  f.log_emit.push_back(e);
  return f;
}

/// Random normalized factor tables (no model), for recursion-only checks.
inline DialogFactors random_factors(int num_states, int turns, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  DialogFactors f;
  for (int i = 0; i < turns; ++i) {
    Matrix t(num_states, i == 0 ? 1 : num_states);
    for (long c = 0; c < t.cols(); ++c) {
      for (long r = 0; r < t.rows(); ++r) t(r, c) = u(rng);
      t.col(c).array() -= logsumexp(t.col(c));
    }
    Vector e(num_states);
    for (int z = 0; z < num_states; ++z) e(z) = u(rng) - 4.0;
    f.log_trans.push_back(t);
    f.log_emit.push_back(e);
  }
  return f;
}

inline double max_abs_q_error(const PosteriorTable& q, const Enumeration& e) {
  double err = 0.0;
  for (std::size_t i = 0; i < q.log_q.size(); ++i)
    err = std::max(err, (q.log_q[i].array().exp().matrix() - e.q[i]).cwiseAbs().maxCoeff());
  return err;
}

}  // namespace lstn::testing
