#pragma once

// Exact-posterior EM for the latent state tracking network.
//
// E-step: the posterior over state chains factorizes into per-turn tables
// q_i(z_i | z_{i-1}). They come from a backward recursion over
//   b_i(z_{i-1}, z_i) = p(z_i | z_{i-1}, x_i) p(y_i | z_i) sum_{z'} b_{i+1}(z_i, z')
// with each column of b_i normalized.
//
// M-step: the expected complete log-likelihood is built by a second
// backward recursion with q held constant,
//   f_i(z_{i-1}) = E_{q_i(.|z_{i-1})}[f_{i+1}(z_i) + log p(z_i|z_{i-1},x_i) + log p(y_i|z_i)]
// and f_1(START) is maximized by gradient steps.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lstn/corpus.hpp"
#include "lstn/model.hpp"

namespace lstn {

/// log_q[0] is K x 1 (predecessor START); log_q[i] for i > 0 is K x K with
/// column = previous state, row = current state. Columns exp-sum to 1.
struct PosteriorTable {
  std::vector<Matrix> log_q;
  int num_turns() const { return static_cast<int>(log_q.size()); }
};

PosteriorTable e_step(const DialogFactors& factors);
PosteriorTable e_step(const LstnModel& model, const EncodedDialog& dialog);

/// Forward recursion, log p(y_{1:N} | x_{1:N}).
double marginal_loglik(const DialogFactors& factors);
double marginal_loglik(const LstnModel& model, const EncodedDialog& dialog);

/// f_1(START) as a differentiable node. q enters as constants.
Var m_step_objective(const FactorNodes& factors, const PosteriorTable& q);
double m_step_objective(const LstnModel& model, const EncodedDialog& dialog, const PosteriorTable& q);

/// All f_i tables by value: entry i has one value per predecessor
/// (a single entry for START at i = 0).
std::vector<Vector> m_step_table(const DialogFactors& factors, const PosteriorTable& q);

/// Entropy of the chain distribution encoded by q.
double posterior_entropy(const PosteriorTable& q);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.01;
  int embedding_dim = 32;
  int hidden_dim = 32;
  int num_states = 8;
  bool shared_state_embeddings = false;
  int batch_size = 16;
  int epochs = 20;
  std::uint64_t seed = 1;
  int m_steps_per_e_step = 1;
  /// Deterministic annealing: over the first anneal_epochs epochs the E-step
  /// uses factors raised to beta, rising linearly from anneal_start to 1.
  /// 0 disables it (exact EM throughout).
  int anneal_epochs = 0;
  double anneal_start = 0.1;
  int max_response_len = 40;
  double init_range = 0.5;
  /// Independent initializations. Each trains for probe_epochs, then the one
  /// with the best dev perplexity continues to `epochs`. Restart 0 uses
  /// `seed` itself.
  int restarts = 1;
  int probe_epochs = 3;
  /// Permit values outside the published hyperparameter grids.
  bool allow_off_grid = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::uint64_t fingerprint() const;
};

ModelConfig make_model_config(const TrainConfig& config, const Vocabulary& vocab);

struct TrainLogRecord {
  std::string phase = "lstn";
  int restart = 0;
  int epoch = 0;
  long batch = 0;
  double elbo = 0.0;
  double dev_loglik = 0.0;
  double dev_ppl = 0.0;
  long wall_ms = 0;
  nlohmann::json to_json() const;
};

struct TrainResult {
  LstnModel model;  // best dev perplexity
  std::vector<TrainLogRecord> log;
  int best_epoch = 0;
  double best_dev_ppl = 0.0;
  int restart = 0;  // restart that was continued
  bool aborted = false;
  std::string abort_reason;
};

using LogSink = std::function<void(const TrainLogRecord&)>;

struct DevScore {
  double loglik = 0.0;  // summed over dialogs
  long tokens = 0;
  double perplexity = 0.0;
};

/// Marginal log-likelihood of the responses with states summed out, and the
/// token-level perplexity exp(-loglik / tokens). Tokens include EOS.
DevScore score_corpus(const LstnModel& model, const std::vector<EncodedDialog>& dialogs);

struct BatchStats {
  double elbo = 0.0;       // mean over the batch, at the pre-update parameters
  double objective = 0.0;  // mean f_1 before the first update
};

/// One generalized-EM round: exact E-step per dialog, then
/// config.m_steps_per_e_step Adam steps on the batch-mean objective.
/// beta < 1 tempers the posterior (see TrainConfig::anneal_epochs).
BatchStats em_step(LstnModel& model, const std::vector<const EncodedDialog*>& batch, const TrainConfig& config,
                   double beta = 1.0);

std::uint64_t restart_seed(std::uint64_t seed, int restart);

/// Annealing exponent for a 1-based epoch.
double anneal_beta(const TrainConfig& config, int epoch);
/// Factors scaled by beta in log space.
DialogFactors temper(DialogFactors factors, double beta);

/// Pieces of a training run plugged into run_training.
struct TrainingHooks {
  std::string phase = "lstn";
  std::function<LstnModel(std::uint64_t seed)> init;
  /// One update on the given training indices; returns the batch ELBO sum.
  std::function<double(LstnModel&, const std::vector<std::size_t>&, int epoch)> step;
  std::function<DevScore(const LstnModel&)> score_dev;
  /// Summed training log-likelihood for the epoch-0 record.
  std::function<double(const LstnModel&)> score_train;
  /// Ignore config.restarts (the run continues a fixed starting point).
  bool single_start = false;
  /// Offset for the shuffling stream.
  std::uint64_t stream = 1;
};

/// Shuffled minibatch epochs with dev-perplexity model selection and
/// probe-then-continue restarts. A NumericalError aborts the affected
/// restart and is reported in the result.
TrainResult run_training(std::size_t train_size, const TrainConfig& config, const TrainingHooks& hooks,
                         const LogSink& sink = {});

TrainResult train(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                  const ModelConfig& model_config, const TrainConfig& config, const LogSink& sink = {});

}  // namespace lstn
