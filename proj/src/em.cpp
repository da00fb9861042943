#include "lstn/em.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "lstn/errors.hpp"
#include "lstn/hash.hpp"

namespace lstn {

using nlohmann::json;

namespace {

void check_factors(const DialogFactors& f) {
  if (f.log_emit.empty()) throw ArgumentError("dialog has no turns");
  if (f.log_trans.size() != f.log_emit.size()) throw ArgumentError("transition/emission factor count mismatch");
}

void check_finite(const Matrix& m, const char* what, int turn) {
  if (!m.allFinite()) throw NumericalError(std::string("non-finite ") + what, turn);
}

void check_lengths(std::size_t q_turns, std::size_t dialog_turns) {
  if (q_turns != dialog_turns)
    throw ArgumentError("posterior table covers " + std::to_string(q_turns) + " turns, dialog has " +
                        std::to_string(dialog_turns));
}

// Eigen's vectorized exp maps -inf to a denormal rather than 0, which turns
// 0 * log 0 into -inf downstream.
Matrix probs(const Matrix& log_p) {
  return log_p.unaryExpr([](double v) { return v == -INFINITY ? 0.0 : std::exp(v); });
}

bool in_grid(double v, std::initializer_list<double> grid) {
  return std::any_of(grid.begin(), grid.end(), [v](double g) { return std::abs(v - g) <= 1e-12 * std::abs(g); });
}

}  // namespace

PosteriorTable e_step(const DialogFactors& f) {
  check_factors(f);
  const int n = f.num_turns();
  PosteriorTable q;
  q.log_q.resize(static_cast<std::size_t>(n));
  Vector beta;  // log sum_{z'} b_{i+1}(z, z'), absent at the last turn
  for (int i = n - 1; i >= 0; --i) {
    Vector column = f.log_emit[static_cast<std::size_t>(i)];
    if (beta.size()) column += beta;
    Matrix b = f.log_trans[static_cast<std::size_t>(i)].colwise() + column;
    check_finite(b, "backward message", i);
    Vector norm(b.cols());
    for (long p = 0; p < b.cols(); ++p) norm(p) = logsumexp(b.col(p));
    check_finite(norm, "posterior normalizer", i);
    b.rowwise() -= norm.transpose();
    q.log_q[static_cast<std::size_t>(i)] = std::move(b);
    beta = norm;
  }
  return q;
}

PosteriorTable e_step(const LstnModel& model, const EncodedDialog& dialog) {
  return e_step(compute_factors(model, dialog));
}

double marginal_loglik(const DialogFactors& f) {
  check_factors(f);
  Vector alpha = f.log_trans[0].col(0) + f.log_emit[0];
  for (std::size_t i = 1; i < f.log_emit.size(); ++i) {
    const Matrix& t = f.log_trans[i];
    Vector next(t.rows());
    for (long z = 0; z < t.rows(); ++z) next(z) = logsumexp(alpha + t.row(z).transpose());
    alpha = next + f.log_emit[i];
    check_finite(alpha, "forward message", static_cast<int>(i));
  }
  double ll = logsumexp(alpha);
  if (!std::isfinite(ll)) throw NumericalError("non-finite marginal log-likelihood", f.num_turns() - 1);
  return ll;
}

double marginal_loglik(const LstnModel& model, const EncodedDialog& dialog) {
  return marginal_loglik(compute_factors(model, dialog));
}

Var m_step_objective(const FactorNodes& f, const PosteriorTable& q) {
  check_lengths(q.log_q.size(), f.log_emit.size());
  if (f.log_emit.empty()) throw ArgumentError("dialog has no turns");
  Var next;
  for (std::size_t i = f.log_emit.size(); i-- > 0;) {
    Var column = next.valid() ? ad::add(f.log_emit[i], next) : f.log_emit[i];
    Var inner = ad::add(f.log_trans[i], column);
    const Matrix& lq = q.log_q[i];
    if (lq.rows() != inner.rows() || lq.cols() != inner.cols())
      throw ArgumentError("posterior table shape does not match turn " + std::to_string(i));
    next = ad::weighted_col_sum(inner, probs(lq));
  }
  return next;
}

double m_step_objective(const LstnModel& model, const EncodedDialog& dialog, const PosteriorTable& q) {
  check_lengths(q.log_q.size(), dialog.turns.size());
  Tape tape(model.store);
  FactorNodeCache cache(tape, model);
  return m_step_objective(cache.build(dialog), q).scalar();
}

std::vector<Vector> m_step_table(const DialogFactors& f, const PosteriorTable& q) {
  check_factors(f);
  check_lengths(q.log_q.size(), f.log_emit.size());
  std::vector<Vector> table(f.log_emit.size());
  Vector next;
  for (std::size_t i = f.log_emit.size(); i-- > 0;) {
    Vector column = f.log_emit[i];
    if (next.size()) column += next;
    Matrix inner = f.log_trans[i].colwise() + column;
    Matrix w = probs(q.log_q[i]);
    table[i] = inner.cwiseProduct(w).colwise().sum().transpose();
    next = table[i];
  }
  return table;
}

double posterior_entropy(const PosteriorTable& q) {
  Vector mu = Vector::Ones(1);
  double h = 0.0;
  for (const Matrix& lq : q.log_q) {
    Matrix p = probs(lq);
    for (long c = 0; c < lq.cols(); ++c) {
      double hc = 0.0;
      for (long z = 0; z < lq.rows(); ++z)
        if (std::isfinite(lq(z, c))) hc -= p(z, c) * lq(z, c);
      h += mu(c) * hc;
    }
    mu = p * mu;
  }
  return h;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be positive");
  if (embedding_dim < 1 || hidden_dim < 1) throw ArgumentError("embedding_dim and hidden_dim must be >= 1");
  if (num_states < 1) throw ArgumentError("num_states must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (m_steps_per_e_step < 1) throw ArgumentError("m_steps_per_e_step must be >= 1");
  if (restarts < 1) throw ArgumentError("restarts must be >= 1");
  if (probe_epochs < 1) throw ArgumentError("probe_epochs must be >= 1");
  if (!(init_range > 0.0)) throw ArgumentError("init_range must be positive");
  if (anneal_epochs < 0) throw ArgumentError("anneal_epochs must be >= 0");
  if (!(anneal_start > 0.0 && anneal_start <= 1.0)) throw ArgumentError("anneal_start must be in (0, 1]");
  if (max_response_len < 1) throw ArgumentError("max_response_len must be >= 1");
  if (allow_off_grid) return;
  if (!in_grid(learning_rate, {0.01, 0.001, 0.0001}))
    throw ArgumentError("learning_rate must be one of {0.01, 0.001, 0.0001} (set allow_off_grid to override)");
  if (!in_grid(embedding_dim, {16, 32, 64}))
    throw ArgumentError("embedding_dim must be one of {16, 32, 64} (set allow_off_grid to override)");
  if (!in_grid(num_states, {8, 16, 32, 64, 128}))
    throw ArgumentError("num_states must be one of {8, 16, 32, 64, 128} (set allow_off_grid to override)");
}

json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"embedding_dim", embedding_dim},
          {"hidden_dim", hidden_dim},
          {"num_states", num_states},
          {"shared_state_embeddings", shared_state_embeddings},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"m_steps_per_e_step", m_steps_per_e_step},
          {"anneal_epochs", anneal_epochs},
          {"anneal_start", anneal_start},
          {"max_response_len", max_response_len},
          {"init_range", init_range},
          {"restarts", restarts},
          {"probe_epochs", probe_epochs},
          {"allow_off_grid", allow_off_grid}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_states = j.value("num_states", c.num_states);
  c.shared_state_embeddings = j.value("shared_state_embeddings", c.shared_state_embeddings);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.m_steps_per_e_step = j.value("m_steps_per_e_step", c.m_steps_per_e_step);
  c.anneal_epochs = j.value("anneal_epochs", c.anneal_epochs);
  c.anneal_start = j.value("anneal_start", c.anneal_start);
  c.max_response_len = j.value("max_response_len", c.max_response_len);
  c.init_range = j.value("init_range", c.init_range);
  c.restarts = j.value("restarts", c.restarts);
  c.probe_epochs = j.value("probe_epochs", c.probe_epochs);
  c.allow_off_grid = j.value("allow_off_grid", c.allow_off_grid);
  return c;
}

std::uint64_t TrainConfig::fingerprint() const { return fnv1a(to_json().dump()); }

ModelConfig make_model_config(const TrainConfig& config, const Vocabulary& vocab) {
  ModelConfig m;
  m.num_states = config.num_states;
  m.vocab_size = vocab.size();
  m.embed_dim = config.embedding_dim;
  m.hidden_dim = config.hidden_dim;
  m.shared_state_embeddings = config.shared_state_embeddings;
  m.max_response_len = config.max_response_len;
  m.vocab_fingerprint = vocab.fingerprint();
  return m;
}

json TrainLogRecord::to_json() const {
  return {{"phase", phase},         {"restart", restart}, {"epoch", epoch},     {"batch", batch},        {"elbo", elbo},
          {"dev_loglik", dev_loglik}, {"dev_ppl", dev_ppl}, {"wall_ms", wall_ms}};
}

DevScore score_corpus(const LstnModel& model, const std::vector<EncodedDialog>& dialogs) {
  FactorCache cache(model);
  DevScore s;
  for (const auto& d : dialogs) {
    s.loglik += marginal_loglik(cache.factors(d));
    for (const auto& t : d.turns) s.tokens += static_cast<long>(t.agent.size());
  }
  s.perplexity = s.tokens > 0 ? std::exp(-s.loglik / static_cast<double>(s.tokens)) : 1.0;
  return s;
}

double anneal_beta(const TrainConfig& config, int epoch) {
  if (config.anneal_epochs <= 0 || epoch > config.anneal_epochs) return 1.0;
  double t = static_cast<double>(epoch - 1) / static_cast<double>(config.anneal_epochs);
  return config.anneal_start + (1.0 - config.anneal_start) * t;
}

DialogFactors temper(DialogFactors f, double beta) {
  for (auto& m : f.log_trans) m *= beta;
  for (auto& v : f.log_emit) v *= beta;
  return f;
}

BatchStats em_step(LstnModel& model, const std::vector<const EncodedDialog*>& batch, const TrainConfig& config,
                   double beta) {
  if (batch.empty()) throw ArgumentError("em_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  BatchStats stats;
  std::vector<PosteriorTable> posteriors;
  posteriors.reserve(batch.size());

  for (int m = 0; m < config.m_steps_per_e_step; ++m) {
    Tape tape(model.store);
    FactorNodeCache cache(tape, model);
    Var total;
    for (std::size_t d = 0; d < batch.size(); ++d) {
      FactorNodes nodes = cache.build(*batch[d]);
      if (m == 0) {
        DialogFactors values = factor_values(nodes);
        posteriors.push_back(e_step(beta == 1.0 ? values : temper(std::move(values), beta)));
      }
      Var f1 = m_step_objective(nodes, posteriors[d]);
      if (m == 0) stats.elbo += (f1.scalar() + posterior_entropy(posteriors[d])) * inv;
      total = total.valid() ? ad::add(total, f1) : f1;
    }
    Var loss = ad::scale(total, -inv);
    if (!std::isfinite(loss.scalar())) throw NumericalError("non-finite M-step objective");
    if (m == 0) stats.objective = -loss.scalar();
    tape.backward(loss);
    adam_update(model.store, AdamConfig{config.learning_rate});
  }
  return stats;
}

std::uint64_t restart_seed(std::uint64_t seed, int restart) {
  if (restart == 0) return seed;
  return fnv1a(std::to_string(seed) + "/restart/" + std::to_string(restart));
}

namespace {

struct Run {
  LstnModel model;
  std::mt19937_64 rng;
  TrainResult result;
  long batches = 0;
};

}  // namespace

TrainResult run_training(std::size_t train_size, const TrainConfig& config, const TrainingHooks& hooks,
                         const LogSink& sink) {
  if (train_size == 0) throw ArgumentError("train: empty training split");
  const auto started = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return static_cast<long>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started).count());
  };
  const double n = static_cast<double>(train_size);
  std::vector<TrainLogRecord> log;
  auto emit = [&](Run& run, int restart, int epoch, double elbo, const DevScore& dev) {
    TrainLogRecord rec{hooks.phase, restart, epoch, run.batches, elbo, dev.loglik, dev.perplexity, elapsed_ms()};
    run.result.log.push_back(rec);
    log.push_back(rec);
    if (sink) sink(rec);
  };

  std::vector<std::size_t> order(train_size);
  auto run_epochs = [&](Run& run, int restart, int first, int last) {
    for (int epoch = first; epoch <= last && !run.result.aborted; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), run.rng);
      double elbo_sum = 0.0;
      try {
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
          std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
          std::vector<std::size_t> batch(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
          elbo_sum += hooks.step(run.model, batch, epoch);
          ++run.batches;
        }
      } catch (const NumericalError& e) {
        run.result.aborted = true;
        run.result.abort_reason =
            "restart " + std::to_string(restart) + ", epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
      DevScore dev = hooks.score_dev(run.model);
      emit(run, restart, epoch, elbo_sum / n, dev);
      if (std::isfinite(dev.perplexity) && dev.perplexity < run.result.best_dev_ppl) {
        run.result.best_dev_ppl = dev.perplexity;
        run.result.best_epoch = epoch;
        run.result.model = run.model;
      }
    }
  };

  const int restarts = hooks.single_start ? 1 : config.restarts;
  const int probe = restarts > 1 ? std::min(config.probe_epochs, config.epochs) : config.epochs;
  std::vector<Run> runs;
  for (int r = 0; r < restarts; ++r) {
    std::uint64_t seed = restart_seed(config.seed, r);
    Run run{hooks.init(seed), std::mt19937_64(seed * 0x9e3779b97f4a7c15ULL + hooks.stream), {}, 0};
    DevScore dev = hooks.score_dev(run.model);
    emit(run, r, 0, hooks.score_train(run.model) / n, dev);
    run.result.model = run.model;
    run.result.best_dev_ppl = dev.perplexity;
    run_epochs(run, r, 1, probe);
    runs.push_back(std::move(run));
  }

  int chosen = 0;
  for (int r = 1; r < restarts; ++r) {
    const auto& a = runs[static_cast<std::size_t>(r)].result;
    const auto& b = runs[static_cast<std::size_t>(chosen)].result;
    if ((!a.aborted && b.aborted) || (a.aborted == b.aborted && a.best_dev_ppl < b.best_dev_ppl)) chosen = r;
  }
  Run& best = runs[static_cast<std::size_t>(chosen)];
  run_epochs(best, chosen, probe + 1, config.epochs);

  TrainResult result = std::move(best.result);
  result.log = std::move(log);
  result.restart = chosen;
  return result;
}

TrainResult train(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                  const ModelConfig& model_config, const TrainConfig& config, const LogSink& sink) {
  config.validate();
  if (train_set.empty()) throw ArgumentError("train: empty training split");
  if (dev_set.empty()) throw ArgumentError("train: empty dev split");
  TrainingHooks hooks;
  hooks.phase = "lstn";
  hooks.init = [&](std::uint64_t seed) { return LstnModel::create(model_config, config.init_range, seed); };
  hooks.step = [&](LstnModel& model, const std::vector<std::size_t>& idx, int epoch) {
    std::vector<const EncodedDialog*> batch;
    for (std::size_t i : idx) batch.push_back(&train_set[i]);
    return em_step(model, batch, config, anneal_beta(config, epoch)).elbo * static_cast<double>(batch.size());
  };
  hooks.score_dev = [&](const LstnModel& model) { return score_corpus(model, dev_set); };
  hooks.score_train = [&](const LstnModel& model) { return score_corpus(model, train_set).loglik; };
  return run_training(train_set.size(), config, hooks, sink);
}

}  // namespace lstn
