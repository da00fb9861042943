#include "lstn/baseline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "lstn/errors.hpp"

namespace lstn {

namespace pn = param_names;
namespace sn = split_names;

namespace {

bool is_phase1_param(const std::string& name) {
  return !(name.starts_with(pn::kEncoder + ".") || name.starts_with("trans.") || name == pn::kTransitionStates);
}

bool is_phase2_param(const std::string& name) { return !is_phase1_param(name); }

void check_labels(const std::vector<EncodedDialog>& dialogs, const std::vector<std::vector<int>>& labels, int k) {
  if (labels.size() != dialogs.size()) throw ArgumentError("labels cover " + std::to_string(labels.size()) +
                                                           " dialogs, corpus has " + std::to_string(dialogs.size()));
  for (std::size_t d = 0; d < dialogs.size(); ++d) {
    if (labels[d].size() != dialogs[d].turns.size())
      throw ArgumentError("labels for dialog '" + dialogs[d].id + "' do not cover every turn");
    for (int z : labels[d])
      if (z < 0 || z >= k) throw RangeError("label " + std::to_string(z) + " outside [0, " + std::to_string(k) + ")");
  }
}

}  // namespace

IdSeq context_sequence(const EncodedDialog& dialog, int turn, bool include_agent) {
  if (turn < 0 || static_cast<std::size_t>(turn) >= dialog.turns.size())
    throw RangeError("turn " + std::to_string(turn) + " outside dialog '" + dialog.id + "'");
  IdSeq out;
  for (int i = 0; i <= turn; ++i) {
    const auto& t = dialog.turns[static_cast<std::size_t>(i)];
    out.insert(out.end(), t.user.begin(), t.user.end());
    if (include_agent && i < turn) out.insert(out.end(), t.agent.begin(), t.agent.end() - 1);
  }
  return out;
}

LstnModel create_split_model(const ModelConfig& config, double init_range, std::uint64_t seed) {
  config.validate();
  LstnModel m;
  m.config = config;
  add_lstn_params(m.store, config);
  add_lstm_params(m.store, sn::kContextEncoder, config.embed_dim, config.hidden_dim);
  m.store.add(sn::kContextW, config.num_states, config.hidden_dim);
  m.store.add(sn::kContextB, config.num_states, 1);
  m.store.init_uniform(init_range, seed);
  return m;
}

std::vector<Var> context_logprobs_nodes(Tape& tape, const LstnModel& model, const EncodedDialog& dialog,
                                        bool include_agent) {
  if (dialog.turns.empty()) throw ArgumentError("dialog '" + dialog.id + "' has no turns");
  const long hidden = model.config.hidden_dim;
  LstmState state{tape.constant(Matrix::Zero(hidden, 1)), tape.constant(Matrix::Zero(hidden, 1))};
  Var table = tape.param(pn::kWordEmbedding);
  auto feed = [&](std::span<const int> tokens) {
    for (int token : tokens) {
      int idx[] = {token};
      state = recurrent_step(state, ad::gather_rows(table, idx), sn::kContextEncoder);
    }
  };
  std::vector<Var> out;
  for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
    const auto& t = dialog.turns[i];
    if (t.user.empty()) throw ArgumentError("dialog '" + dialog.id + "' has an empty user utterance");
    if (include_agent && i > 0) {
      const auto& a = dialog.turns[i - 1].agent;
      feed(std::span<const int>(a.data(), a.size() - 1));
    }
    feed(t.user);
    out.push_back(ad::log_softmax(affine(state.hidden, sn::kContextW, sn::kContextB)));
  }
  return out;
}

std::vector<Vector> context_logprobs(const LstnModel& model, const EncodedDialog& dialog, bool include_agent) {
  Tape tape(model.store);
  std::vector<Vector> out;
  for (const Var& v : context_logprobs_nodes(tape, model, dialog, include_agent)) out.push_back(v.value().col(0));
  return out;
}

Vector phase1_posterior(const Vector& log_prior, const Vector& log_emit) {
  if (log_prior.size() != log_emit.size()) throw ShapeError("phase1_posterior: prior and emission sizes differ");
  Vector joint = log_prior + log_emit;
  double norm = logsumexp(joint);
  if (!std::isfinite(norm)) throw NumericalError("non-finite phase-1 normalizer");
  return joint.array() - norm;
}

DevScore score_phase1(const LstnModel& model, const std::vector<EncodedDialog>& dialogs, bool include_agent) {
  DevScore s;
  std::map<IdSeq, Vector> emissions;
  for (const auto& d : dialogs) {
    auto priors = context_logprobs(model, d, include_agent);
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
      const IdSeq& y = d.turns[i].agent;
      auto it = emissions.find(y);
      if (it == emissions.end()) it = emissions.emplace(y, emission_logprobs(model, y)).first;
      s.loglik += logsumexp(priors[i] + it->second);
      s.tokens += static_cast<long>(y.size());
    }
  }
  s.perplexity = s.tokens > 0 ? std::exp(-s.loglik / static_cast<double>(s.tokens)) : 1.0;
  return s;
}

BatchStats phase1_step(LstnModel& model, const std::vector<const EncodedDialog*>& batch, const TrainConfig& config,
                       const SplitOptions& options) {
  if (batch.empty()) throw ArgumentError("phase1_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  BatchStats stats;
  std::vector<std::vector<Matrix>> weights(batch.size());

  for (int m = 0; m < config.m_steps_per_e_step; ++m) {
    Tape tape(model.store);
    FactorNodeCache cache(tape, model);
    Var total;
    for (std::size_t d = 0; d < batch.size(); ++d) {
      const EncodedDialog& dialog = *batch[d];
      auto priors = context_logprobs_nodes(tape, model, dialog, options.include_agent_context);
      for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
        Var emit = cache.emission(dialog.turns[i].agent);
        Var joint = ad::add(priors[i], emit);
        if (m == 0) {
          Vector lq = phase1_posterior(priors[i].value().col(0), emit.value().col(0));
          Vector q = lq.array().exp();
          double h = 0.0;
          for (long z = 0; z < q.size(); ++z)
            if (q(z) > 0.0) h -= q(z) * lq(z);
          stats.elbo += (q.dot(joint.value().col(0)) + h) * inv;
          weights[d].push_back(q);
        }
        Var term = ad::weighted_col_sum(joint, weights[d][i]);
        total = total.valid() ? ad::add(total, term) : term;
      }
    }
    Var loss = ad::scale(total, -inv);
    if (!std::isfinite(loss.scalar())) throw NumericalError("non-finite phase-1 objective");
    if (m == 0) stats.objective = -loss.scalar();
    tape.backward(loss);
    adam_update(model.store, AdamConfig{config.learning_rate}, is_phase1_param);
  }
  return stats;
}

TrainResult train_phase1(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                         const ModelConfig& model_config, const TrainConfig& config, const SplitOptions& options,
                         const LogSink& sink) {
  config.validate();
  if (train_set.empty()) throw ArgumentError("train: empty training split");
  if (dev_set.empty()) throw ArgumentError("train: empty dev split");
  const bool agent = options.include_agent_context;
  TrainingHooks hooks;
  hooks.phase = "split1";
  hooks.init = [&](std::uint64_t seed) { return create_split_model(model_config, config.init_range, seed); };
  hooks.step = [&](LstnModel& model, const std::vector<std::size_t>& idx, int) {
    std::vector<const EncodedDialog*> batch;
    for (std::size_t i : idx) batch.push_back(&train_set[i]);
    return phase1_step(model, batch, config, options).elbo * static_cast<double>(batch.size());
  };
  hooks.score_dev = [&](const LstnModel& model) { return score_phase1(model, dev_set, agent); };
  hooks.score_train = [&](const LstnModel& model) { return score_phase1(model, train_set, agent).loglik; };
  return run_training(train_set.size(), config, hooks, sink);
}

std::vector<std::vector<int>> hard_assign(const LstnModel& model, const std::vector<EncodedDialog>& dialogs) {
  std::map<IdSeq, int> memo;
  std::vector<std::vector<int>> labels;
  for (const auto& d : dialogs) {
    std::vector<int> row;
    for (const auto& t : d.turns) {
      auto it = memo.find(t.agent);
      if (it == memo.end()) {
        Vector e = emission_logprobs(model, t.agent);
        int best = 0;
        for (long z = 1; z < e.size(); ++z)
          if (e(z) > e(best)) best = static_cast<int>(z);
        it = memo.emplace(t.agent, best).first;
      }
      row.push_back(it->second);
    }
    labels.push_back(std::move(row));
  }
  return labels;
}

namespace {

Var label_loglik(Tape& tape, const LstnModel& model, const EncodedDialog& dialog, const std::vector<int>& labels,
                 std::map<IdSeq, Var>& encodings) {
  Var total;
  int prev = kStartState;
  for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
    const IdSeq& x = dialog.turns[i].user;
    auto it = encodings.find(x);
    if (it == encodings.end()) it = encodings.emplace(x, encode_utterance_node(tape, x)).first;
    int preds[] = {prev};
    Var lp = ad::entry(transition_logprobs_node(tape, model.config, it->second, preds), labels[i], 0);
    total = total.valid() ? ad::add(total, lp) : lp;
    prev = labels[i];
  }
  return total;
}

long count_turns(const std::vector<EncodedDialog>& dialogs) {
  long n = 0;
  for (const auto& d : dialogs) n += static_cast<long>(d.turns.size());
  return n;
}

}  // namespace

DevScore score_phase2(const LstnModel& model, const std::vector<EncodedDialog>& dialogs,
                      const std::vector<std::vector<int>>& labels) {
  check_labels(dialogs, labels, model.num_states());
  Tape tape(model.store);
  std::map<IdSeq, Var> encodings;
  DevScore s;
  for (std::size_t d = 0; d < dialogs.size(); ++d) {
    s.loglik += label_loglik(tape, model, dialogs[d], labels[d], encodings).scalar();
    s.tokens += static_cast<long>(dialogs[d].turns.size());
  }
  s.perplexity = s.tokens > 0 ? std::exp(-s.loglik / static_cast<double>(s.tokens)) : 1.0;
  return s;
}

TrainResult train_phase2(const std::vector<EncodedDialog>& train_set, const std::vector<std::vector<int>>& train_labels,
                         const std::vector<EncodedDialog>& dev_set, const std::vector<std::vector<int>>& dev_labels,
                         const LstnModel& phase1, const TrainConfig& config, const LogSink& sink) {
  config.validate();
  if (train_set.empty()) throw ArgumentError("train: empty training split");
  if (dev_set.empty()) throw ArgumentError("train: empty dev split");
  check_labels(train_set, train_labels, phase1.num_states());
  check_labels(dev_set, dev_labels, phase1.num_states());
  const double train_turns = static_cast<double>(count_turns(train_set));
  const double dialogs = static_cast<double>(train_set.size());
  TrainingHooks hooks;
  hooks.phase = "split2";
  hooks.single_start = true;
  hooks.stream = 2;
  hooks.init = [&](std::uint64_t) { return phase1; };
  hooks.step = [&](LstnModel& model, const std::vector<std::size_t>& idx, int) {
    Tape tape(model.store);
    std::map<IdSeq, Var> encodings;
    Var total;
    long turns = 0;
    for (std::size_t i : idx) {
      Var ll = label_loglik(tape, model, train_set[i], train_labels[i], encodings);
      total = total.valid() ? ad::add(total, ll) : ll;
      turns += static_cast<long>(train_set[i].turns.size());
    }
    Var loss = ad::scale(total, -1.0 / static_cast<double>(turns));
    if (!std::isfinite(loss.scalar())) throw NumericalError("non-finite phase-2 objective");
    double ll = total.scalar();
    tape.backward(loss);
    adam_update(model.store, AdamConfig{config.learning_rate}, is_phase2_param);
    // run_training divides by the dialog count; report per turn instead.
    return ll * dialogs / train_turns;
  };
  hooks.score_dev = [&](const LstnModel& model) { return score_phase2(model, dev_set, dev_labels); };
  hooks.score_train = [&](const LstnModel& model) {
    return score_phase2(model, train_set, train_labels).loglik * dialogs / train_turns;
  };
  return run_training(train_set.size(), config, hooks, sink);
}

SplitResult train_split(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                        const ModelConfig& model_config, const TrainConfig& config, const SplitOptions& options,
                        const LogSink& sink) {
  SplitResult out;
  out.phase1 = train_phase1(train_set, dev_set, model_config, config, options, sink);
  out.train_labels = hard_assign(out.phase1.model, train_set);
  auto dev_labels = hard_assign(out.phase1.model, dev_set);
  out.phase2 = train_phase2(train_set, out.train_labels, dev_set, dev_labels, out.phase1.model, config, sink);
  return out;
}

}  // namespace lstn
