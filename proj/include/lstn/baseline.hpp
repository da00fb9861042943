#pragma once

// Split-LSTN: a two-phase pipeline trained without the chain coupling.
// Phase 1 fits p(z_i | x_{1:i}) p(y_i | z_i) with a per-turn latent state and
// a context encoder over the conversation so far; each training turn is then
// labelled with its emission-argmax state; phase 2 fits the LSTN transition
// classifier to those labels with the emissions frozen. The result is an
// ordinary LstnModel and goes through the same inference path.

#include <string>
#include <vector>

#include "lstn/em.hpp"

namespace lstn {

namespace split_names {
inline const std::string kContextEncoder = "ctx_enc";
inline const std::string kContextW = "ctx.W";
inline const std::string kContextB = "ctx.b";
}  // namespace split_names

struct SplitOptions {
  /// Interleave agent responses into the phase-1 context (user turns only
  /// by default).
  bool include_agent_context = false;
};

/// Token sequence encoded as the context of turn `turn` (0-based): the user
/// utterances 0..turn, optionally with the agent responses 0..turn-1 (EOS
/// dropped) between them.
IdSeq context_sequence(const EncodedDialog& dialog, int turn, bool include_agent);

/// Phase-1 model: the LSTN parameters plus the context encoder and classifier.
LstnModel create_split_model(const ModelConfig& config, double init_range, std::uint64_t seed);

/// log p(z_i | x_{1:i}) per turn, each K x 1. One encoder pass over the whole
/// dialog; turn i reads the hidden state at the end of its user utterance.
std::vector<Var> context_logprobs_nodes(Tape& tape, const LstnModel& model, const EncodedDialog& dialog,
                                        bool include_agent);
std::vector<Vector> context_logprobs(const LstnModel& model, const EncodedDialog& dialog, bool include_agent);

/// Per-turn posterior q(z) ∝ p(z | context) p(y | z), in log space.
Vector phase1_posterior(const Vector& log_prior, const Vector& log_emit);

/// Marginal log-likelihood of the responses, turns treated independently.
DevScore score_phase1(const LstnModel& model, const std::vector<EncodedDialog>& dialogs, bool include_agent);

BatchStats phase1_step(LstnModel& model, const std::vector<const EncodedDialog*>& batch, const TrainConfig& config,
                       const SplitOptions& options);

/// Log records carry phase "split1".
TrainResult train_phase1(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                         const ModelConfig& model_config, const TrainConfig& config, const SplitOptions& options = {},
                         const LogSink& sink = {});

/// argmax_z p(y_i | z) for every turn, ties toward the lowest id.
std::vector<std::vector<int>> hard_assign(const LstnModel& model, const std::vector<EncodedDialog>& dialogs);

/// Mean label log-likelihood under the transition classifier, teacher-forced
/// on the previous label.
DevScore score_phase2(const LstnModel& model, const std::vector<EncodedDialog>& dialogs,
                      const std::vector<std::vector<int>>& labels);

/// Supervised cross-entropy on p(label_i | label_{i-1}, x_i). Only the
/// encoder, the transition classifier and the transition state embeddings
/// move. Log records carry phase "split2"; `elbo` holds the mean train label
/// log-likelihood per turn and dev_ppl is exp of the negated dev mean.
TrainResult train_phase2(const std::vector<EncodedDialog>& train_set, const std::vector<std::vector<int>>& train_labels,
                         const std::vector<EncodedDialog>& dev_set, const std::vector<std::vector<int>>& dev_labels,
                         const LstnModel& phase1, const TrainConfig& config, const LogSink& sink = {});

/// Whole pipeline: phase 1, labels from hard_assign on train and dev, phase 2.
struct SplitResult {
  TrainResult phase1;
  TrainResult phase2;  // phase2.model is the servable model
  std::vector<std::vector<int>> train_labels;
};
SplitResult train_split(const std::vector<EncodedDialog>& train_set, const std::vector<EncodedDialog>& dev_set,
                        const ModelConfig& model_config, const TrainConfig& config, const SplitOptions& options = {},
                        const LogSink& sink = {});

}  // namespace lstn
