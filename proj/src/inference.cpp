#include "lstn/inference.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "lstn/errors.hpp"

namespace lstn {

using nlohmann::json;

StateMarginal StateMarginal::from_log_probs(Vector log_probs) {
  StateMarginal m;
  m.initial_ = false;
  m.log_probs_ = std::move(log_probs);
  return m;
}

int StateMarginal::argmax() const {
  if (initial_) throw InferenceError("the initial marginal has no current state");
  int best = 0;
  for (long z = 1; z < log_probs_.size(); ++z)
    if (log_probs_(z) > log_probs_(best)) best = static_cast<int>(z);
  return best;
}

json ResponseCache::to_json() const {
  json out = json::array();
  for (const auto& list : states) {
    json entries = json::array();
    for (const auto& r : list)
      entries.push_back({{"tokens", r.tokens}, {"log_prob", r.log_prob}, {"terminated", r.terminated}});
    out.push_back(std::move(entries));
  }
  return {{"beam_size", beam_size}, {"states", std::move(out)}};
}

ResponseCache ResponseCache::from_json(const json& j) {
  ResponseCache c;
  c.beam_size = j.at("beam_size").get<int>();
  for (const auto& list : j.at("states")) {
    std::vector<CachedResponse> entries;
    for (const auto& r : list)
      entries.push_back({r.at("tokens").get<IdSeq>(), r.at("log_prob").get<double>(), r.at("terminated").get<bool>()});
    c.states.push_back(std::move(entries));
  }
  return c;
}

namespace {

struct Hypothesis {
  IdSeq tokens;
  double log_prob = 0.0;
};

double rank_score(const IdSeq& tokens, double log_prob, bool terminated, bool normalize) {
  if (!normalize) return log_prob;
  return log_prob / static_cast<double>(tokens.size() + (terminated ? 1 : 0));
}

}  // namespace

std::vector<CachedResponse> beam_search(const LstnModel& model, int state, const BeamConfig& config) {
  if (config.beam_size < 1) throw ArgumentError("beam_size must be >= 1");
  const std::size_t width = static_cast<std::size_t>(config.beam_size);
  const int max_len = config.max_len > 0 ? config.max_len : model.config.max_response_len;
  const int eos = model.config.eos_id;
  const int bos = model.config.bos_id;

  int start_states[] = {state};
  DecoderState ds = decoder_start(model, start_states);
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<int> prev{bos};
  std::vector<CachedResponse> done;

  auto by_rank = [&](const CachedResponse& a, const CachedResponse& b) {
    double sa = rank_score(a.tokens, a.log_prob, a.terminated, config.length_normalize);
    double sb = rank_score(b.tokens, b.log_prob, b.terminated, config.length_normalize);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  };

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    Matrix logp = decoder_step(model, ds, prev);
    // (score, parent, token)
    std::vector<std::tuple<double, long, int>> cands;
    cands.reserve(static_cast<std::size_t>(logp.size()));
    for (long c = 0; c < logp.cols(); ++c)
      for (long v = 0; v < logp.rows(); ++v) {
        if (v == Vocabulary::kPad || v == bos) continue;
        cands.emplace_back(live[static_cast<std::size_t>(c)].log_prob + logp(v, c), c, static_cast<int>(v));
      }
    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
      return std::get<2>(a) < std::get<2>(b);
    });

    std::vector<Hypothesis> next;
    std::vector<long> parents;
    for (const auto& [score, parent, token] : cands) {
      if (next.size() >= width) break;
      const Hypothesis& h = live[static_cast<std::size_t>(parent)];
      if (token == eos) {
        done.push_back({h.tokens, score, true});
      } else {
        Hypothesis n{h.tokens, score};
        n.tokens.push_back(token);
        next.push_back(std::move(n));
        parents.push_back(parent);
      }
    }
    live = std::move(next);
    if (live.empty()) break;

    Matrix hidden(ds.hidden.rows(), static_cast<long>(parents.size()));
    Matrix cell(ds.cell.rows(), static_cast<long>(parents.size()));
    prev.clear();
    for (std::size_t j = 0; j < parents.size(); ++j) {
      hidden.col(static_cast<long>(j)) = ds.hidden.col(parents[j]);
      cell.col(static_cast<long>(j)) = ds.cell.col(parents[j]);
      prev.push_back(live[j].tokens.back());
    }
    ds.hidden = std::move(hidden);
    ds.cell = std::move(cell);

    // Totals only decrease as tokens are added, so once `width` completed
    // responses beat every live prefix the ranking is final.
    if (!config.length_normalize && done.size() >= width) {
      std::sort(done.begin(), done.end(), by_rank);
      if (done[width - 1].log_prob >= live.front().log_prob) break;
    }
  }

  std::sort(done.begin(), done.end(), by_rank);
  if (done.size() > width) done.resize(width);
  if (done.size() < width) {
    std::vector<CachedResponse> capped;
    for (const auto& h : live) capped.push_back({h.tokens, h.log_prob, false});
    std::sort(capped.begin(), capped.end(), by_rank);
    for (const auto& c : capped) {
      if (done.size() >= width) break;
      done.push_back(c);
    }
  }
  return done;
}

ResponseCache build_response_cache(const LstnModel& model, const BeamConfig& config) {
  ResponseCache cache;
  cache.beam_size = config.beam_size;
  for (int z = 0; z < model.num_states(); ++z) cache.states.push_back(beam_search(model, z, config));
  return cache;
}

StateMarginal track_state(const StateMarginal& prev, const Matrix& table) {
  const long k = table.rows();
  if (table.cols() != k + 1) throw ShapeError("track_state: transition table must be K x (K + 1)");
  if (prev.is_initial()) {
    Vector out = table.col(k);
    return StateMarginal::from_log_probs(out.array() - logsumexp(out));
  }
  if (prev.num_states() != k) throw ShapeError("track_state: marginal size does not match the model");
  Vector out(k);
  for (long z = 0; z < k; ++z) out(z) = logsumexp(prev.log_probs() + table.row(z).leftCols(k).transpose());
  return StateMarginal::from_log_probs(out.array() - logsumexp(out));
}

StateMarginal track_state(const StateMarginal& prev, std::span<const int> x, const LstnModel& model) {
  return track_state(prev, transition_table(model, x));
}

Reply respond(const StateMarginal& marginal, const ResponseCache& cache) {
  int z = marginal.argmax();
  if (z >= cache.num_states() || cache.states[static_cast<std::size_t>(z)].empty())
    throw InferenceError("no cached response for state " + std::to_string(z));
  return {z, cache.states[static_cast<std::size_t>(z)].front().tokens};
}

Reply respond_sampled(const StateMarginal& marginal, const ResponseCache& cache, std::mt19937_64& rng) {
  int z = marginal.argmax();
  if (z >= cache.num_states() || cache.states[static_cast<std::size_t>(z)].empty())
    throw InferenceError("no cached response for state " + std::to_string(z));
  const auto& list = cache.states[static_cast<std::size_t>(z)];
  std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
  return {z, list[pick(rng)].tokens};
}

const TranscriptEntry& session_step(Session& session, const std::string& user_utterance, const SessionContext& ctx) {
  TokenSeq tokens = tokenize(user_utterance);
  if (tokens.empty()) throw ArgumentError("empty user utterance");
  if (ctx.lexicon && !ctx.lexicon->empty()) {
    if (!session.indexer) session.indexer.emplace(*ctx.lexicon);
    tokens = session.indexer->apply(tokens);
  }
  IdSeq ids = ctx.vocab->encode(tokens);
  session.marginal = track_state(session.marginal, ids, *ctx.model);
  Reply reply = respond(session.marginal, *ctx.cache);
  TranscriptEntry entry;
  entry.user = join_tokens(tokens);
  Vector p = session.marginal.probs();
  entry.marginal.assign(p.data(), p.data() + p.size());
  entry.state = reply.state;
  entry.response = join_tokens(ctx.vocab->decode(reply.tokens));
  session.transcript.push_back(std::move(entry));
  return session.transcript.back();
}

std::string transcript_jsonl(const Session& session) {
  std::string out;
  for (std::size_t i = 0; i < session.transcript.size(); ++i) {
    const auto& e = session.transcript[i];
    json record = {{"turn", i + 1}, {"user", e.user}, {"marginal", e.marginal}, {"state", e.state}, {"response", e.response}};
    out += record.dump();
    out += '\n';
  }
  return out;
}

}  // namespace lstn
