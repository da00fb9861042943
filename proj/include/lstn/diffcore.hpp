#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every node created during a forward pass; Tape::backward
// walks the nodes in reverse creation order. Parameters live in a ParamStore
// and enter a tape through Tape::param(), which hands back a node whose
// gradient is flushed into the store on backward.
//
// Column convention: vectors are single columns, and batched quantities are
// laid out one item per column. Binary elementwise ops broadcast an
// operand with a single column across the other operand's columns.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace lstn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
};

class ParamStore {
 public:
  /// Adds a zero-initialized parameter. Re-adding an existing name with the
  /// same shape returns it unchanged.
  Parameter& add(const std::string& name, long rows, long cols);

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  /// Uniform in [-range, range], visiting parameters in name order.
  void init_uniform(double range, std::uint64_t seed);

  void zero_grad();
  long step() const { return step_; }
  void set_step(long step) { step_ = step; }
  std::size_t size() const { return params_.size(); }
  long num_values() const;

  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }

  /// Named arrays with values, Adam moments and step counter. Doubles are
  /// written in shortest round-trip form, so reload is bit-exact.
  nlohmann::json to_json() const;
  static ParamStore from_json(const nlohmann::json& j);

 private:
  std::map<std::string, Parameter> params_;
  long step_ = 0;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
  double scalar() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Evaluation-only tape: parameters are readable, backward does not touch
  /// the store.
  explicit Tape(const ParamStore& store) : store_(&store) {}
  /// Training tape: backward accumulates parameter gradients into the store.
  explicit Tape(ParamStore& store) : store_(&store), mutable_store_(&store) {}
  Tape() = default;

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double value);
  /// One node per name per tape.
  Var param(const std::string& name);

  /// Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  const ParamStore& store() const { return *store_; }

  // Used by the op implementations.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;
  Var record(Matrix value, BackwardFn backward);
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Accumulator for node id, allocated on first use.
  Matrix& grad_acc(std::size_t id);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool has_grad = false;
    std::string param_name;
  };
  const ParamStore* store_ = nullptr;
  ParamStore* mutable_store_ = nullptr;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var sigmoid(Var a);
Var tanh(Var a);
/// Stacks vertically; operands must share a column count.
Var concat_rows(Var top, Var bottom);
/// n copies of a single-column operand side by side.
Var repeat_cols(Var a, long n);
/// Column-wise log-softmax with max subtraction.
Var log_softmax(Var logits);
/// Column-wise log-sum-exp, result is 1 x cols.
Var logsumexp(Var a);
/// Sum of all entries, 1x1.
Var sum(Var a);
/// Row r of a, returned as a column.
Var select_row(Var a, long r);
/// Columns hold rows `indices` of a table (rows = entries).
Var gather_rows(Var table, std::span<const int> indices);
/// out(p) = sum_z weights(z, p) * a(z, p), returned as a cols x 1 column.
/// weights are constants.
Var weighted_col_sum(Var a, const Matrix& weights);
/// Entry (r, c) as a 1x1 node.
Var entry(Var a, long r, long c);
/// Rows [start, start + count).
Var slice_rows(Var a, long start, long count);
/// Columns [start, start + count).
Var slice_cols(Var a, long start, long count);

}  // namespace ad

/// W x + b using the named parameters; b broadcasts over columns of x.
Var affine(Var x, const std::string& weight_name, const std::string& bias_name);

/// Row `index` of the named table as a column node.
Var embedding_lookup(Tape& tape, const std::string& table_name, int index);

struct LstmState {
  Var hidden;
  Var cell;
};

/// Parameter names for an LSTM cell `name`: name.Wx (4H x E), name.Wh
/// (4H x H), name.b (4H x 1). Gate blocks are ordered input, forget, output,
/// candidate. Batched over columns of the state.
void add_lstm_params(ParamStore& store, const std::string& name, long input_dim, long hidden_dim);
LstmState recurrent_step(const LstmState& prev, Var input, const std::string& cell_name);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every parameter accepted by `filter` (all when
/// empty). Advances the step counter and zeroes all gradients. Throws
/// NumericalError naming the first parameter with a non-finite gradient,
/// before any value changes.
void adam_update(ParamStore& store, const AdamConfig& config,
                 const std::function<bool(const std::string&)>& filter = {});

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::map<std::string, double> per_param;
  long coordinates_checked = 0;
};

/// Compares backpropagated gradients of a scalar function of the store
/// against central differences. At most `max_coords_per_param` coordinates
/// are sampled from each parameter (0 = all). Relative error is
/// |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const std::function<Var(Tape&)>& fn, ParamStore& store, double eps = 1e-5,
                           long max_coords_per_param = 0, std::uint64_t seed = 0);

double logsumexp(const Eigen::Ref<const Vector>& v);

}  // namespace lstn
