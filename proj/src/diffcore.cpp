#include "lstn/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "lstn/errors.hpp"

namespace lstn {

using nlohmann::json;

namespace {

std::string shape_str(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Accumulates g into dst, summing over columns when dst is a broadcast column.
void accumulate_broadcast(Matrix& dst, const Matrix& g) {
  if (dst.cols() == g.cols())
    dst += g;
  else
    dst += g.rowwise().sum();
}

long broadcast_cols(const Matrix& a, const Matrix& b, const char* op) {
  require(a.rows() == b.rows(), std::string(op) + ": row mismatch " + shape_str(a) + " vs " + shape_str(b));
  if (a.cols() == b.cols()) return a.cols();
  if (b.cols() == 1) return a.cols();
  if (a.cols() == 1) return b.cols();
  throw ShapeError(std::string(op) + ": column mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Matrix widen(const Matrix& m, long cols) {
  if (m.cols() == cols) return m;
  return m.replicate(1, cols);
}

std::vector<double> flatten(const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

Matrix unflatten(const json& values, long rows, long cols) {
  auto v = values.get<std::vector<double>>();
  if (static_cast<long>(v.size()) != rows * cols) throw ShapeError("checkpoint array size does not match its shape");
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::add(const std::string& name, long rows, long cols) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second.value.rows() != rows || it->second.value.cols() != cols)
      throw ShapeError("parameter '" + name + "' re-added with a different shape");
    return it->second;
  }
  Parameter p;
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.adam_m = Matrix::Zero(rows, cols);
  p.adam_v = Matrix::Zero(rows, cols);
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::init_uniform(double range, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-range, range);
  for (auto& [name, p] : params_)
    for (long i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.grad.setZero();
}

long ParamStore::num_values() const {
  long n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

json ParamStore::to_json() const {
  json arrays = json::array();
  for (const auto& [name, p] : params_) {
    arrays.push_back({{"name", name},
                      {"rows", p.value.rows()},
                      {"cols", p.value.cols()},
                      {"value", flatten(p.value)},
                      {"adam_m", flatten(p.adam_m)},
                      {"adam_v", flatten(p.adam_v)}});
  }
  return {{"step", step_}, {"params", std::move(arrays)}};
}

ParamStore ParamStore::from_json(const json& j) {
  ParamStore store;
  store.step_ = j.at("step").get<long>();
  for (const auto& a : j.at("params")) {
    long rows = a.at("rows").get<long>();
    long cols = a.at("cols").get<long>();
    Parameter& p = store.add(a.at("name").get<std::string>(), rows, cols);
    p.value = unflatten(a.at("value"), rows, cols);
    p.adam_m = unflatten(a.at("adam_m"), rows, cols);
    p.adam_v = unflatten(a.at("adam_v"), rows, cols);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  require(v.size() == 1, "scalar(): node is " + shape_str(v));
  return v(0, 0);
}

Var Tape::record(Matrix value, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), false, {}});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_acc(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::constant(Matrix value) { return record(std::move(value), nullptr); }

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::param(const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var(this, it->second);
  if (!store_) throw ArgumentError("tape has no parameter store");
  Var v = record(store_->at(name).value, nullptr);
  nodes_[v.id()].param_name = name;
  param_nodes_[name] = v.id();
  return v;
}

void Tape::backward(Var root) {
  require(value(root.id()).size() == 1, "backward(): root must be a scalar");
  grad_acc(root.id()).setConstant(1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (!nodes_[i].has_grad) continue;
    if (nodes_[i].backward) {
      nodes_[i].backward(*this, i);
    } else if (!nodes_[i].param_name.empty() && mutable_store_) {
      mutable_store_->at(nodes_[i].param_name).grad += nodes_[i].grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ad {

Var add(Var a, Var b) {
  Tape& t = a.tape();
  long cols = broadcast_cols(a.value(), b.value(), "add");
  Matrix out = widen(a.value(), cols) + widen(b.value(), cols);
  std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), [ia, ib](Tape& tp, std::size_t self) {
    Matrix g = tp.grad(self);
    accumulate_broadcast(tp.grad_acc(ia), g);
    accumulate_broadcast(tp.grad_acc(ib), g);
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var hadamard(Var a, Var b) {
  Tape& t = a.tape();
  long cols = broadcast_cols(a.value(), b.value(), "hadamard");
  Matrix out = widen(a.value(), cols).cwiseProduct(widen(b.value(), cols));
  std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), [ia, ib, cols](Tape& tp, std::size_t self) {
    Matrix g = tp.grad(self);
    Matrix av = widen(tp.value(ia), cols), bv = widen(tp.value(ib), cols);
    accumulate_broadcast(tp.grad_acc(ia), g.cwiseProduct(bv));
    accumulate_broadcast(tp.grad_acc(ib), g.cwiseProduct(av));
  });
}

Var scale(Var a, double factor) {
  std::size_t ia = a.id();
  return a.tape().record(a.value() * factor, [ia, factor](Tape& tp, std::size_t self) {
    tp.grad_acc(ia) += tp.grad(self) * factor;
  });
}

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() * b.value(), [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix da = g * tp.value(ib).transpose();
    Matrix db = tp.value(ia).transpose() * g;
    tp.grad_acc(ia) += da;
    tp.grad_acc(ib) += db;
  });
}

Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  std::size_t ia = a.id();
  return a.tape().record(std::move(out), [ia](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value(self);
    Matrix d = tp.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
    tp.grad_acc(ia) += d;
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  std::size_t ia = a.id();
  return a.tape().record(std::move(out), [ia](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value(self);
    Matrix d = tp.grad(self).cwiseProduct((1.0 - y.array().square()).matrix());
    tp.grad_acc(ia) += d;
  });
}

Var concat_rows(Var top, Var bottom) {
  require(top.cols() == bottom.cols(), "concat_rows: " + shape_str(top.value()) + " over " + shape_str(bottom.value()));
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top.value(), bottom.value();
  std::size_t it = top.id(), ib = bottom.id();
  long split = top.rows();
  return top.tape().record(std::move(out), [it, ib, split](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix gt = g.topRows(split), gb = g.bottomRows(g.rows() - split);
    tp.grad_acc(it) += gt;
    tp.grad_acc(ib) += gb;
  });
}

Var repeat_cols(Var a, long n) {
  require(a.cols() == 1, "repeat_cols: operand must be a column");
  std::size_t ia = a.id();
  return a.tape().record(a.value().replicate(1, n), [ia](Tape& tp, std::size_t self) {
    Matrix s = tp.grad(self).rowwise().sum();
    tp.grad_acc(ia) += s;
  });
}

Var log_softmax(Var logits) {
  const Matrix& x = logits.value();
  if (x.rows() == 0) throw ArgumentError("log_softmax: empty input");
  Matrix out(x.rows(), x.cols());
  for (long c = 0; c < x.cols(); ++c) out.col(c) = x.col(c).array() - lstn::logsumexp(x.col(c));
  std::size_t ia = logits.id();
  return logits.tape().record(std::move(out), [ia](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix p = tp.value(self).array().exp().matrix();
    Matrix d = g - p * g.colwise().sum().asDiagonal();
    tp.grad_acc(ia) += d;
  });
}

Var logsumexp(Var a) {
  const Matrix& x = a.value();
  if (x.rows() == 0) throw ArgumentError("logsumexp: empty input");
  Matrix out(1, x.cols());
  for (long c = 0; c < x.cols(); ++c) out(0, c) = lstn::logsumexp(x.col(c));
  std::size_t ia = a.id();
  return a.tape().record(std::move(out), [ia](Tape& tp, std::size_t self) {
    const Matrix& x = tp.value(ia);
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix d(x.rows(), x.cols());
    for (long c = 0; c < x.cols(); ++c) d.col(c) = (x.col(c).array() - y(0, c)).exp() * g(0, c);
    tp.grad_acc(ia) += d;
  });
}

Var sum(Var a) {
  std::size_t ia = a.id();
  return a.tape().record(Matrix::Constant(1, 1, a.value().sum()), [ia](Tape& tp, std::size_t self) {
    tp.grad_acc(ia).array() += tp.grad(self)(0, 0);
  });
}

Var select_row(Var a, long r) {
  if (r < 0 || r >= a.rows())
    throw RangeError("select_row: row " + std::to_string(r) + " outside " + shape_str(a.value()));
  std::size_t ia = a.id();
  return a.tape().record(a.value().row(r).transpose(), [ia, r](Tape& tp, std::size_t self) {
    tp.grad_acc(ia).row(r) += tp.grad(self).transpose();
  });
}

Var gather_rows(Var table, std::span<const int> indices) {
  const Matrix& tv = table.value();
  std::vector<int> idx(indices.begin(), indices.end());
  Matrix out(tv.cols(), static_cast<long>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= tv.rows())
      throw RangeError("gather_rows: index " + std::to_string(idx[j]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    out.col(static_cast<long>(j)) = tv.row(idx[j]).transpose();
  }
  std::size_t it = table.id();
  return table.tape().record(std::move(out), [it, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& acc = tp.grad_acc(it);
    for (std::size_t j = 0; j < idx.size(); ++j) acc.row(idx[j]) += g.col(static_cast<long>(j)).transpose();
  });
}

Var weighted_col_sum(Var a, const Matrix& weights) {
  require(weights.rows() == a.rows() && weights.cols() == a.cols(),
          "weighted_col_sum: weights " + shape_str(weights) + " vs " + shape_str(a.value()));
  Matrix out = a.value().cwiseProduct(weights).colwise().sum().transpose();
  std::size_t ia = a.id();
  return a.tape().record(std::move(out), [ia, weights](Tape& tp, std::size_t self) {
    Matrix d = weights * tp.grad(self).asDiagonal();
    tp.grad_acc(ia) += d;
  });
}

Var entry(Var a, long r, long c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols())
    throw RangeError("entry: (" + std::to_string(r) + ", " + std::to_string(c) + ") outside " + shape_str(a.value()));
  std::size_t ia = a.id();
  return a.tape().record(Matrix::Constant(1, 1, a.value()(r, c)), [ia, r, c](Tape& tp, std::size_t self) {
    tp.grad_acc(ia)(r, c) += tp.grad(self)(0, 0);
  });
}

Var slice_rows(Var a, long start, long count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: range outside " + shape_str(a.value()));
  std::size_t ia = a.id();
  return a.tape().record(a.value().middleRows(start, count), [ia, start, count](Tape& tp, std::size_t self) {
    tp.grad_acc(ia).middleRows(start, count) += tp.grad(self);
  });
}

Var slice_cols(Var a, long start, long count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: range outside " + shape_str(a.value()));
  std::size_t ia = a.id();
  return a.tape().record(a.value().middleCols(start, count), [ia, start, count](Tape& tp, std::size_t self) {
    tp.grad_acc(ia).middleCols(start, count) += tp.grad(self);
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------

Var affine(Var x, const std::string& weight_name, const std::string& bias_name) {
  Tape& t = x.tape();
  Var w = t.param(weight_name);
  Var b = t.param(bias_name);
  require(w.cols() == x.rows(), "affine: weight " + shape_str(w.value()) + " vs input " + shape_str(x.value()));
  require(b.rows() == w.rows() && b.cols() == 1, "affine: bias " + shape_str(b.value()) + " vs weight " + shape_str(w.value()));
  return ad::add(ad::matmul(w, x), b);
}

Var embedding_lookup(Tape& tape, const std::string& table_name, int index) {
  int idx[] = {index};
  return ad::gather_rows(tape.param(table_name), idx);
}

void add_lstm_params(ParamStore& store, const std::string& name, long input_dim, long hidden_dim) {
  store.add(name + ".Wx", 4 * hidden_dim, input_dim);
  store.add(name + ".Wh", 4 * hidden_dim, hidden_dim);
  store.add(name + ".b", 4 * hidden_dim, 1);
}

LstmState recurrent_step(const LstmState& prev, Var input, const std::string& cell_name) {
  Tape& t = input.tape();
  Var wx = t.param(cell_name + ".Wx");
  Var wh = t.param(cell_name + ".Wh");
  Var b = t.param(cell_name + ".b");
  long hidden = prev.hidden.rows();
  require(wh.cols() == hidden && wh.rows() == 4 * hidden,
          "recurrent_step: cell '" + cell_name + "' expects hidden size " + std::to_string(wh.cols()) + ", got " +
              std::to_string(hidden));
  require(wx.cols() == input.rows(), "recurrent_step: cell '" + cell_name + "' expects input size " +
                                         std::to_string(wx.cols()) + ", got " + std::to_string(input.rows()));
  require(prev.cell.rows() == hidden, "recurrent_step: cell state size mismatch");
  Var gates = ad::add(ad::add(ad::matmul(wx, input), ad::matmul(wh, prev.hidden)), b);
  Var in_gate = ad::sigmoid(ad::slice_rows(gates, 0, hidden));
  Var forget_gate = ad::sigmoid(ad::slice_rows(gates, hidden, hidden));
  Var out_gate = ad::sigmoid(ad::slice_rows(gates, 2 * hidden, hidden));
  Var candidate = ad::tanh(ad::slice_rows(gates, 3 * hidden, hidden));
  Var cell = ad::add(ad::hadamard(forget_gate, prev.cell), ad::hadamard(in_gate, candidate));
  Var h = ad::hadamard(out_gate, ad::tanh(cell));
  return {h, cell};
}

void adam_update(ParamStore& store, const AdamConfig& config,
                 const std::function<bool(const std::string&)>& filter) {
  for (auto& [name, p] : store.params()) {
    if (filter && !filter(name)) continue;
    if (!p.grad.allFinite()) throw NumericalError("non-finite gradient in parameter '" + name + "'");
  }
  long step = store.step() + 1;
  store.set_step(step);
  double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (auto& [name, p] : store.params()) {
    if (!filter || filter(name)) {
      p.adam_m = config.beta1 * p.adam_m + (1.0 - config.beta1) * p.grad;
      p.adam_v = config.beta2 * p.adam_v + (1.0 - config.beta2) * p.grad.cwiseAbs2();
      p.value.array() -= config.learning_rate * (p.adam_m.array() / c1) /
                         ((p.adam_v.array() / c2).sqrt() + config.eps);
    }
    p.grad.setZero();
  }
}

GradCheckResult grad_check(const std::function<Var(Tape&)>& fn, ParamStore& store, double eps,
                           long max_coords_per_param, std::uint64_t seed) {
  store.zero_grad();
  {
    Tape tape(store);
    Var out = fn(tape);
    tape.backward(out);
  }
  std::map<std::string, Matrix> analytic;
  for (auto& [name, p] : store.params()) analytic[name] = p.grad;
  store.zero_grad();

  auto evaluate = [&] {
    Tape tape(static_cast<const ParamStore&>(store));
    return fn(tape).scalar();
  };

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : store.params()) {
    std::vector<long> coords(static_cast<std::size_t>(p.value.size()));
    std::iota(coords.begin(), coords.end(), 0L);
    if (max_coords_per_param > 0 && static_cast<long>(coords.size()) > max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(max_coords_per_param));
    }
    double worst = 0.0;
    for (long k : coords) {
      double& x = p.value.data()[k];
      const double saved = x;
      x = saved + eps;
      double up = evaluate();
      x = saved - eps;
      double down = evaluate();
      x = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[name].data()[k];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, err);
      ++result.coordinates_checked;
    }
    result.per_param[name] = worst;
    if (worst >= result.max_rel_error) {
      result.max_rel_error = worst;
      result.worst_param = name;
    }
  }
  return result;
}

double logsumexp(const Eigen::Ref<const Vector>& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace lstn
