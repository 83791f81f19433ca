#pragma once
// Reverse-mode differentiation over dense Arrays.
//
// A Tape records every operation applied to its Vars together with a closure
// that propagates the output gradient to the inputs. backward() replays the
// closures in reverse recording order, which is a reverse topological order
// because a Var can only consume Vars recorded before it. A Tape and its Vars
// are owned by one thread at a time.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tss/array.hpp"

namespace tss {

// Trainable array plus its gradient accumulator. Tapes reference a Parameter
// by address, so models and the optimizer always see the same storage. The
// accumulator is not part of the parameter's value and is mutable so that
// forwards can take parameters by const reference.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Array init)
      : name(std::move(name)), value(std::move(init)), grad(value.shape()) {}

  std::string name;
  Array value;
  mutable Array grad;

  void zero_grad() const { grad = Array(value.shape()); }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::size_t id) : id_(id) {}
  std::size_t id() const { return id_; }
  bool valid() const { return id_ != kInvalid; }

 private:
  static constexpr std::size_t kInvalid = static_cast<std::size_t>(-1);
  std::size_t id_ = kInvalid;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape& tape, const Array& grad_out)>;

  // A non-recording tape evaluates the same ops but keeps no closures; used for
  // inference and for sampling sources that must stay out of the gradient.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Array value);
  Var param(const Parameter& p);
  Var record(Array value, std::span<const Var> inputs, BackwardFn fn);
  Var record(Array value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  const Array& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient accumulator of v, allocated as zeros on first access.
  Array& grad(Var v);
  bool has_grad(Var v) const { return nodes_.at(v.id()).grad_ready; }

  // Propagates d(loss)/d(.) with d(loss)/d(loss) = seed, then adds every
  // parameter leaf's gradient into its Parameter::grad. A tape can be
  // replayed only once.
  void backward(Var loss, double seed = 1.0);

 private:
  struct Node {
    Array value;
    const Array* external = nullptr;
    Array grad;
    bool grad_ready = false;
    bool requires_grad = false;
    BackwardFn fn;
    const Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  bool record_;
  bool done_ = false;
};

// ---- differentiable operations ------------------------------------------

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
// a[m x n] + bias[n] broadcast over rows.
Var add_bias(Tape& t, Var a, Var bias);
Var tanh(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var log(Tape& t, Var a);
Var exp(Tape& t, Var a);
Var reshape(Tape& t, Var a, Shape shape);

// Row-wise concatenation of matrices sharing a column count.
Var concat_rows(Tape& t, std::span<const Var> parts);
Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t end);
// Rows of table[V x D] selected by ids.
Var embedding(Tape& t, Var table, std::span<const int> ids);

Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
// logsumexp over the last dimension; result has one value per row.
Var logsumexp_rows(Tape& t, Var a);
// log(softmax(a / temperature)) over the last dimension.
Var log_softmax(Tape& t, Var a, double temperature = 1.0);
Var softmax_with_temperature(Tape& t, Var a, double temperature);
// out[i] = a.row(i)[index[i]]
Var pick(Tape& t, Var a, std::span<const int> index);

// Gated recurrent cell over m independent rows.
//   input_proj: [m x 3H] = x W_in + b_in, gate order (reset, update, new)
//   h: [m x H], w_hidden: [H x 3H], b_hidden: [3H]
Var gru_cell(Tape& t, Var input_proj, Var h, Var w_hidden, Var b_hidden);

// ---- plain evaluation ----------------------------------------------------

Array softmax_with_temperature(const Array& logits, double temperature);
Array log_softmax(const Array& logits, double temperature = 1.0);
double logsumexp(std::span<const double> x);
// log(exp(a) + exp(b)) without overflow; -inf aware.
double log_add(double a, double b);

}  // namespace tss
