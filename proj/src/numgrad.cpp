#include "tss/numgrad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tss/errors.hpp"
#include "tss/kernels.hpp"

namespace tss {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void RequireSameShape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void RequireMatrix(const Array& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(a.shape()));
  }
}

void CheckTemperature(double z) {
  if (!(z > 0.0) || !std::isfinite(z)) {
    throw ParameterError("softmax temperature must be positive, got " +
                         std::to_string(z));
  }
}

void AccumulateInto(Array& dst, const Array& src) {
  kernels::active().add(dst.ptr(), src.ptr(), dst.ptr(), dst.size());
}

// Elementwise unary op whose derivative is a function of input and output.
template <typename Fwd, typename Deriv>
Var Unary(Tape& t, Var a, Fwd fwd, Deriv deriv) {
  const Array& av = t.value(a);
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return t.record(std::move(out), {a}, [a, deriv](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    const Array& x = tp.value(a);
    Array& ga = tp.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}

}  // namespace

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Array value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1);
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.external = &p.value;
  n.requires_grad = record_;
  n.param = record_ ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1);
}

Var Tape::record(Array value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var in : inputs) {
      if (nodes_.at(in.id()).requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.fn = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1);
}

const Array& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.external ? *n.external : n.value;
}

Array& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id());
  if (!n.grad_ready) {
    n.grad = Array(value(v).shape());
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward(Var loss, double seed) {
  if (done_) throw ContractError("backward: tape already replayed");
  if (!record_) throw ContractError("backward: tape is not recording");
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(value(loss).shape()));
  }
  done_ = true;
  grad(loss)[0] += seed;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad_ready && n.fn) n.fn(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param != nullptr && n.grad_ready) AccumulateInto(n.param->grad, n.grad);
  }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  RequireMatrix(av, "matmul");
  RequireMatrix(bv, "matmul");
  const std::size_t m = av.dim(0), n = av.dim(1), p = bv.dim(1);
  if (bv.dim(0) != n) {
    throw DimensionError("matmul: inner dimensions " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  Array out({m, p});
  kernels::gemm_nn(m, n, p, av.ptr(), bv.ptr(), out.ptr());
  return t.record(std::move(out), {a, b}, [a, b, m, n, p](Tape& tp, const Array& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(m, n, p, g.ptr(), tp.value(b).ptr(), tp.grad(a).ptr());
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(m, n, p, tp.value(a).ptr(), g.ptr(), tp.grad(b).ptr());
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  RequireSameShape(av, bv, "add");
  Array out(av.shape());
  kernels::active().add(av.ptr(), bv.ptr(), out.ptr(), out.size());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Array& g) {
    if (tp.requires_grad(a)) AccumulateInto(tp.grad(a), g);
    if (tp.requires_grad(b)) AccumulateInto(tp.grad(b), g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  RequireSameShape(av, bv, "sub");
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Array& g) {
    if (tp.requires_grad(a)) AccumulateInto(tp.grad(a), g);
    if (tp.requires_grad(b)) {
      kernels::active().axpy(-1.0, g.ptr(), tp.grad(b).ptr(), g.size());
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  RequireSameShape(av, bv, "mul");
  Array out(av.shape());
  kernels::active().mul(av.ptr(), bv.ptr(), out.ptr(), out.size());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Array& g) {
    const std::size_t n = g.size();
    for (auto [self, other] : {std::pair{a, b}, std::pair{b, a}}) {
      if (!tp.requires_grad(self)) continue;
      const Array& ov = tp.value(other);
      Array& gs = tp.grad(self);
      for (std::size_t i = 0; i < n; ++i) gs[i] += g[i] * ov[i];
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  const Array& av = t.value(a);
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  return t.record(std::move(out), {a}, [a, c](Tape& tp, const Array& g) {
    if (tp.requires_grad(a)) {
      kernels::active().axpy(c, g.ptr(), tp.grad(a).ptr(), g.size());
    }
  });
}

Var add_bias(Tape& t, Var a, Var bias) {
  const Array& av = t.value(a);
  const Array& bv = t.value(bias);
  RequireMatrix(av, "add_bias");
  const std::size_t m = av.dim(0), n = av.dim(1);
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) +
                         " for rows of " + shape_string(av.shape()));
  }
  Array out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    kernels::active().add(av.ptr() + i * n, bv.ptr(), out.ptr() + i * n, n);
  }
  return t.record(std::move(out), {a, bias}, [a, bias, m, n](Tape& tp, const Array& g) {
    if (tp.requires_grad(a)) AccumulateInto(tp.grad(a), g);
    if (tp.requires_grad(bias)) {
      Array& gb = tp.grad(bias);
      for (std::size_t i = 0; i < m; ++i) {
        kernels::active().add(gb.ptr(), g.ptr() + i * n, gb.ptr(), n);
      }
    }
  });
}

Var tanh(Tape& t, Var a) {
  const Array& av = t.value(a);
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  const Var self(t.size());
  return t.record(std::move(out), {a}, [a, self](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    Array& ga = tp.grad(a);
    Array local(g.shape());
    kernels::active().tanh_grad(tp.value(self).ptr(), g.ptr(), local.ptr(), g.size());
    AccumulateInto(ga, local);
  });
}

Var sigmoid(Tape& t, Var a) {
  return Unary(
      t, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 - s);
      });
}

Var log(Tape& t, Var a) {
  return Unary(
      t, a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

Var exp(Tape& t, Var a) {
  return Unary(
      t, a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

Var reshape(Tape& t, Var a, Shape shape) {
  Array out = t.value(a).reshaped(std::move(shape));
  return t.record(std::move(out), {a}, [a](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    Array& ga = tp.grad(a);
    kernels::active().add(ga.ptr(), g.ptr(), ga.ptr(), g.size());
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = t.value(parts[0]).dim(1);
  std::size_t rows = 0;
  for (Var p : parts) {
    const Array& v = t.value(p);
    RequireMatrix(v, "concat_rows");
    if (v.dim(1) != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(v.shape()));
    }
    rows += v.dim(0);
  }
  Array out({rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Array& v = t.value(p);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + offset);
    offset += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape& tp, const Array& g) {
    std::size_t off = 0;
    for (Var p : inputs) {
      const std::size_t n = tp.value(p).size();
      if (tp.requires_grad(p)) {
        Array& gp = tp.grad(p);
        kernels::active().add(gp.ptr(), g.ptr() + off, gp.ptr(), n);
      }
      off += n;
    }
  });
}

Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t end) {
  const Array& av = t.value(a);
  RequireMatrix(av, "slice_rows");
  if (begin > end || end > av.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") of " + shape_string(av.shape()));
  }
  const std::size_t cols = av.dim(1);
  Array out({end - begin, cols});
  std::copy(av.data().begin() + begin * cols, av.data().begin() + end * cols,
            out.data().begin());
  return t.record(std::move(out), {a}, [a, begin, cols](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    Array& ga = tp.grad(a);
    kernels::active().add(ga.ptr() + begin * cols, g.ptr(), ga.ptr() + begin * cols,
                          g.size());
  });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
  const Array& tv = t.value(table);
  RequireMatrix(tv, "embedding");
  const std::size_t v = tv.dim(0), d = tv.dim(1);
  Array out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) +
                           " outside table of " + std::to_string(v) + " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, idv, d](Tape& tp, const Array& g) {
    if (!tp.requires_grad(table)) return;
    Array& gt = tp.grad(table);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* dst = gt.ptr() + static_cast<std::size_t>(idv[i]) * d;
      kernels::active().add(dst, g.ptr() + i * d, dst, d);
    }
  });
}

Var sum(Tape& t, Var a) {
  const Array& av = t.value(a);
  double s = 0.0;
  for (double x : av.data()) s += x;
  return t.record(Array::scalar(s), {a}, [a](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    Array& ga = tp.grad(a);
    for (double& x : ga.data()) x += g[0];
  });
}

Var mean(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  return scale(t, sum(t, a), 1.0 / n);
}

double logsumexp(std::span<const double> x) {
  double m = kNegInf;
  for (double v : x) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

Var logsumexp_rows(Tape& t, Var a) {
  const Array& av = t.value(a);
  const std::size_t rows = av.outer_size(), k = av.last_dim();
  Array out({rows});
  for (std::size_t i = 0; i < rows; ++i) out[i] = logsumexp(av.row(i));
  const Var self(t.size());
  return t.record(std::move(out), {a}, [a, self, rows, k](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    const Array& x = tp.value(a);
    const Array& lse = tp.value(self);
    Array& ga = tp.grad(a);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        ga[i * k + j] += g[i] * std::exp(x[i * k + j] - lse[i]);
      }
    }
  });
}

Array log_softmax(const Array& logits, double temperature) {
  CheckTemperature(temperature);
  Array out(logits.shape());
  const std::size_t rows = logits.outer_size(), k = logits.last_dim();
  const double inv = 1.0 / temperature;
  for (std::size_t i = 0; i < rows; ++i) {
    auto src = logits.row(i);
    auto dst = out.row(i);
    double m = kNegInf;
    for (double v : src) m = std::max(m, v * inv);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(src[j] * inv - m);
    const double norm = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) dst[j] = src[j] * inv - norm;
  }
  return out;
}

Array softmax_with_temperature(const Array& logits, double temperature) {
  Array out = log_softmax(logits, temperature);
  for (double& v : out.data()) v = std::exp(v);
  return out;
}

Var log_softmax(Tape& t, Var a, double temperature) {
  Array out = log_softmax(t.value(a), temperature);
  const Var self(t.size());
  const double inv = 1.0 / temperature;
  return t.record(std::move(out), {a}, [a, self, inv](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    const Array& lp = tp.value(self);
    Array& ga = tp.grad(a);
    const std::size_t rows = lp.outer_size(), k = lp.last_dim();
    for (std::size_t i = 0; i < rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        ga[i * k + j] += inv * (g[i * k + j] - std::exp(lp[i * k + j]) * gs);
      }
    }
  });
}

Var softmax_with_temperature(Tape& t, Var a, double temperature) {
  Array out = softmax_with_temperature(t.value(a), temperature);
  const Var self(t.size());
  const double inv = 1.0 / temperature;
  return t.record(std::move(out), {a}, [a, self, inv](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    const Array& p = tp.value(self);
    Array& ga = tp.grad(a);
    const std::size_t rows = p.outer_size(), k = p.last_dim();
    for (std::size_t i = 0; i < rows; ++i) {
      const double gp = kernels::active().dot(g.ptr() + i * k, p.ptr() + i * k, k);
      for (std::size_t j = 0; j < k; ++j) {
        ga[i * k + j] += inv * p[i * k + j] * (g[i * k + j] - gp);
      }
    }
  });
}

Var pick(Tape& t, Var a, std::span<const int> index) {
  const Array& av = t.value(a);
  const std::size_t rows = av.outer_size(), k = av.last_dim();
  if (index.size() != rows) {
    throw DimensionError("pick: " + std::to_string(index.size()) +
                         " indices for " + std::to_string(rows) + " rows");
  }
  Array out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= k) {
      throw DimensionError("pick: index out of range");
    }
    out[i] = av[i * k + static_cast<std::size_t>(index[i])];
  }
  std::vector<int> idx(index.begin(), index.end());
  return t.record(std::move(out), {a}, [a, idx, k](Tape& tp, const Array& g) {
    if (!tp.requires_grad(a)) return;
    Array& ga = tp.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ga[i * k + static_cast<std::size_t>(idx[i])] += g[i];
    }
  });
}

Var gru_cell(Tape& t, Var input_proj, Var h, Var w_hidden, Var b_hidden) {
  const Array& xv = t.value(input_proj);
  const Array& hv = t.value(h);
  const Array& wv = t.value(w_hidden);
  const Array& bv = t.value(b_hidden);
  RequireMatrix(hv, "gru_cell");
  const std::size_t m = hv.dim(0), hd = hv.dim(1), g3 = 3 * hd;
  if (xv.rank() != 2 || xv.dim(0) != m || xv.dim(1) != g3 ||
      wv.shape() != Shape{hd, g3} || bv.size() != g3) {
    throw DimensionError("gru_cell: input " + shape_string(xv.shape()) +
                         ", state " + shape_string(hv.shape()) + ", weights " +
                         shape_string(wv.shape()));
  }
  // Gate activations kept for the backward pass.
  Array hidden_proj({m, g3});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(bv.data().begin(), bv.data().end(), hidden_proj.row(i).begin());
  }
  kernels::gemm_nn(m, hd, g3, hv.ptr(), wv.ptr(), hidden_proj.ptr());
  Array gates({m, g3});  // r, z, n
  Array out({m, hd});
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = xv.ptr() + i * g3;
    const double* hp = hidden_proj.ptr() + i * g3;
    double* gt = gates.ptr() + i * g3;
    for (std::size_t j = 0; j < hd; ++j) {
      const double r = 1.0 / (1.0 + std::exp(-(x[j] + hp[j])));
      const double z = 1.0 / (1.0 + std::exp(-(x[hd + j] + hp[hd + j])));
      const double n = std::tanh(x[2 * hd + j] + r * hp[2 * hd + j]);
      gt[j] = r;
      gt[hd + j] = z;
      gt[2 * hd + j] = n;
      out[i * hd + j] = n + z * (hv[i * hd + j] - n);
    }
  }
  return t.record(
      std::move(out), {input_proj, h, w_hidden, b_hidden},
      [input_proj, h, w_hidden, b_hidden, m, hd, g3, gates = std::move(gates),
       hidden_proj = std::move(hidden_proj)](Tape& tp, const Array& g) {
        const Array& hv = tp.value(h);
        Array d_x({m, g3});
        Array d_hp({m, g3});
        Array d_h_direct({m, hd});
        for (std::size_t i = 0; i < m; ++i) {
          const double* gt = gates.ptr() + i * g3;
          const double* hp = hidden_proj.ptr() + i * g3;
          for (std::size_t j = 0; j < hd; ++j) {
            const double r = gt[j], z = gt[hd + j], n = gt[2 * hd + j];
            const double go = g[i * hd + j];
            const double dz = go * (hv[i * hd + j] - n);
            const double dn = go * (1.0 - z);
            d_h_direct[i * hd + j] = go * z;
            const double dn_pre = dn * (1.0 - n * n);
            const double dr = dn_pre * hp[2 * hd + j];
            const double dr_pre = dr * r * (1.0 - r);
            const double dz_pre = dz * z * (1.0 - z);
            d_x[i * g3 + j] = dr_pre;
            d_x[i * g3 + hd + j] = dz_pre;
            d_x[i * g3 + 2 * hd + j] = dn_pre;
            d_hp[i * g3 + j] = dr_pre;
            d_hp[i * g3 + hd + j] = dz_pre;
            d_hp[i * g3 + 2 * hd + j] = dn_pre * r;
          }
        }
        if (tp.requires_grad(input_proj)) AccumulateInto(tp.grad(input_proj), d_x);
        if (tp.requires_grad(h)) {
          Array& gh = tp.grad(h);
          AccumulateInto(gh, d_h_direct);
          kernels::gemm_nt(m, hd, g3, d_hp.ptr(), tp.value(w_hidden).ptr(), gh.ptr());
        }
        if (tp.requires_grad(w_hidden)) {
          kernels::gemm_tn(m, hd, g3, hv.ptr(), d_hp.ptr(), tp.grad(w_hidden).ptr());
        }
        if (tp.requires_grad(b_hidden)) {
          Array& gb = tp.grad(b_hidden);
          for (std::size_t i = 0; i < m; ++i) {
            kernels::active().add(gb.ptr(), d_hp.ptr() + i * g3, gb.ptr(), g3);
          }
        }
      });
}

}  // namespace tss
