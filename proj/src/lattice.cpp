#include "tss/lattice.hpp"

#include <cmath>
#include <limits>

namespace tss {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void CheckLattice(const JointTensor& j, const TokenSequence& y, int blank) {
  if (j.log_probs.rank() != 3) {
    throw ContractError("joint tensor must be rank 3, got " +
                        shape_string(j.log_probs.shape()));
  }
  if (j.columns() != y.size() + 1) {
    throw ContractError("joint tensor has " + std::to_string(j.columns()) +
                        " columns for a label sequence of length " + std::to_string(y.size()));
  }
  const int k = static_cast<int>(j.classes());
  if (blank < 0 || blank >= k) throw ContractError("blank id outside class range");
  for (int tok : y) {
    if (tok < 0 || tok >= k || tok == blank) {
      throw ContractError("invalid token id " + std::to_string(tok) + " in lattice labels");
    }
  }
  if (j.frames() == 0) throw ContractError("joint tensor has no frames");
}

}  // namespace

const char* source_name(SamplingSource s) {
  switch (s) {
    case SamplingSource::kElm: return "elm";
    case SamplingSource::kIlm: return "ilm";
    case SamplingSource::kRnnt: return "rnnt";
  }
  return "?";
}

SamplingSource parse_source(const std::string& name) {
  if (name == "elm") return SamplingSource::kElm;
  if (name == "ilm") return SamplingSource::kIlm;
  if (name == "rnnt") return SamplingSource::kRnnt;
  throw ParameterError("unknown sampling source '" + name + "'");
}

const char* path_name(AlignmentPath p) {
  return p == AlignmentPath::kViterbi ? "viterbi" : "occupancy";
}

AlignmentPath parse_path(const std::string& name) {
  if (name == "occupancy") return AlignmentPath::kOccupancy;
  if (name == "viterbi") return AlignmentPath::kViterbi;
  throw ParameterError("unknown rnnt path '" + name + "'");
}

LatticeVars rnnt_forward_backward(const JointTensor& j, const TokenSequence& y, int blank) {
  CheckLattice(j, y, blank);
  const std::size_t frames = j.frames(), u_max = y.size();
  LatticeVars v{Array({frames, u_max + 1}, kNegInf), Array({frames, u_max + 1}, kNegInf), 0.0};
  Array& a = v.log_alpha;
  Array& b = v.log_beta;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u <= u_max; ++u) {
      if (t == 0 && u == 0) {
        a.at(0, 0) = 0.0;
        continue;
      }
      double acc = kNegInf;
      if (t > 0) acc = a.at(t - 1, u) + j.at(t - 1, u, blank);
      if (u > 0) acc = log_add(acc, a.at(t, u - 1) + j.at(t, u - 1, y[u - 1]));
      a.at(t, u) = acc;
    }
  }
  for (std::size_t t = frames; t-- > 0;) {
    for (std::size_t u = u_max + 1; u-- > 0;) {
      if (t == frames - 1 && u == u_max) {
        b.at(t, u) = j.at(t, u, blank);
        continue;
      }
      double acc = kNegInf;
      if (t + 1 < frames) acc = b.at(t + 1, u) + j.at(t, u, blank);
      if (u < u_max) acc = log_add(acc, b.at(t, u + 1) + j.at(t, u, y[u]));
      b.at(t, u) = acc;
    }
  }
  v.log_likelihood = a.at(frames - 1, u_max) + j.at(frames - 1, u_max, blank);
  return v;
}

Array rnnt_loss_grad(const JointTensor& j, const TokenSequence& y, int blank) {
  const LatticeVars v = rnnt_forward_backward(j, y, blank);
  const std::size_t frames = j.frames(), cols = j.columns(), k = j.classes();
  const double ll = v.log_likelihood;
  Array g({frames, cols, k});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u < cols; ++u) {
      const double alpha = v.log_alpha.at(t, u);
      const double occ = std::exp(alpha + v.log_beta.at(t, u) - ll);
      double* out = g.ptr() + (t * cols + u) * k;
      const double* lp = j.log_probs.ptr() + (t * cols + u) * k;
      for (std::size_t c = 0; c < k; ++c) out[c] = std::exp(lp[c]) * occ;
      // Blank edge, including the terminal one.
      double beta_blank = kNegInf;
      if (t + 1 < frames) {
        beta_blank = v.log_beta.at(t + 1, u);
      } else if (u + 1 == cols) {
        beta_blank = 0.0;
      }
      if (beta_blank != kNegInf) {
        out[blank] -= std::exp(alpha + lp[blank] + beta_blank - ll);
      }
      if (u + 1 < cols) {
        const int tok = y[u];
        out[tok] -= std::exp(alpha + lp[tok] + v.log_beta.at(t, u + 1) - ll);
      }
    }
  }
  return g;
}

Array emission_occupancy(const LatticeVars& v, const JointTensor& j, const TokenSequence& y) {
  const std::size_t frames = j.frames(), u_max = y.size();
  if (v.log_alpha.rank() != 2 || v.log_alpha.dim(0) != frames ||
      v.log_alpha.dim(1) != u_max + 1 || j.columns() != u_max + 1) {
    throw ContractError("emission_occupancy: lattice variables do not match inputs");
  }
  Array gamma({frames, u_max});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u < u_max; ++u) {
      gamma.at(t, u) = std::exp(v.log_alpha.at(t, u) + j.at(t, u, y[u]) +
                                v.log_beta.at(t, u + 1) - v.log_likelihood);
    }
  }
  return gamma;
}

AlignmentIndices extract_time_indices(const Array& gamma) {
  AlignmentIndices idx;
  if (gamma.rank() != 2) throw ContractError("occupancy must be a matrix");
  const std::size_t frames = gamma.dim(0), u_max = gamma.dim(1);
  idx.t_u.resize(u_max);
  for (std::size_t u = 0; u < u_max; ++u) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < frames; ++t) {
      if (gamma.at(t, u) > gamma.at(best, u)) best = t;
    }
    if (u > 0 && best < idx.t_u[u - 1]) best = idx.t_u[u - 1];
    idx.t_u[u] = best;
  }
  return idx;
}

AlignmentIndices viterbi_time_indices(const JointTensor& j, const TokenSequence& y, int blank) {
  CheckLattice(j, y, blank);
  const std::size_t frames = j.frames(), u_max = y.size();
  Array best({frames, u_max + 1}, kNegInf);
  // true: arrived by emitting a token; false: by a blank.
  std::vector<char> from_token(frames * (u_max + 1), 0);
  best.at(0, 0) = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u <= u_max; ++u) {
      if (t == 0 && u == 0) continue;
      double via_blank = t > 0 ? best.at(t - 1, u) + j.at(t - 1, u, blank) : kNegInf;
      double via_token = u > 0 ? best.at(t, u - 1) + j.at(t, u - 1, y[u - 1]) : kNegInf;
      // Ties go to the blank arrival, i.e. the later emission frame is not preferred.
      if (via_token > via_blank) {
        best.at(t, u) = via_token;
        from_token[t * (u_max + 1) + u] = 1;
      } else {
        best.at(t, u) = via_blank;
      }
    }
  }
  AlignmentIndices idx;
  idx.t_u.assign(u_max, 0);
  std::size_t t = frames - 1, u = u_max;
  while (t > 0 || u > 0) {
    if (from_token[t * (u_max + 1) + u]) {
      idx.t_u[u - 1] = t;
      --u;
    } else {
      --t;
    }
  }
  return idx;
}

SamplingMatrix gather_rnnt_sampling_matrix(const JointTensor& j, const AlignmentIndices& idx) {
  const std::size_t u_max = idx.t_u.size(), k = j.classes();
  if (j.columns() < u_max + 1 && u_max > 0) {
    throw ContractError("gather: joint tensor has too few columns");
  }
  SamplingMatrix m{Array({u_max, k}), SamplingSource::kRnnt};
  for (std::size_t u = 0; u < u_max; ++u) {
    const std::size_t t = idx.t_u[u];
    if (t >= j.frames()) {
      throw ContractError("gather: time index " + std::to_string(t) + " outside " +
                          std::to_string(j.frames()) + " frames");
    }
    for (std::size_t c = 0; c < k; ++c) m.log_probs.at(u, c) = j.log_probs.at(t, u, c);
  }
  return m;
}

SamplingMatrix rnnt_sampling_matrix(const JointTensor& j, const TokenSequence& y, int blank,
                                    AlignmentPath path) {
  AlignmentIndices idx;
  if (path == AlignmentPath::kViterbi) {
    idx = viterbi_time_indices(j, y, blank);
  } else {
    const LatticeVars v = rnnt_forward_backward(j, y, blank);
    idx = extract_time_indices(emission_occupancy(v, j, y));
  }
  return gather_rnnt_sampling_matrix(j, idx);
}

Var transducer_loss(Tape& t, Var logits, const TokenSequence& y, int blank) {
  JointTensor jt{log_softmax(t.value(logits)), false};
  const LatticeVars v = rnnt_forward_backward(jt, y, blank);
  Array loss = Array::scalar(-v.log_likelihood);
  if (!t.recording() || !t.requires_grad(logits)) return t.constant(std::move(loss));
  Array grad = rnnt_loss_grad(jt, y, blank);
  return t.record(std::move(loss), {logits},
                  [logits, grad = std::move(grad)](Tape& tp, const Array& g) {
                    Array& gl = tp.grad(logits);
                    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * grad[i];
                  });
}

// ---- CTC ----------------------------------------------------------------------

std::size_t ctc_min_frames(const TokenSequence& y) {
  std::size_t n = y.size();
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y[i] == y[i - 1]) ++n;
  }
  return n;
}

CtcResult ctc_loss(const Array& log_probs, const TokenSequence& y, int blank) {
  if (log_probs.rank() != 2) throw ContractError("ctc_loss: expected [T x K] log-probabilities");
  const std::size_t frames = log_probs.dim(0), k = log_probs.dim(1);
  for (int tok : y) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= k || tok == blank) {
      throw ContractError("ctc_loss: invalid label " + std::to_string(tok));
    }
  }
  if (frames < ctc_min_frames(y) || frames == 0) {
    throw CtcInfeasible("ctc_loss: " + std::to_string(frames) + " frames cannot emit " +
                        std::to_string(y.size()) + " labels");
  }
  // Expanded labels: blank, y1, blank, y2, ..., yU, blank.
  const std::size_t s_len = 2 * y.size() + 1;
  std::vector<int> labels(s_len, blank);
  for (std::size_t i = 0; i < y.size(); ++i) labels[2 * i + 1] = y[i];
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && labels[s] != blank && labels[s] != labels[s - 2];
  };

  Array alpha({frames, s_len}, kNegInf);
  Array beta({frames, s_len}, kNegInf);  // excludes the emission at t
  alpha.at(0, 0) = log_probs.at(0, static_cast<std::size_t>(labels[0]));
  if (s_len > 1) alpha.at(0, 1) = log_probs.at(0, static_cast<std::size_t>(labels[1]));
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = alpha.at(t - 1, s);
      if (s >= 1) acc = log_add(acc, alpha.at(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, alpha.at(t - 1, s - 2));
      alpha.at(t, s) = acc == kNegInf
                           ? kNegInf
                           : acc + log_probs.at(t, static_cast<std::size_t>(labels[s]));
    }
  }
  beta.at(frames - 1, s_len - 1) = 0.0;
  if (s_len > 1) beta.at(frames - 1, s_len - 2) = 0.0;
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      auto next = [&](std::size_t s2) {
        return beta.at(t + 1, s2) + log_probs.at(t + 1, static_cast<std::size_t>(labels[s2]));
      };
      double acc = next(s);
      if (s + 1 < s_len) acc = log_add(acc, next(s + 1));
      if (s + 2 < s_len && can_skip(s + 2)) acc = log_add(acc, next(s + 2));
      beta.at(t, s) = acc;
    }
  }
  double ll = alpha.at(frames - 1, s_len - 1);
  if (s_len > 1) ll = log_add(ll, alpha.at(frames - 1, s_len - 2));

  CtcResult r{-ll, Array({frames, k})};
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < k; ++c) r.grad.at(t, c) = std::exp(log_probs.at(t, c));
    for (std::size_t s = 0; s < s_len; ++s) {
      const double post = alpha.at(t, s) + beta.at(t, s) - ll;
      if (post != kNegInf) r.grad.at(t, static_cast<std::size_t>(labels[s])) -= std::exp(post);
    }
  }
  return r;
}

Var ctc_loss(Tape& t, Var logits, const TokenSequence& y, int blank) {
  CtcResult r = ctc_loss(log_softmax(t.value(logits)), y, blank);
  Array loss = Array::scalar(r.loss);
  if (!t.recording() || !t.requires_grad(logits)) return t.constant(std::move(loss));
  return t.record(std::move(loss), {logits},
                  [logits, grad = std::move(r.grad)](Tape& tp, const Array& g) {
                    Array& gl = tp.grad(logits);
                    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * grad[i];
                  });
}

}  // namespace tss
