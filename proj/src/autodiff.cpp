#include "mea/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "mea/error.hpp"
#include "mea/rope.hpp"

namespace mea::ad {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = requires_grad ? "param" : "const";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string op, std::vector<std::size_t> inputs, Tensor value, Backward backward) {
  Node n;
  n.op = std::move(op);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_.at(i).requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape())
    throw DimensionError("adjoint shape " + shape_str(g.shape()) + " does not match value " +
                         shape_str(n.value.shape()) + " at op '" + n.op + "'");
  if (n.adjoint.empty()) {
    n.adjoint = g;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) n.adjoint[i] += g[i];
  }
}

GradMap Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  if (value(loss).shape() != Shape{1})
    throw ContractError("backward: loss must be a scalar of shape [1], got " +
                        shape_str(value(loss).shape()));
  for (auto& n : nodes_) n.adjoint = Tensor();
  accumulate(loss.id, Tensor::scalar(1.0));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.adjoint.empty() || !n.backward) continue;
    n.backward(*this, n.adjoint);
  }
  GradMap grads;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.is_leaf && n.requires_grad)
      grads.emplace(id, n.adjoint.empty() ? Tensor(n.value.shape()) : n.adjoint);
  }
  return grads;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.adjoint.empty()) {
    // unreached nodes report zero
    static thread_local Tensor zero;
    zero = Tensor(n.value.shape());
    return zero;
  }
  return n.adjoint;
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape != b.tape)
    throw ContractError(std::string(op) + ": operands must live on the same tape");
  return *a.tape;
}

Tape& tape_of(Var a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid variable");
  return *a.tape;
}

// C[b] = op(A[b]) * op(B[b]) on rank-3 tensors.
Tensor batched_gemm(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  const std::size_t batch = a.dim(0);
  if (b.dim(0) != batch) throw DimensionError("bmm: batch sizes differ");
  const std::size_t m = ta ? a.dim(2) : a.dim(1);
  const std::size_t k = ta ? a.dim(1) : a.dim(2);
  const std::size_t kb = tb ? b.dim(2) : b.dim(1);
  const std::size_t n = tb ? b.dim(1) : b.dim(2);
  if (k != kb)
    throw DimensionError("bmm: inner dimensions differ " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  Tensor out({batch, m, n});
  const std::size_t a1 = a.dim(1), a2 = a.dim(2), b1 = b.dim(1), b2 = b.dim(2);
  for (std::size_t q = 0; q < batch; ++q) {
    const double* pa = a.data().data() + q * a1 * a2;
    const double* pb = b.data().data() + q * b1 * b2;
    double* po = out.data().data() + q * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = ta ? pa[p * a2 + i] : pa[i * a2 + p];
        if (aip == 0.0) continue;
        double* orow = po + i * n;
        if (tb) {
          for (std::size_t j = 0; j < n; ++j) orow[j] += aip * pb[j * b2 + p];
        } else {
          const double* brow = pb + p * b2;
          for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
      }
  }
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const auto ia = a.id, ib = b.id;
  return t.record("add", {ia, ib}, mea::add(a.value(), b.value()),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    tp.accumulate(ia, up);
                    tp.accumulate(ib, up);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  const auto ia = a.id, ib = b.id;
  return t.record("sub", {ia, ib}, mea::sub(a.value(), b.value()),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    tp.accumulate(ia, up);
                    tp.accumulate(ib, mea::scale(up, -1.0));
                  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const auto ia = a.id, ib = b.id;
  return t.record("mul", {ia, ib}, hadamard(a.value(), b.value()),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, hadamard(up, tp.value(ib)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, hadamard(up, tp.value(ia)));
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a, "scale");
  const auto ia = a.id;
  return t.record("scale", {ia}, mea::scale(a.value(), s),
                  [ia, s](Tape& tp, const Tensor& up) { tp.accumulate(ia, mea::scale(up, s)); });
}

Var scale_blocks(Var t, Var s) {
  Tape& tp = same_tape(t, s, "scale_blocks");
  const Tensor& tv = t.value();
  const Tensor& sv = s.value();
  if (sv.size() != tv.dim(0))
    throw DimensionError("scale_blocks: " + std::to_string(sv.size()) + " scales for " +
                         shape_str(tv.shape()));
  const std::size_t block = tv.size() / tv.dim(0);
  Tensor out = tv;
  for (std::size_t b = 0; b < sv.size(); ++b)
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] *= sv[b];
  const auto it = t.id, is = s.id;
  return tp.record("scale_blocks", {it, is}, std::move(out),
                   [it, is, block](Tape& tape, const Tensor& up) {
                     const Tensor& tv2 = tape.value(it);
                     const Tensor& sv2 = tape.value(is);
                     if (tape.requires_grad(it)) {
                       Tensor g = up;
                       for (std::size_t b = 0; b < sv2.size(); ++b)
                         for (std::size_t i = 0; i < block; ++i) g[b * block + i] *= sv2[b];
                       tape.accumulate(it, g);
                     }
                     if (tape.requires_grad(is)) {
                       Tensor g(sv2.shape());
                       for (std::size_t b = 0; b < sv2.size(); ++b)
                         for (std::size_t i = 0; i < block; ++i)
                           g[b] += up[b * block + i] * tv2[b * block + i];
                       tape.accumulate(is, g);
                     }
                   });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const auto ia = a.id, ib = b.id;
  return t.record("matmul", {ia, ib}, mea::matmul(a.value(), b.value()),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    if (tp.requires_grad(ia))
                      tp.accumulate(ia, mea::matmul(up, mea::transpose(tp.value(ib))));
                    if (tp.requires_grad(ib))
                      tp.accumulate(ib, mea::matmul(mea::transpose(tp.value(ia)), up));
                  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a, "transpose");
  const auto ia = a.id;
  return t.record("transpose", {ia}, mea::transpose(a.value()),
                  [ia](Tape& tp, const Tensor& up) { tp.accumulate(ia, mea::transpose(up)); });
}

Var bmm(Var a, Var b) {
  Tape& t = same_tape(a, b, "bmm");
  const auto ia = a.id, ib = b.id;
  return t.record("bmm", {ia, ib}, batched_gemm(a.value(), false, b.value(), false),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    if (tp.requires_grad(ia))
                      tp.accumulate(ia, batched_gemm(up, false, tp.value(ib), true));
                    if (tp.requires_grad(ib))
                      tp.accumulate(ib, batched_gemm(tp.value(ia), true, up, false));
                  });
}

Var bmm_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "bmm_nt");
  const auto ia = a.id, ib = b.id;
  return t.record("bmm_nt", {ia, ib}, batched_gemm(a.value(), false, b.value(), true),
                  [ia, ib](Tape& tp, const Tensor& up) {
                    if (tp.requires_grad(ia))
                      tp.accumulate(ia, batched_gemm(up, false, tp.value(ib), false));
                    if (tp.requires_grad(ib))
                      tp.accumulate(ib, batched_gemm(up, true, tp.value(ia), false));
                  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a, "reshape");
  const auto ia = a.id;
  Shape orig = a.shape();
  return t.record("reshape", {ia}, a.value().reshaped(std::move(shape)),
                  [ia, orig](Tape& tp, const Tensor& up) { tp.accumulate(ia, up.reshaped(orig)); });
}

Var swap01(Var a) {
  Tape& t = tape_of(a, "swap01");
  const auto ia = a.id;
  return t.record("swap01", {ia}, mea::swap01(a.value()),
                  [ia](Tape& tp, const Tensor& up) { tp.accumulate(ia, mea::swap01(up)); });
}

Var slice_last(Var a, std::size_t offset, std::size_t len) {
  Tape& t = tape_of(a, "slice_last");
  const auto ia = a.id;
  return t.record("slice_last", {ia}, mea::slice_last(a.value(), offset, len),
                  [ia, offset, len](Tape& tp, const Tensor& up) {
                    const Tensor& in = tp.value(ia);
                    const std::size_t d = in.shape().back();
                    Tensor g(in.shape());
                    const std::size_t rows = in.size() / d;
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < len; ++c) g[r * d + offset + c] = up[r * len + c];
                    tp.accumulate(ia, g);
                  });
}

Var softmax_rows(Var a, bool causal) {
  Tape& t = tape_of(a, "softmax_rows");
  const auto ia = a.id;
  Tensor y = mea::softmax_rows(a.value(), causal);
  const std::size_t self = t.size();
  return t.record("softmax_rows", {ia}, std::move(y), [ia, self](Tape& tp, const Tensor& up) {
    const Tensor& yv = tp.value(self);
    const std::size_t cols = yv.shape().back();
    const std::size_t rows = yv.size() / cols;
    Tensor g(yv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double dotp = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dotp += up[r * cols + c] * yv[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] = yv[r * cols + c] * (up[r * cols + c] - dotp);
    }
    tp.accumulate(ia, g);
  });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tape& t = same_tape(x, gain, "rms_norm");
  const auto ix = x.id, ig = gain.id;
  return t.record("rms_norm", {ix, ig}, mea::rms_norm(x.value(), gain.value(), eps),
                  [ix, ig, eps](Tape& tp, const Tensor& up) {
                    const Tensor& xv = tp.value(ix);
                    const Tensor& gv = tp.value(ig);
                    const std::size_t d = xv.shape().back();
                    const std::size_t rows = xv.size() / d;
                    const std::size_t gs = gv.size();
                    Tensor gx(xv.shape());
                    Tensor gg(gv.shape());
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* in = xv.data().data() + r * d;
                      double ms = 0.0;
                      for (std::size_t c = 0; c < d; ++c) ms += in[c] * in[c];
                      const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
                      double proj = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const std::size_t f = r * d + c;
                        proj += up[f] * gv[f % gs] * in[c];
                        gg[f % gs] += up[f] * in[c] * inv;
                      }
                      const double k = inv * inv * inv * proj / static_cast<double>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        const std::size_t f = r * d + c;
                        gx[f] = inv * gv[f % gs] * up[f] - k * in[c];
                      }
                    }
                    tp.accumulate(ix, gx);
                    tp.accumulate(ig, gg);
                  });
}

Var head_mix(Var tv, Var w) {
  Tape& t = same_tape(tv, w, "head_mix");
  const auto it = tv.id, iw = w.id;
  return t.record("head_mix", {it, iw}, mea::head_mix(tv.value(), w.value()),
                  [it, iw](Tape& tp, const Tensor& up) {
                    const Tensor& in = tp.value(it);
                    const Tensor& wv = tp.value(iw);
                    if (tp.requires_grad(it)) tp.accumulate(it, mea::head_mix(up, mea::transpose(wv)));
                    if (tp.requires_grad(iw)) {
                      const std::size_t n = in.dim(0), hp = in.dim(1), d = in.dim(2), h = wv.dim(1);
                      Tensor g(wv.shape());
                      for (std::size_t p = 0; p < n; ++p)
                        for (std::size_t i = 0; i < hp; ++i)
                          for (std::size_t j = 0; j < h; ++j) {
                            const double* a = &in.at(p, i, 0);
                            const double* b = &up.at(p, j, 0);
                            double s = 0.0;
                            for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
                            g.at(i, j) += s;
                          }
                      tp.accumulate(iw, g);
                    }
                  });
}

Var rope(Var x, double base) {
  Tape& t = tape_of(x, "rope");
  const auto ix = x.id;
  return t.record("rope", {ix}, mea::rope(x.value(), base, false),
                  [ix, base](Tape& tp, const Tensor& up) {
                    tp.accumulate(ix, mea::rope(up, base, true));
                  });
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Var swiglu(Var gate, Var upv) {
  Tape& t = same_tape(gate, upv, "swiglu");
  require_same_shape(gate.value(), upv.value(), "swiglu");
  const auto ig = gate.id, iu = upv.id;
  Tensor out(gate.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = gate.value()[i];
    out[i] = g * sigmoid(g) * upv.value()[i];
  }
  return t.record("swiglu", {ig, iu}, std::move(out), [ig, iu](Tape& tp, const Tensor& up) {
    const Tensor& gv = tp.value(ig);
    const Tensor& uv = tp.value(iu);
    Tensor dg(gv.shape()), du(uv.shape());
    for (std::size_t i = 0; i < gv.size(); ++i) {
      const double s = sigmoid(gv[i]);
      const double silu = gv[i] * s;
      dg[i] = up[i] * uv[i] * s * (1.0 + gv[i] * (1.0 - s));
      du[i] = up[i] * silu;
    }
    tp.accumulate(ig, dg);
    tp.accumulate(iu, du);
  });
}

Var embedding(Var table, std::span<const int> tokens) {
  Tape& t = tape_of(table, "embedding");
  const Tensor& tv = table.value();
  require_rank(tv, 2, "embedding table");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> toks(tokens.begin(), tokens.end());
  Tensor out({toks.size(), d});
  for (std::size_t n = 0; n < toks.size(); ++n) {
    if (toks[n] < 0 || static_cast<std::size_t>(toks[n]) >= vocab)
      throw DataError("embedding: token " + std::to_string(toks[n]) + " outside vocabulary of " +
                      std::to_string(vocab));
    std::copy_n(&tv.at(static_cast<std::size_t>(toks[n]), 0), d, &out.at(n, 0));
  }
  const auto it = table.id;
  return t.record("embedding", {it}, std::move(out), [it, toks, d](Tape& tp, const Tensor& up) {
    Tensor g(tp.value(it).shape());
    for (std::size_t n = 0; n < toks.size(); ++n)
      for (std::size_t c = 0; c < d; ++c) g.at(static_cast<std::size_t>(toks[n]), c) += up.at(n, c);
    tp.accumulate(it, g);
  });
}

Var concat_heads(Var head_major) {
  const std::size_t h = head_major.shape().at(0);
  const std::size_t n = head_major.shape().at(1);
  const std::size_t d = head_major.shape().at(2);
  return reshape(swap01(head_major), {n, h * d});
}

Var sum(Var a) {
  Tape& t = tape_of(a, "sum");
  const auto ia = a.id;
  return t.record("sum", {ia}, Tensor::scalar(mea::sum(a.value())),
                  [ia](Tape& tp, const Tensor& up) {
                    tp.accumulate(ia, Tensor(tp.value(ia).shape(), up[0]));
                  });
}

Var mse(Var a, const Tensor& target) {
  Tape& t = tape_of(a, "mse");
  require_same_shape(a.value(), target, "mse");
  const auto ia = a.id;
  const double n = static_cast<double>(target.size());
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double e = a.value()[i] - target[i];
    s += e * e;
  }
  return t.record("mse", {ia}, Tensor::scalar(s / n), [ia, target, n](Tape& tp, const Tensor& up) {
    const Tensor& av = tp.value(ia);
    Tensor g(av.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * (av[i] - target[i]) / n * up[0];
    tp.accumulate(ia, g);
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = tape_of(logits, "cross_entropy");
  const Tensor& lv = logits.value();
  require_rank(lv, 2, "cross_entropy logits");
  const std::size_t n = lv.dim(0), v = lv.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per row required");
  std::vector<int> tg(targets.begin(), targets.end());
  Tensor probs = mea::softmax_rows(lv, false);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= v)
      throw DataError("cross_entropy: target outside vocabulary");
    // log-sum-exp form keeps tiny probabilities finite
    double mx = lv.at(r, 0);
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, lv.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(lv.at(r, c) - mx);
    loss += (mx + std::log(z)) - lv.at(r, static_cast<std::size_t>(tg[r]));
  }
  loss /= static_cast<double>(n);
  const auto il = logits.id;
  return t.record("cross_entropy", {il}, Tensor::scalar(loss),
                  [il, tg, probs = std::move(probs), n](Tape& tp, const Tensor& up) {
                    Tensor g = probs;
                    const std::size_t v2 = g.dim(1);
                    for (std::size_t r = 0; r < n; ++r) g[r * v2 + static_cast<std::size_t>(tg[r])] -= 1.0;
                    const double k = up[0] / static_cast<double>(n);
                    for (auto& x : g.data()) x *= k;
                    tp.accumulate(il, g);
                  });
}

std::vector<Tensor> gradients(const Program& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p, true));
  Var loss = f(tape, vars);
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(tape.grad(v));
  return out;
}

double evaluate(const Program& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p));
  return f(tape, vars).value().item();
}

double grad_check(const Program& f, std::span<const Tensor> params, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  const std::vector<Tensor> analytic = gradients(f, params);
  std::vector<Tensor> work(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + step;
      const double fp = evaluate(f, work);
      work[p][i] = orig - step;
      const double fm = evaluate(f, work);
      work[p][i] = orig;
      const double central = (fp - fm) / (2.0 * step);
      diff = std::max(diff, std::abs(analytic[p][i] - central));
      ref = std::max(ref, std::abs(central));
    }
    worst = std::max(worst, diff / (ref + 1e-12));
  }
  return worst;
}

}  // namespace mea::ad
