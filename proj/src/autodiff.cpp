#include "mole/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mole/kernels.hpp"
#include "mole/numerics.hpp"

namespace mole {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, false, nullptr, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParamStore& store, std::string_view id) {
  Parameter& p = store.get(id);
  nodes_.push_back(Node{p.value, Tensor(), false, !p.frozen, nullptr, p.frozen ? nullptr : &p});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw std::logic_error("op inputs recorded on a different tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(
      Node{std::move(value), Tensor(), false, needs, needs ? std::move(backward) : nullptr, nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor* Tape::grad_slot(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return &n.grad;
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(Var loss) {
  if (consumed_) throw std::logic_error("tape already used for backward");
  Node& root = nodes_[loss.id];
  if (root.value.size() != 1) throw ShapeError("backward needs a scalar loss");
  consumed_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) {
      // The closure may touch other nodes' grads but never this node's.
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      auto g = n.param->grad.data();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }
}

ParamBinder trainable_binder(Tape& tape, ParamStore& store) {
  return [&tape, &store](std::string_view id) { return tape.param(store, id); };
}

ParamBinder constant_binder(Tape& tape, const ParamStore& store) {
  return [&tape, &store](std::string_view id) { return tape.constant(store.value(id)); };
}

namespace ad {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::logic_error("unbound Var");
  return *a.tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void accumulate(Tensor* slot, const Tensor& g, double factor = 1.0) {
  if (slot == nullptr) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += factor * g[i];
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape("add", a.value(), b.value());
  Tensor out = mole::add(a.value(), b.value());
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, const Tensor& g) {
    accumulate(tp.grad_slot(a), g);
    accumulate(tp.grad_slot(b), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, const Tensor& g) {
    accumulate(tp.grad_slot(a), g);
    accumulate(tp.grad_slot(b), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = tp.grad_slot(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  const Var ins[] = {a};
  return t.record(mole::scaled(a.value(), factor), ins, [a, factor](Tape& tp, const Tensor& g) {
    accumulate(tp.grad_slot(a), g, factor);
  });
}

Var add_bias(Var a, Var bias) {
  Tape& t = tape_of(a);
  const std::size_t d = a.value().cols();
  if (bias.value().size() != d) {
    throw ShapeError("add_bias mismatch " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % d];
  const Var ins[] = {a, bias};
  return t.record(std::move(out), ins, [a, bias, d](Tape& tp, const Tensor& g) {
    accumulate(tp.grad_slot(a), g);
    if (Tensor* gb = tp.grad_slot(bias))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % d] += g[i];
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.value().rank() != 2) throw ShapeError("differentiable matmul needs a matrix rhs");
  Tensor out = mole::matmul(a.value(), b.value());
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.rows(), p = bv.dim(0), n = bv.dim(1);
    if (Tensor* ga = tp.grad_slot(a)) kernels::gemm_nt(m, n, p, g.data(), bv.data(), ga->data());
    if (Tensor* gb = tp.grad_slot(b)) kernels::gemm_tn(m, p, n, av.data(), g.data(), gb->data());
  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  const Var ins[] = {a};
  return t.record(a.value().reshaped(std::move(shape)), ins, [a](Tape& tp, const Tensor& g) {
    accumulate(tp.grad_slot(a), g);
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  Tensor out(a.shape());
  kernels::gelu(a.value().data(), out.data());
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(a)) {
      Tensor dx(g.shape());
      kernels::gelu_backward(a.value().data(), g.data(), dx.data());
      accumulate(ga, dx);
    }
  });
}

Var softmax(Var a) {
  Tape& t = tape_of(a);
  Tensor out = mole::softmax(a.value(), -1);
  Tensor y = out;
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, y = std::move(y)](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    const std::size_t rows = y.rows(), cols = y.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        (*ga)[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - s);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (d == 0) throw ShapeError("layer_norm needs D >= 1");
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm affine shape mismatch for " + shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  std::vector<double> mean(rows), rstd(rows);
  kernels::layer_norm_rows(rows, d, xv.data(), gamma.value().data(), beta.value().data(), eps,
                           out.data(), mean, rstd);
  const Var ins[] = {x, gamma, beta};
  return t.record(std::move(out), ins,
                  [x, gamma, beta, mean = std::move(mean), rstd = std::move(rstd), d,
                   rows](Tape& tp, const Tensor& g) {
                    const Tensor& xv = x.value();
                    const Tensor& gv = gamma.value();
                    Tensor* gx = tp.grad_slot(x);
                    Tensor* gg = tp.grad_slot(gamma);
                    Tensor* gbeta = tp.grad_slot(beta);
                    std::vector<double> xhat(d), dxhat(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        xhat[j] = (xv[r * d + j] - mean[r]) * rstd[r];
                        dxhat[j] = g[r * d + j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                        if (gg) (*gg)[j] += g[r * d + j] * xhat[j];
                        if (gbeta) (*gbeta)[j] += g[r * d + j];
                      }
                      if (!gx) continue;
                      m1 /= static_cast<double>(d);
                      m2 /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j)
                        (*gx)[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                  });
}

Var attention(Var q, Var k, Var v) {
  Tape& t = tape_of(q);
  const bool batched = q.value().rank() == 3;
  Tensor out = mole::attention(q.value(), k.value(), v.value());
  const Var ins[] = {q, k, v};
  return t.record(std::move(out), ins, [q, k, v, batched](Tape& tp, const Tensor& g) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t batch = batched ? qv.dim(0) : 1;
    const std::size_t nq = qv.dim(qv.rank() - 2), d = qv.cols();
    const std::size_t nk = kv.dim(kv.rank() - 2), dv = vv.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor* gq = tp.grad_slot(q);
    Tensor* gk = tp.grad_slot(k);
    Tensor* gvv = tp.grad_slot(v);
    std::vector<double> scores(nq * nk), probs(nq * nk), dprobs(nq * nk);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto qb = qv.data().subspan(b * nq * d, nq * d);
      const auto kb = kv.data().subspan(b * nk * d, nk * d);
      const auto vb = vv.data().subspan(b * nk * dv, nk * dv);
      const auto gb = g.data().subspan(b * nq * dv, nq * dv);
      std::fill(scores.begin(), scores.end(), 0.0);
      kernels::gemm_nt(nq, d, nk, qb, kb, scores);
      for (auto& s : scores) s *= scale;
      kernels::softmax_rows(nq, nk, scores, probs);
      if (gvv) kernels::gemm_tn(nq, nk, dv, probs, gb, gvv->data().subspan(b * nk * dv, nk * dv));
      if (!gq && !gk) continue;
      std::fill(dprobs.begin(), dprobs.end(), 0.0);
      kernels::gemm_nt(nq, dv, nk, gb, vb, dprobs);
      // dscores = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(D) scale.
      for (std::size_t i = 0; i < nq; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < nk; ++j) s += dprobs[i * nk + j] * probs[i * nk + j];
        for (std::size_t j = 0; j < nk; ++j)
          dprobs[i * nk + j] = probs[i * nk + j] * (dprobs[i * nk + j] - s) * scale;
      }
      if (gq) kernels::gemm_nn(nq, nk, d, dprobs, kb, gq->data().subspan(b * nq * d, nq * d), true);
      if (gk) kernels::gemm_tn(nq, nk, d, dprobs, qb, gk->data().subspan(b * nk * d, nk * d));
    }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> rows) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t c = av.cols(), nrows = av.rows();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= nrows) throw std::out_of_range("gather_rows index out of range");
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, rows = std::move(rows), c](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[rows[i] * c + j] += g[i * c + j];
  });
}

Var scatter_add_rows(Var base, std::vector<Var> srcs, std::vector<std::vector<std::size_t>> idx) {
  Tape& t = tape_of(base);
  if (srcs.size() != idx.size()) throw std::invalid_argument("scatter_add_rows arity mismatch");
  Tensor out = base.value();
  const std::size_t c = out.cols(), nrows = out.rows();
  for (std::size_t s = 0; s < srcs.size(); ++s) {
    const Tensor& sv = srcs[s].value();
    if (sv.cols() != c || sv.rows() != idx[s].size()) {
      throw ShapeError("scatter_add_rows source " + shape_str(sv.shape()) + " vs " +
                       std::to_string(idx[s].size()) + " rows of width " + std::to_string(c));
    }
    for (std::size_t i = 0; i < idx[s].size(); ++i) {
      if (idx[s][i] >= nrows) throw std::out_of_range("scatter_add_rows index out of range");
      for (std::size_t j = 0; j < c; ++j) out[idx[s][i] * c + j] += sv[i * c + j];
    }
  }
  std::vector<Var> ins = srcs;
  ins.push_back(base);
  return t.record(std::move(out), ins,
                  [base, srcs = std::move(srcs), idx = std::move(idx), c](Tape& tp, const Tensor& g) {
                    accumulate(tp.grad_slot(base), g);
                    for (std::size_t s = 0; s < srcs.size(); ++s) {
                      Tensor* gs = tp.grad_slot(srcs[s]);
                      if (gs == nullptr) continue;
                      for (std::size_t i = 0; i < idx[s].size(); ++i)
                        for (std::size_t j = 0; j < c; ++j) (*gs)[i * c + j] += g[idx[s][i] * c + j];
                    }
                  });
}

Var gather_elements(Var a, std::vector<std::size_t> flat) {
  Tape& t = tape_of(a);
  Tensor out({flat.size()});
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= a.value().size()) throw std::out_of_range("gather_elements index out of range");
    out[i] = a.value()[flat[i]];
  }
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, flat = std::move(flat)](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < flat.size(); ++i) (*ga)[flat[i]] += g[i];
  });
}

Var scale_rows(Var a, Var w) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), c = av.cols();
  if (w.value().size() != m) {
    throw ShapeError("scale_rows: " + shape_str(av.shape()) + " with weights " +
                     shape_str(w.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= w.value()[i];
  const Var ins[] = {a, w};
  return t.record(std::move(out), ins, [a, w, m, c](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(a))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i * c + j] * w.value()[i];
    if (Tensor* gw = tp.grad_slot(w))
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * a.value()[i * c + j];
        (*gw)[i] += s;
      }
  });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), c = av.cols();
  if (m == 0) throw ShapeError("mean_rows of an empty tensor");
  Tensor out({c});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
  for (auto& v : out.data()) v /= static_cast<double>(m);
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, m, c](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j] * inv;
  });
}

Var mean_middle(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 3 || av.dim(1) == 0) throw ShapeError("mean_middle expects [B x P x C], P >= 1");
  const std::size_t bsz = av.dim(0), p = av.dim(1), c = av.dim(2);
  Tensor out({bsz, c});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(b, j) += av.at(b, i, j);
  for (auto& v : out.data()) v /= static_cast<double>(p);
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, bsz, p, c](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    const double inv = 1.0 / static_cast<double>(p);
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < c; ++j) ga->at(b, i, j) += g.at(b, j) * inv;
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Var ins[] = {a};
  return t.record(Tensor::scalar(s), ins, [a](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    for (auto& v : ga->data()) v += g.item();
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var dot_const(Var a, const Tensor& c) {
  Tape& t = tape_of(a);
  if (a.value().size() != c.size()) throw ShapeError("dot_const size mismatch");
  const Var ins[] = {a};
  return t.record(Tensor::scalar(dot(a.value(), c)), ins, [a, c](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(a);
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < c.size(); ++i) (*ga)[i] += g.item() * c[i];
  });
}

Var mse(Var pred, const Tensor& target) {
  Tape& t = tape_of(pred);
  require_same_shape("mse", pred.value(), target);
  const std::size_t n = target.size();
  if (n == 0) throw ShapeError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.value()[i] - target[i];
    s += d * d;
  }
  const Var ins[] = {pred};
  return t.record(Tensor::scalar(s / static_cast<double>(n)), ins,
                  [pred, target, n](Tape& tp, const Tensor& g) {
                    Tensor* gp = tp.grad_slot(pred);
                    if (gp == nullptr) return;
                    const double f = 2.0 * g.item() / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) (*gp)[i] += f * (pred.value()[i] - target[i]);
                  });
}

Var linear_combination(std::span<const Var> scalars, std::span<const double> coefs) {
  if (scalars.empty() || scalars.size() != coefs.size()) {
    throw std::invalid_argument("linear_combination needs matching non-empty inputs");
  }
  Tape& t = tape_of(scalars.front());
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += coefs[i] * scalars[i].value().item();
  std::vector<Var> ins(scalars.begin(), scalars.end());
  std::vector<double> cs(coefs.begin(), coefs.end());
  return t.record(Tensor::scalar(s), ins, [ins, cs](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < ins.size(); ++i)
      if (Tensor* gi = tp.grad_slot(ins[i])) (*gi)[0] += cs[i] * g.item();
  });
}

Var ortho_loss(std::span<const Var> outputs, double eps) {
  const std::size_t n = outputs.size();
  if (n < 2) throw std::invalid_argument("ortho_loss needs at least two expert outputs");
  Tape& t = tape_of(outputs.front());
  const std::size_t len = outputs.front().value().size();
  std::vector<double> norms(n);
  std::vector<Tensor> unit;
  unit.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& v = outputs[i].value();
    if (v.size() != len) throw ShapeError("ortho_loss outputs differ in size");
    norms[i] = frobenius_norm(v);
    unit.push_back(scaled(v, 1.0 / std::max(norms[i], eps)).reshaped({len}));
  }
  // Cosines for the gradient; squared cosines from the raw Gram so that
  // identical outputs give exactly 1.
  std::vector<Tensor> flat;
  for (const Var& v : outputs) flat.push_back(v.value().reshaped({len}));
  std::vector<double> gram(n * n, 0.0), self(n);
  for (std::size_t i = 0; i < n; ++i) self[i] = std::max(dot(flat[i], flat[i]), eps * eps);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      gram[i * n + j] = gram[j * n + i] = dot(unit[i], unit[j]);
      const double raw = dot(flat[i], flat[j]);
      acc += 2.0 * (raw * raw / (self[i] * self[j]));
    }
  const double pairs = static_cast<double>(n * (n - 1));
  std::vector<Var> ins(outputs.begin(), outputs.end());
  return t.record(
      Tensor::scalar(acc / pairs), ins,
      [ins, unit = std::move(unit), gram = std::move(gram), norms = std::move(norms), n, len, eps,
       pairs](Tape& tp, const Tensor& g) {
        std::vector<double> du(len);
        for (std::size_t i = 0; i < n; ++i) {
          Tensor* gi = tp.grad_slot(ins[i]);
          if (gi == nullptr) continue;
          std::fill(du.begin(), du.end(), 0.0);
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double f = 4.0 * g.item() * gram[i * n + j] / pairs;
            for (std::size_t e = 0; e < len; ++e) du[e] += f * unit[j][e];
          }
          if (norms[i] > eps) {
            double proj = 0.0;
            for (std::size_t e = 0; e < len; ++e) proj += unit[i][e] * du[e];
            for (std::size_t e = 0; e < len; ++e) (*gi)[e] += (du[e] - unit[i][e] * proj) / norms[i];
          } else {
            for (std::size_t e = 0; e < len; ++e) (*gi)[e] += du[e] / eps;
          }
        }
      });
}

}  // namespace ad
}  // namespace mole
