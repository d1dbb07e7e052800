// Tape-based reverse-mode automatic differentiation over Eigen arrays.
//
// A Tape owns the nodes of one computation. Operations append nodes with a
// backward closure; Tape::backward walks the tape in reverse and accumulates
// gradients into every node with requires_grad. A tape created with
// grad_enabled=false records no closures (inference mode).
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mixsep/dsp.hpp"
#include "mixsep/metrics.hpp"

namespace mixsep::ad {

using Arr = mixsep::Arr;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Arr v) { return push(std::move(v), false, {}, nullptr); }

  Var leaf(Arr v) { return push(std::move(v), grad_enabled_, {}, nullptr); }

  const Arr& value(Var v) const { return nodes_[std::size_t(v.id)].value; }

  bool requires_grad(Var v) const { return nodes_[std::size_t(v.id)].requires_grad; }

  const Arr& grad(Var v) const {
    const Node& n = nodes_[std::size_t(v.id)];
    if (!n.grad_init)
      throw std::logic_error("autodiff: gradient not populated (call backward first)");
    return n.grad;
  }

  // Adds g into the gradient buffer of node id (no-op for constants).
  void accumulate(int id, const Arr& g) {
    Node& n = nodes_[std::size_t(id)];
    if (!n.requires_grad) return;
    if (!n.grad_init) {
      n.grad = Arr::Zero(n.value.rows(), n.value.cols());
      n.grad_init = true;
    }
    n.grad += g;
  }

  Var push(Arr value, bool requires_grad, std::vector<int> parents,
           std::function<void(Tape&, int)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
  }

  // Helper for ops: requires_grad iff any parent does.
  bool any_grad(std::initializer_list<Var> vars) const {
    if (!grad_enabled_) return false;
    for (Var v : vars)
      if (requires_grad(v)) return true;
    return false;
  }

  void backward(Var out) {
    Node& root = nodes_[std::size_t(out.id)];
    if (root.value.size() != 1) throw std::logic_error("autodiff: backward requires a scalar output");
    if (!root.requires_grad) throw std::logic_error("autodiff: output does not require grad");
    root.grad = Arr::Ones(1, 1);
    root.grad_init = true;
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[std::size_t(i)];
      if (n.requires_grad && n.grad_init && n.backward) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Arr value;
    Arr grad;
    bool grad_init = false;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("autodiff: variables from different tapes");
}

inline Var add(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  Arr v = t.value(a) + t.value(b);
  int pa = a.id, pb = b.id;
  return t.push(std::move(v), t.any_grad({a, b}), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    tp.accumulate(pa, g);
    tp.accumulate(pb, g);
  });
}

inline Var sub(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  Arr v = t.value(a) - t.value(b);
  int pa = a.id, pb = b.id;
  return t.push(std::move(v), t.any_grad({a, b}), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    tp.accumulate(pa, g);
    tp.accumulate(pb, Arr(-g));
  });
}

inline Var mul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  Arr v = t.value(a) * t.value(b);
  int pa = a.id, pb = b.id;
  return t.push(std::move(v), t.any_grad({a, b}), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    tp.accumulate(pa, Arr(g * tp.value(Var{&tp, pb})));
    tp.accumulate(pb, Arr(g * tp.value(Var{&tp, pa})));
  });
}

inline Var scale(Var a, double k) {
  Tape& t = *a.tape;
  Arr v = t.value(a) * k;
  int pa = a.id;
  return t.push(std::move(v), t.any_grad({a}), {pa}, [pa, k](Tape& tp, int self) {
    tp.accumulate(pa, Arr(tp.grad(Var{&tp, self}) * k));
  });
}

// W [m x k] times X [k x n].
inline Var matmul(Var w, Var x) {
  check_same_tape(w, x);
  Tape& t = *w.tape;
  Arr v = (t.value(w).matrix() * t.value(x).matrix()).array();
  int pw = w.id, px = x.id;
  return t.push(std::move(v), t.any_grad({w, x}), {pw, px}, [pw, px](Tape& tp, int self) {
    const auto& g = tp.grad(Var{&tp, self}).matrix();
    tp.accumulate(pw, (g * tp.value(Var{&tp, px}).matrix().transpose()).array());
    tp.accumulate(px, (tp.value(Var{&tp, pw}).matrix().transpose() * g).array());
  });
}

// Adds a column vector bias [C x 1] to every column of x [C x T].
inline Var add_bias(Var x, Var b) {
  check_same_tape(x, b);
  Tape& t = *x.tape;
  Arr v = t.value(x).colwise() + t.value(b).col(0);
  int px = x.id, pb = b.id;
  return t.push(std::move(v), t.any_grad({x, b}), {px, pb}, [px, pb](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    tp.accumulate(px, g);
    tp.accumulate(pb, Arr(g.rowwise().sum()));
  });
}

// PReLU with a learnable slope per channel (alpha [C x 1]).
inline Var prelu(Var x, Var alpha) {
  check_same_tape(x, alpha);
  Tape& t = *x.tape;
  const Arr& xv = t.value(x);
  Arr neg_slope = t.value(alpha).col(0).replicate(1, xv.cols());
  Arr v = (xv > 0.0).select(xv, xv * neg_slope);
  int px = x.id, pa = alpha.id;
  return t.push(std::move(v), t.any_grad({x, alpha}), {px, pa}, [px, pa](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    const Arr& xv = tp.value(Var{&tp, px});
    Arr slope = tp.value(Var{&tp, pa}).col(0).replicate(1, xv.cols());
    tp.accumulate(px, Arr((xv > 0.0).select(g, g * slope)));
    Arr da = ((xv > 0.0).select(Arr::Zero(xv.rows(), xv.cols()), g * xv)).rowwise().sum();
    tp.accumulate(pa, da);
  });
}

// Layer normalization across channels per time frame, with per-channel gain
// and bias ([C x 1] each).
inline Var chan_layernorm(Var x, Var gain, Var bias, double eps = 1e-5) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  Tape& t = *x.tape;
  const Arr& xv = t.value(x);
  const Eigen::Index c = xv.rows();
  Eigen::ArrayXd mean = xv.colwise().mean().transpose();
  Arr centered = xv.rowwise() - mean.transpose();
  Eigen::ArrayXd var = (centered * centered).colwise().mean().transpose();
  Eigen::ArrayXd inv_std = (var + eps).sqrt().inverse();
  Arr xhat = centered.rowwise() * inv_std.transpose();
  Arr v = (xhat.colwise() * t.value(gain).col(0)).colwise() + t.value(bias).col(0);
  int px = x.id, pg = gain.id, pb = bias.id;
  return t.push(std::move(v), t.any_grad({x, gain, bias}), {px, pg, pb},
                [px, pg, pb, xhat, inv_std, c](Tape& tp, int self) {
                  const Arr& g = tp.grad(Var{&tp, self});
                  tp.accumulate(pg, Arr((g * xhat).rowwise().sum()));
                  tp.accumulate(pb, Arr(g.rowwise().sum()));
                  Arr h = g.colwise() * tp.value(Var{&tp, pg}).col(0);
                  Eigen::ArrayXd mean_h = h.colwise().mean().transpose();
                  Eigen::ArrayXd mean_hx = (h * xhat).colwise().mean().transpose();
                  Arr dx = ((h.rowwise() - mean_h.transpose()) - (xhat.rowwise() * mean_hx.transpose()))
                               .rowwise() *
                           inv_std.transpose();
                  tp.accumulate(px, dx);
                });
}

// Depthwise 1-D convolution along time with kernel size K and the given
// dilation; zero padding keeps the output length equal to the input.
inline Var dilated_conv(Var x, Var w, int dilation) {
  check_same_tape(x, w);
  Tape& t = *x.tape;
  const Arr& xv = t.value(x);
  const Arr& wv = t.value(w);
  if (wv.rows() != xv.rows()) throw std::invalid_argument("dilated_conv: channel mismatch");
  const int k = int(wv.cols());
  const int c = int(xv.rows());
  const int n = int(xv.cols());
  const int half = (k - 1) / 2;
  Arr v = Arr::Zero(c, n);
  for (int j = 0; j < k; ++j) {
    const int off = (j - half) * dilation;
    const int lo = std::max(0, -off);
    const int hi = std::min(n, n - off);
    if (lo >= hi) continue;
    v.middleCols(lo, hi - lo) += xv.middleCols(lo + off, hi - lo).colwise() * wv.col(j);
  }
  int px = x.id, pw = w.id;
  return t.push(std::move(v), t.any_grad({x, w}), {px, pw},
                [px, pw, k, half, dilation, n, c](Tape& tp, int self) {
                  const Arr& g = tp.grad(Var{&tp, self});
                  const Arr& xv = tp.value(Var{&tp, px});
                  const Arr& wv = tp.value(Var{&tp, pw});
                  Arr dx = Arr::Zero(c, n);
                  Arr dw = Arr::Zero(c, k);
                  for (int j = 0; j < k; ++j) {
                    const int off = (j - half) * dilation;
                    const int lo = std::max(0, -off);
                    const int hi = std::min(n, n - off);
                    if (lo >= hi) continue;
                    dx.middleCols(lo + off, hi - lo) += g.middleCols(lo, hi - lo).colwise() * wv.col(j);
                    dw.col(j) += (g.middleCols(lo, hi - lo) * xv.middleCols(lo + off, hi - lo)).rowwise().sum();
                  }
                  tp.accumulate(px, dx);
                  tp.accumulate(pw, dw);
                });
}

// Softmax across K groups of F rows, per (frequency, frame) bin. Input and
// output are stacked [(K*F) x T]; group k occupies rows [k*F, (k+1)*F).
inline Var group_softmax(Var logits, int groups) {
  Tape& t = *logits.tape;
  const Arr& z = t.value(logits);
  if (z.rows() % groups != 0) throw std::invalid_argument("group_softmax: rows not divisible by groups");
  const int f = int(z.rows()) / groups;
  const int cols = int(z.cols());
  Arr m = z.block(0, 0, f, cols);
  for (int k = 1; k < groups; ++k) m = m.max(z.block(k * f, 0, f, cols));
  Arr e(z.rows(), cols);
  for (int k = 0; k < groups; ++k) e.block(k * f, 0, f, cols) = (z.block(k * f, 0, f, cols) - m).exp();
  Arr denom = e.block(0, 0, f, cols);
  for (int k = 1; k < groups; ++k) denom += e.block(k * f, 0, f, cols);
  Arr s(z.rows(), cols);
  for (int k = 0; k < groups; ++k) s.block(k * f, 0, f, cols) = e.block(k * f, 0, f, cols) / denom;
  int pz = logits.id;
  return t.push(std::move(s), t.any_grad({logits}), {pz}, [pz, groups, f, cols](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    const Arr& s = tp.value(Var{&tp, self});
    Arr dot = (g.block(0, 0, f, cols) * s.block(0, 0, f, cols));
    for (int k = 1; k < groups; ++k) dot += g.block(k * f, 0, f, cols) * s.block(k * f, 0, f, cols);
    Arr dz(g.rows(), cols);
    for (int k = 0; k < groups; ++k)
      dz.block(k * f, 0, f, cols) = s.block(k * f, 0, f, cols) * (g.block(k * f, 0, f, cols) - dot);
    tp.accumulate(pz, dz);
  });
}

inline Var slice_rows(Var x, int row0, int nrows) {
  Tape& t = *x.tape;
  Arr v = t.value(x).middleRows(row0, nrows);
  int px = x.id;
  return t.push(std::move(v), t.any_grad({x}), {px}, [px, row0, nrows](Tape& tp, int self) {
    const Arr& g = tp.grad(Var{&tp, self});
    const Arr& xv = tp.value(Var{&tp, px});
    Arr dx = Arr::Zero(xv.rows(), xv.cols());
    dx.middleRows(row0, nrows) = g;
    tp.accumulate(px, dx);
  });
}

// Differentiable iSTFT in the magnitude at fixed phase. Output is [1 x L].
inline Var istft_mag(Var magnitude, const Arr& phase, const StftConfig& cfg, std::size_t num_samples) {
  Tape& t = *magnitude.tape;
  std::vector<double> wave = dsp::synthesize(t.value(magnitude), phase, cfg, num_samples);
  Arr v = Eigen::Map<const Eigen::ArrayXXd>(wave.data(), 1, Eigen::Index(wave.size()));
  int pm = magnitude.id;
  return t.push(std::move(v), t.any_grad({magnitude}), {pm},
                [pm, phase, cfg, num_samples](Tape& tp, int self) {
                  const Arr& g = tp.grad(Var{&tp, self});
                  std::vector<double> grad_wave(g.data(), g.data() + g.size());
                  tp.accumulate(pm, dsp::synthesize_adjoint(grad_wave, phase, cfg, num_samples));
                });
}

// Thresholded negative SNR against a constant reference; est is [1 x L].
inline Var neg_snr(std::span<const double> ref, Var est, const LossConfig& cfg = {}) {
  Tape& t = *est.tape;
  const Arr& e = t.value(est);
  std::span<const double> est_span(e.data(), std::size_t(e.size()));
  double loss = metrics::neg_thresholded_snr(ref, est_span, cfg);
  Arr v(1, 1);
  v(0, 0) = loss;
  int pe = est.id;
  std::vector<double> ref_copy(ref.begin(), ref.end());
  return t.push(std::move(v), t.any_grad({est}), {pe},
                [pe, ref_copy = std::move(ref_copy), cfg](Tape& tp, int self) {
                  const Arr& ev = tp.value(Var{&tp, pe});
                  std::span<const double> est_span(ev.data(), std::size_t(ev.size()));
                  auto g = metrics::neg_thresholded_snr_grad(ref_copy, est_span, cfg);
                  double scale = tp.grad(Var{&tp, self})(0, 0);
                  Arr dg = Eigen::Map<const Eigen::ArrayXXd>(g.data(), ev.rows(), ev.cols()) * scale;
                  tp.accumulate(pe, dg);
                });
}

inline std::span<const double> as_span(const Tape& t, Var v) {
  const Arr& a = t.value(v);
  return {a.data(), std::size_t(a.size())};
}

}  // namespace mixsep::ad
