#include <algorithm>
#include <cmath>
#include <utility>

#include "hesskit/fp16.hpp"
#include "hesskit/tape.hpp"

namespace hesskit {
namespace ops {
namespace {

void round_inplace(Tensor& t) {
  for (double& v : t.values()) v = round_fp16(v);
  t.set_precision(Precision::FP16EMU);
}

using BackFn = std::function<void(Tape&, GradientSink&, const Tensor&)>;

// Narrowing cast recorded on the tape. The backward relays the (wide)
// adjoint to the source unchanged, so gradients keep flowing through the
// rounded copy the kernels actually read.
Tensor cast_fp16(Tape& tape, const Tensor& x) {
  Tensor out = x.detached_clone();
  round_inplace(out);
  out.set_requires_grad(x.requires_grad());
  if (tape.recording) {
    Node n;
    n.output = out;
    n.kept = {x};
    n.precision = Precision::FP16EMU;
    n.backward = [x](Tape& t, GradientSink& gs, const Tensor& up) {
      if (gs.wants(x)) gs.add(t, x, up);
    };
    tape.record(std::move(n));
  }
  return out;
}

// Forward inputs of a reduced-precision op pass through the binary16 rounder
// before the kernel reads them. Tensors already produced at FP16EMU hold
// binary16 values and are used as-is, and the backward sweep never pre-rounds
// (adjoints stay wide until an output rounding).
Tensor prep(Tape& tape, const Tensor& x, Precision p) {
  if (p == Precision::FP32 || x.precision() == Precision::FP16EMU || tape.in_backward) return x;
  if (tape.recording && x.requires_grad()) return cast_fp16(tape, x);
  Tensor c = x.detached_clone();
  round_inplace(c);
  return c;
}

void check(bool cond, const std::string& what) {
  if (!cond) raise(Errc::ShapeMismatch, what);
}

void check_valid(Tape& tape, const Tensor& t) {
  if (t.node() >= 0 && !tape.valid_ref(t))
    throw std::logic_error("op input references a node no longer on the tape");
}

Tensor finish(Tape& tape, Precision prec, Tensor out, std::vector<Tensor> keep,
              const std::vector<Tensor>& originals, BackFn back) {
  bool rg = false;
  for (const auto& o : originals) {
    check_valid(tape, o);
    rg = rg || o.requires_grad();
  }
  if (prec == Precision::FP16EMU) round_inplace(out);
  out.set_requires_grad(rg);
  if (tape.recording) {
    Node n;
    n.backward = std::move(back);
    n.output = out;
    n.kept = std::move(keep);
    n.precision = prec;
    tape.record(std::move(n));
  }
  return out;
}

int64_t channel_extent(const Tensor& x) {
  check(x.rank() == 2 || x.rank() == 4, "channel op expects rank 2 or 4");
  return x.extent(1);
}

}  // namespace

Tensor constant(std::vector<int64_t> shape, std::vector<double> v) {
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  const int64_t m = trans_a ? a.extent(1) : a.extent(0);
  const int64_t k = trans_a ? a.extent(0) : a.extent(1);
  const int64_t k2 = trans_b ? b.extent(1) : b.extent(0);
  const int64_t n = trans_b ? b.extent(0) : b.extent(1);
  check(k == k2, "matmul inner extents differ");

  const Precision prec = tape.precision();
  Tensor ar = prep(tape, a, prec), br = prep(tape, b, prec);
  Tensor out = Tensor::zeros({m, n});
  const double* pa = ar.data();
  const double* pb = br.data();
  double* po = out.data();
  const int64_t lda = a.extent(1), ldb = b.extent(1);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = trans_a ? pa[kk * lda + i] : pa[i * lda + kk];
        const double bv = trans_b ? pb[j * ldb + kk] : pb[kk * ldb + j];
        acc += av * bv;
      }
      po[i * n + j] = acc;
    }
  }
  return finish(tape, prec, out, {ar, br}, {ar, br},
                [ar, br, trans_a, trans_b](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(ar)) {
                    Tensor da = trans_a ? matmul(t, br, up, trans_b, true)
                                        : matmul(t, up, br, false, !trans_b);
                    gs.add(t, ar, da);
                  }
                  if (gs.wants(br)) {
                    Tensor db = trans_b ? matmul(t, up, ar, true, trans_a)
                                        : matmul(t, ar, up, !trans_a, false);
                    gs.add(t, br, db);
                  }
                });
}

namespace {

struct ConvDims {
  int64_t n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  check(x.rank() == 4 && w.rank() == 4, "conv2d expects rank-4 input and weight");
  check(x.extent(1) == w.extent(1), "conv2d channel mismatch");
  check(stride >= 1 && pad >= 0, "conv2d bad stride or pad");
  ConvDims d;
  d.n = x.extent(0);
  d.c = x.extent(1);
  d.h = x.extent(2);
  d.w = x.extent(3);
  d.o = w.extent(0);
  d.kh = w.extent(2);
  d.kw = w.extent(3);
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  check(d.ho >= 1 && d.wo >= 1, "conv2d output would be empty");
  return d;
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d = conv_dims(x, w, stride, pad);
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec), wr = prep(tape, w, prec);
  Tensor out = Tensor::zeros({d.n, d.o, d.ho, d.wo});
  const double* px = xr.data();
  const double* pw = wr.data();
  double* py = out.data();
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t o = 0; o < d.o; ++o)
      for (int64_t c = 0; c < d.c; ++c) {
        const double* wbase = pw + ((o * d.c + c) * d.kh) * d.kw;
        const double* xbase = px + ((n * d.c + c) * d.h) * d.w;
        double* ybase = py + ((n * d.o + o) * d.ho) * d.wo;
        for (int64_t ho = 0; ho < d.ho; ++ho)
          for (int64_t wo = 0; wo < d.wo; ++wo) {
            double acc = 0.0;
            for (int64_t i = 0; i < d.kh; ++i) {
              const int64_t hh = ho * d.stride - d.pad + i;
              if (hh < 0 || hh >= d.h) continue;
              for (int64_t j = 0; j < d.kw; ++j) {
                const int64_t ww = wo * d.stride - d.pad + j;
                if (ww < 0 || ww >= d.w) continue;
                acc += xbase[hh * d.w + ww] * wbase[i * d.kw + j];
              }
            }
            ybase[ho * d.wo + wo] += acc;
          }
      }
  const int64_t in_h = d.h, in_w = d.w, kh = d.kh, kw = d.kw;
  return finish(tape, prec, out, {xr, wr}, {xr, wr},
                [xr, wr, stride, pad, in_h, in_w, kh, kw](Tape& t, GradientSink& gs,
                                                          const Tensor& up) {
                  if (gs.wants(xr))
                    gs.add(t, xr, conv2d_input_grad(t, up, wr, stride, pad, in_h, in_w));
                  if (gs.wants(wr))
                    gs.add(t, wr, conv2d_weight_grad(t, xr, up, stride, pad, kh, kw));
                });
}

Tensor conv2d_input_grad(Tape& tape, const Tensor& dy, const Tensor& w, int stride, int pad,
                         int64_t in_h, int64_t in_w) {
  check(dy.rank() == 4 && w.rank() == 4, "conv2d_input_grad expects rank-4 operands");
  check(dy.extent(1) == w.extent(0), "conv2d_input_grad channel mismatch");
  const int64_t n = dy.extent(0), o = dy.extent(1), ho = dy.extent(2), wo = dy.extent(3);
  const int64_t c = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const Precision prec = tape.precision();
  Tensor dyr = prep(tape, dy, prec), wr = prep(tape, w, prec);
  Tensor out = Tensor::zeros({n, c, in_h, in_w});
  const double* pd = dyr.data();
  const double* pw = wr.data();
  double* po = out.data();
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t oo = 0; oo < o; ++oo)
      for (int64_t cc = 0; cc < c; ++cc) {
        const double* wbase = pw + ((oo * c + cc) * kh) * kw;
        const double* dbase = pd + ((nn * o + oo) * ho) * wo;
        double* obase = po + ((nn * c + cc) * in_h) * in_w;
        for (int64_t hh = 0; hh < ho; ++hh)
          for (int64_t ww = 0; ww < wo; ++ww) {
            const double g = dbase[hh * wo + ww];
            if (g == 0.0) continue;
            for (int64_t i = 0; i < kh; ++i) {
              const int64_t ih = hh * stride - pad + i;
              if (ih < 0 || ih >= in_h) continue;
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t iw = ww * stride - pad + j;
                if (iw < 0 || iw >= in_w) continue;
                obase[ih * in_w + iw] += g * wbase[i * kw + j];
              }
            }
          }
      }
  return finish(tape, prec, out, {dyr, wr}, {dyr, wr},
                [dyr, wr, stride, pad, kh, kw](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(dyr)) gs.add(t, dyr, conv2d(t, up, wr, stride, pad));
                  if (gs.wants(wr))
                    gs.add(t, wr, conv2d_weight_grad(t, up, dyr, stride, pad, kh, kw));
                });
}

Tensor conv2d_weight_grad(Tape& tape, const Tensor& x, const Tensor& dy, int stride, int pad,
                          int64_t kh, int64_t kw) {
  check(x.rank() == 4 && dy.rank() == 4, "conv2d_weight_grad expects rank-4 operands");
  check(x.extent(0) == dy.extent(0), "conv2d_weight_grad batch mismatch");
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const int64_t o = dy.extent(1), ho = dy.extent(2), wo = dy.extent(3);
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec), dyr = prep(tape, dy, prec);
  Tensor out = Tensor::zeros({o, c, kh, kw});
  const double* px = xr.data();
  const double* pd = dyr.data();
  double* po = out.data();
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t oo = 0; oo < o; ++oo)
      for (int64_t cc = 0; cc < c; ++cc) {
        const double* xbase = px + ((nn * c + cc) * h) * w;
        const double* dbase = pd + ((nn * o + oo) * ho) * wo;
        double* obase = po + ((oo * c + cc) * kh) * kw;
        for (int64_t hh = 0; hh < ho; ++hh)
          for (int64_t ww = 0; ww < wo; ++ww) {
            const double g = dbase[hh * wo + ww];
            if (g == 0.0) continue;
            for (int64_t i = 0; i < kh; ++i) {
              const int64_t ih = hh * stride - pad + i;
              if (ih < 0 || ih >= h) continue;
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t iw = ww * stride - pad + j;
                if (iw < 0 || iw >= w) continue;
                obase[i * kw + j] += g * xbase[ih * w + iw];
              }
            }
          }
      }
  const int64_t in_h = h, in_w = w;
  return finish(tape, prec, out, {xr, dyr}, {xr, dyr},
                [xr, dyr, stride, pad, in_h, in_w](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr))
                    gs.add(t, xr, conv2d_input_grad(t, dyr, up, stride, pad, in_h, in_w));
                  if (gs.wants(dyr)) gs.add(t, dyr, conv2d(t, xr, up, stride, pad));
                });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add shape mismatch");
  const Precision prec = tape.precision();
  Tensor ar = prep(tape, a, prec), br = prep(tape, b, prec);
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = ar.data()[i] + br.data()[i];
  return finish(tape, prec, out, {ar, br}, {ar, br},
                [ar, br](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(ar)) gs.add(t, ar, up);
                  if (gs.wants(br)) gs.add(t, br, up);
                });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub shape mismatch");
  const Precision prec = tape.precision();
  Tensor ar = prep(tape, a, prec), br = prep(tape, b, prec);
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = ar.data()[i] - br.data()[i];
  return finish(tape, prec, out, {ar, br}, {ar, br},
                [ar, br](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(ar)) gs.add(t, ar, up);
                  if (gs.wants(br)) gs.add(t, br, neg(t, up));
                });
}

Tensor neg(Tape& tape, const Tensor& x) {
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = -xr.data()[i];
  return finish(tape, prec, out, {xr}, {xr},
                [xr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, neg(t, up));
                });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul shape mismatch");
  const Precision prec = tape.precision();
  Tensor ar = prep(tape, a, prec), br = prep(tape, b, prec);
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = ar.data()[i] * br.data()[i];
  return finish(tape, prec, out, {ar, br}, {ar, br},
                [ar, br](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(ar)) gs.add(t, ar, mul(t, up, br));
                  if (gs.wants(br)) gs.add(t, br, mul(t, up, ar));
                });
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = c * xr.data()[i];
  return finish(tape, prec, out, {xr}, {xr},
                [xr, c](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, scale(t, up, c));
                });
}

Tensor scalar_mul(Tape& tape, const Tensor& s, const Tensor& x) {
  check(s.numel() == 1, "scalar_mul expects a scalar multiplier");
  const Precision prec = tape.precision();
  Tensor sr = prep(tape, s, prec), xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros(x.shape());
  const double sv = sr.data()[0];
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = sv * xr.data()[i];
  return finish(tape, prec, out, {sr, xr}, {sr, xr},
                [sr, xr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(sr)) gs.add(t, sr, sum_all(t, mul(t, up, xr)));
                  if (gs.wants(xr)) gs.add(t, xr, scalar_mul(t, sr, up));
                });
}

Tensor scalar_bcast(Tape& tape, const Tensor& s, std::vector<int64_t> shape) {
  check(s.numel() == 1, "scalar_bcast expects a scalar");
  const Precision prec = tape.precision();
  Tensor sr = prep(tape, s, prec);
  Tensor out = Tensor::zeros(shape);
  const double sv = sr.data()[0];
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = sv;
  return finish(tape, prec, out, {sr}, {sr},
                [sr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(sr)) gs.add(t, sr, sum_all(t, up));
                });
}

Tensor relu(Tape& tape, const Tensor& x) {
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = xr.data()[i] > 0.0 ? xr.data()[i] : 0.0;
  return finish(tape, prec, out, {xr}, {xr},
                [xr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (!gs.wants(xr)) return;
                  Tensor mask = Tensor::zeros(xr.shape());
                  for (int64_t i = 0; i < mask.numel(); ++i)
                    mask.data()[i] = xr.data()[i] > 0.0 ? 1.0 : 0.0;
                  gs.add(t, xr, mul(t, up, mask));
                });
}

Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& b) {
  const int64_t c = channel_extent(x);
  check(b.rank() == 1 && b.extent(0) == c, "bias_add bias extent mismatch");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec), br = prep(tape, b, prec);
  Tensor out = Tensor::zeros(x.shape());
  const int64_t inner = x.rank() == 4 ? x.extent(2) * x.extent(3) : 1;
  const int64_t n = x.extent(0);
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double bv = br.data()[cc];
      double* base = out.data() + (nn * c + cc) * inner;
      const double* xb = xr.data() + (nn * c + cc) * inner;
      for (int64_t i = 0; i < inner; ++i) base[i] = xb[i] + bv;
    }
  return finish(tape, prec, out, {xr, br}, {xr, br},
                [xr, br](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, up);
                  if (gs.wants(br)) gs.add(t, br, channel_reduce(t, up));
                });
}

Tensor channel_reduce(Tape& tape, const Tensor& x) {
  const int64_t c = channel_extent(x);
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros({c});
  const int64_t inner = x.rank() == 4 ? x.extent(2) * x.extent(3) : 1;
  const int64_t n = x.extent(0);
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double* xb = xr.data() + (nn * c + cc) * inner;
      double acc = 0.0;
      for (int64_t i = 0; i < inner; ++i) acc += xb[i];
      out.data()[cc] += acc;
    }
  auto shape = x.shape();
  return finish(tape, prec, out, {xr}, {xr},
                [xr, shape](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, channel_bcast(t, up, shape));
                });
}

Tensor channel_bcast(Tape& tape, const Tensor& v, std::vector<int64_t> shape) {
  check(v.rank() == 1, "channel_bcast expects a rank-1 vector");
  check(shape.size() == 2 || shape.size() == 4, "channel_bcast target must be rank 2 or 4");
  check(shape[1] == v.extent(0), "channel_bcast extent mismatch");
  const Precision prec = tape.precision();
  Tensor vr = prep(tape, v, prec);
  Tensor out = Tensor::zeros(shape);
  const int64_t c = shape[1];
  const int64_t inner = shape.size() == 4 ? shape[2] * shape[3] : 1;
  const int64_t n = shape[0];
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      double* base = out.data() + (nn * c + cc) * inner;
      for (int64_t i = 0; i < inner; ++i) base[i] = vr.data()[cc];
    }
  return finish(tape, prec, out, {vr}, {vr},
                [vr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(vr)) gs.add(t, vr, channel_reduce(t, up));
                });
}

Tensor channel_mul(Tape& tape, const Tensor& x, const Tensor& s) {
  const int64_t c = channel_extent(x);
  check(s.rank() == 1 && s.extent(0) == c, "channel_mul scale extent mismatch");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec), sr = prep(tape, s, prec);
  Tensor out = Tensor::zeros(x.shape());
  const int64_t inner = x.rank() == 4 ? x.extent(2) * x.extent(3) : 1;
  const int64_t n = x.extent(0);
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double sv = sr.data()[cc];
      double* base = out.data() + (nn * c + cc) * inner;
      const double* xb = xr.data() + (nn * c + cc) * inner;
      for (int64_t i = 0; i < inner; ++i) base[i] = xb[i] * sv;
    }
  return finish(tape, prec, out, {xr, sr}, {xr, sr},
                [xr, sr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, channel_mul(t, up, sr));
                  if (gs.wants(sr)) gs.add(t, sr, channel_reduce(t, mul(t, up, xr)));
                });
}

Tensor spatial_sum(Tape& tape, const Tensor& x) {
  check(x.rank() == 4, "spatial_sum expects rank-4 input");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  const int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor out = Tensor::zeros({n, c});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* xb = xr.data() + nc * hw;
    double acc = 0.0;
    for (int64_t i = 0; i < hw; ++i) acc += xb[i];
    out.data()[nc] = acc;
  }
  const int64_t h = x.extent(2), w = x.extent(3);
  return finish(tape, prec, out, {xr}, {xr},
                [xr, h, w](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, spatial_bcast(t, up, h, w));
                });
}

Tensor spatial_bcast(Tape& tape, const Tensor& x, int64_t h, int64_t w) {
  check(x.rank() == 2, "spatial_bcast expects rank-2 input");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  const int64_t n = x.extent(0), c = x.extent(1);
  Tensor out = Tensor::zeros({n, c, h, w});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    double* base = out.data() + nc * h * w;
    for (int64_t i = 0; i < h * w; ++i) base[i] = xr.data()[nc];
  }
  return finish(tape, prec, out, {xr}, {xr},
                [xr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, spatial_sum(t, up));
                });
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<int64_t> shape) {
  check(shape_numel(shape) == x.numel(), "reshape changes element count");
  // pure data movement: no rounding regardless of mode
  Tensor out = Tensor::from(shape, x.values(), x.precision());
  auto orig_shape = x.shape();
  return finish(tape, x.precision(), out, {x}, {x},
                [x, orig_shape](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(x)) gs.add(t, x, reshape(t, up, orig_shape));
                });
}

Tensor sum_all(Tape& tape, const Tensor& x) {
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  double acc = 0.0;
  for (int64_t i = 0; i < xr.numel(); ++i) acc += xr.data()[i];
  Tensor out = Tensor::scalar(acc);
  auto shape = x.shape();
  return finish(tape, prec, out, {xr}, {xr},
                [xr, shape](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, scalar_bcast(t, up, shape));
                });
}

Tensor row_sum_bcast(Tape& tape, const Tensor& x) {
  check(x.rank() == 2, "row_sum_bcast expects rank-2 input");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  const int64_t n = x.extent(0), c = x.extent(1);
  Tensor out = Tensor::zeros({n, c});
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < c; ++j) acc += xr.data()[i * c + j];
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = acc;
  }
  return finish(tape, prec, out, {xr}, {xr},
                [xr](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (gs.wants(xr)) gs.add(t, xr, row_sum_bcast(t, up));
                });
}

Tensor row_softmax(Tape& tape, const Tensor& z) {
  check(z.rank() == 2, "row_softmax expects rank-2 logits");
  PrecisionGuard wide(tape, Precision::FP32);  // softmax stays wide
  const int64_t n = z.extent(0), c = z.extent(1);
  Tensor out = Tensor::zeros({n, c});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    double m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = std::exp(row[j] - m) / denom;
  }
  return finish(tape, Precision::FP32, out, {z}, {z},
                [z, out](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (!gs.wants(z)) return;
                  Tensor inner = row_sum_bcast(t, mul(t, up, out));
                  gs.add(t, z, mul(t, out, sub(t, up, inner)));
                });
}

Tensor softmax_xent(Tape& tape, const Tensor& z, const std::vector<int>& labels) {
  check(z.rank() == 2, "softmax_xent expects rank-2 logits");
  const int64_t n = z.extent(0), c = z.extent(1);
  check(static_cast<int64_t>(labels.size()) == n, "softmax_xent label count mismatch");
  for (int v : labels) check(v >= 0 && v < c, "softmax_xent label out of range");
  PrecisionGuard wide(tape, Precision::FP32);  // loss stays wide
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    double m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
    total += m + std::log(denom) - row[labels[static_cast<size_t>(i)]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  return finish(tape, Precision::FP32, out, {z}, {z},
                [z, labels, n, c](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (!gs.wants(z)) return;
                  Tensor p = row_softmax(t, z);
                  std::vector<double> oh(static_cast<size_t>(n * c), 0.0);
                  for (int64_t i = 0; i < n; ++i)
                    oh[static_cast<size_t>(i * c + labels[static_cast<size_t>(i)])] = 1.0;
                  Tensor onehot = constant({n, c}, std::move(oh));
                  Tensor g = scale(t, sub(t, p, onehot), 1.0 / static_cast<double>(n));
                  gs.add(t, z, scalar_mul(t, up, g));
                });
}

Tensor batchnorm_train(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps, std::vector<double>* batch_mean,
                       std::vector<double>* batch_var) {
  const int64_t c = channel_extent(x);
  check(gamma.rank() == 1 && gamma.extent(0) == c, "batchnorm gamma extent mismatch");
  check(beta.rank() == 1 && beta.extent(0) == c, "batchnorm beta extent mismatch");
  PrecisionGuard wide(tape, Precision::FP32);  // normalization stays wide
  const int64_t n = x.extent(0);
  const int64_t inner = x.rank() == 4 ? x.extent(2) * x.extent(3) : 1;
  const int64_t m = n * inner;

  std::vector<double> mean(static_cast<size_t>(c), 0.0), var(static_cast<size_t>(c), 0.0);
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double* xb = x.data() + (nn * c + cc) * inner;
      for (int64_t i = 0; i < inner; ++i) mean[static_cast<size_t>(cc)] += xb[i];
    }
  for (auto& v : mean) v /= static_cast<double>(m);
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double* xb = x.data() + (nn * c + cc) * inner;
      const double mu = mean[static_cast<size_t>(cc)];
      for (int64_t i = 0; i < inner; ++i) {
        const double d = xb[i] - mu;
        var[static_cast<size_t>(cc)] += d * d;
      }
    }
  for (auto& v : var) v /= static_cast<double>(m);
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  std::vector<double> invstd(static_cast<size_t>(c));
  for (int64_t cc = 0; cc < c; ++cc)
    invstd[static_cast<size_t>(cc)] = 1.0 / std::sqrt(var[static_cast<size_t>(cc)] + eps);

  Tensor xhat = Tensor::zeros(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t nn = 0; nn < n; ++nn)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double* xb = x.data() + (nn * c + cc) * inner;
      double* hb = xhat.data() + (nn * c + cc) * inner;
      double* ob = out.data() + (nn * c + cc) * inner;
      const double mu = mean[static_cast<size_t>(cc)];
      const double is = invstd[static_cast<size_t>(cc)];
      const double g = gamma.data()[cc];
      const double bv = beta.data()[cc];
      for (int64_t i = 0; i < inner; ++i) {
        hb[i] = (xb[i] - mu) * is;
        ob[i] = g * hb[i] + bv;
      }
    }

  return finish(
      tape, Precision::FP32, out, {x, xhat, gamma, beta}, {x, gamma, beta},
      [x, gamma, beta, xhat, invstd, n, c, inner, m](Tape& t, GradientSink& gs,
                                                     const Tensor& up) {
        if (t.recording)
          raise(Errc::UnsupportedSecondOrder,
                "batch-statistics normalization supports first-order backward only");
        std::vector<double> dgamma(static_cast<size_t>(c), 0.0),
            dbeta(static_cast<size_t>(c), 0.0), dxhat_sum(static_cast<size_t>(c), 0.0),
            dxhat_dot(static_cast<size_t>(c), 0.0);
        for (int64_t nn = 0; nn < n; ++nn)
          for (int64_t cc = 0; cc < c; ++cc) {
            const double* ub = up.data() + (nn * c + cc) * inner;
            const double* hb = xhat.data() + (nn * c + cc) * inner;
            const double g = gamma.data()[cc];
            for (int64_t i = 0; i < inner; ++i) {
              dgamma[static_cast<size_t>(cc)] += ub[i] * hb[i];
              dbeta[static_cast<size_t>(cc)] += ub[i];
              dxhat_sum[static_cast<size_t>(cc)] += ub[i] * g;
              dxhat_dot[static_cast<size_t>(cc)] += ub[i] * g * hb[i];
            }
          }
        if (gs.wants(x)) {
          Tensor dx = Tensor::zeros(x.shape());
          for (int64_t nn = 0; nn < n; ++nn)
            for (int64_t cc = 0; cc < c; ++cc) {
              const double* ub = up.data() + (nn * c + cc) * inner;
              const double* hb = xhat.data() + (nn * c + cc) * inner;
              double* db = dx.data() + (nn * c + cc) * inner;
              const double g = gamma.data()[cc];
              const double is = invstd[static_cast<size_t>(cc)];
              const double s1 = dxhat_sum[static_cast<size_t>(cc)];
              const double s2 = dxhat_dot[static_cast<size_t>(cc)];
              for (int64_t i = 0; i < inner; ++i) {
                const double dxh = ub[i] * g;
                db[i] = is * (dxh - (s1 + hb[i] * s2) / static_cast<double>(m));
              }
            }
          gs.add(t, x, dx);
        }
        if (gs.wants(gamma)) gs.add(t, gamma, Tensor::from({c}, dgamma));
        if (gs.wants(beta)) gs.add(t, beta, Tensor::from({c}, dbeta));
      });
}

Tensor batchnorm_eval(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& rmean, const std::vector<double>& rvar,
                      double eps) {
  const int64_t c = channel_extent(x);
  check(gamma.rank() == 1 && gamma.extent(0) == c, "batchnorm gamma extent mismatch");
  check(static_cast<int64_t>(rmean.size()) == c && static_cast<int64_t>(rvar.size()) == c,
        "batchnorm running stats extent mismatch");
  std::vector<double> invstd(rvar.size());
  for (size_t i = 0; i < rvar.size(); ++i) invstd[i] = 1.0 / std::sqrt(rvar[i] + eps);
  Tensor invstd_c = constant({c}, std::move(invstd));
  Tensor rmean_c = constant({c}, rmean);
  Tensor s = mul(tape, gamma, invstd_c);
  Tensor shift = sub(tape, beta, mul(tape, rmean_c, s));
  return bias_add(tape, channel_mul(tape, x, s), shift);
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  check(x.rank() == 4, "global_avg_pool expects rank-4 input");
  const double hw = static_cast<double>(x.extent(2) * x.extent(3));
  return scale(tape, spatial_sum(tape, x), 1.0 / hw);
}

Tensor flatten(Tape& tape, const Tensor& x) {
  check(x.rank() >= 2, "flatten expects a batch dimension");
  return reshape(tape, x, {x.extent(0), x.numel() / x.extent(0)});
}

Tensor fake_quant_op(Tape& tape, const Tensor& x, double s, int32_t z, int qmin, int qmax,
                     double alpha, double beta) {
  check(s > 0.0, "fake_quant scale must be positive");
  const Precision prec = tape.precision();
  Tensor xr = prep(tape, x, prec);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double r = xr.data()[i] / s;
    double q = std::floor(r);
    const double frac = r - q;
    if (frac > 0.5 || (frac == 0.5 && std::fmod(q, 2.0) != 0.0)) q += 1.0;
    q -= static_cast<double>(z);
    q = std::min(std::max(q, static_cast<double>(qmin)), static_cast<double>(qmax));
    out.data()[i] = s * (q + static_cast<double>(z));
  }
  return finish(tape, prec, out, {xr}, {xr},
                [xr, alpha, beta](Tape& t, GradientSink& gs, const Tensor& up) {
                  if (!gs.wants(xr)) return;
                  Tensor mask = Tensor::zeros(xr.shape());
                  for (int64_t i = 0; i < mask.numel(); ++i) {
                    const double v = xr.data()[i];
                    mask.data()[i] = (v >= alpha && v <= beta) ? 1.0 : 0.0;
                  }
                  gs.add(t, xr, mul(t, up, mask));
                });
}

}  // namespace ops

Tensor primitive_forward(Tape& tape, const std::string& kind, const std::vector<Tensor>& inputs,
                         const PrimitiveAttrs& attrs) {
  auto need = [&](size_t n) {
    if (inputs.size() != n)
      raise(Errc::ShapeMismatch, kind + " expects " + std::to_string(n) + " inputs");
  };
  if (kind == "matmul") {
    need(2);
    return ops::matmul(tape, inputs[0], inputs[1]);
  }
  if (kind == "conv2d") {
    need(2);
    return ops::conv2d(tape, inputs[0], inputs[1], attrs.stride, attrs.pad);
  }
  if (kind == "bias-add") {
    need(2);
    return ops::bias_add(tape, inputs[0], inputs[1]);
  }
  if (kind == "add") {
    need(2);
    return ops::add(tape, inputs[0], inputs[1]);
  }
  if (kind == "mul") {
    need(2);
    return ops::mul(tape, inputs[0], inputs[1]);
  }
  if (kind == "relu") {
    need(1);
    return ops::relu(tape, inputs[0]);
  }
  if (kind == "batch-norm") {
    need(5);
    return ops::batchnorm_eval(tape, inputs[0], inputs[1], inputs[2], inputs[3].values(),
                               inputs[4].values(), attrs.eps);
  }
  if (kind == "global-average-pool") {
    need(1);
    return ops::global_avg_pool(tape, inputs[0]);
  }
  if (kind == "flatten") {
    need(1);
    return ops::flatten(tape, inputs[0]);
  }
  if (kind == "softmax-cross-entropy") {
    need(1);
    return ops::softmax_xent(tape, inputs[0], attrs.labels);
  }
  raise(Errc::UnknownPrimitive, "no primitive named '" + kind + "'");
}

}  // namespace hesskit
