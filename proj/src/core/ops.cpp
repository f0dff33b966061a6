#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/core/tape.hpp"

namespace chunkflow {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("Var is not bound to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw ContractError("operands live on different tapes");
  return t;
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (Index i = 0; i < src.numel(); ++i) dst[i] += src[i];
}

// Index maps from a broadcast result back into each operand.
struct Broadcast {
  Shape out;
  std::vector<Index> a_index;
  std::vector<Index> b_index;
  bool trivial = false;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.trivial = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& s) {
    std::vector<Index> st(rank, 0);
    Index acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto sa = strides(pa);
  const auto sb = strides(pb);
  const Index n = shape_numel(bc.out);
  bc.a_index.resize(static_cast<std::size_t>(n));
  bc.b_index.resize(static_cast<std::size_t>(n));
  std::vector<Index> counter(rank, 0);
  Index ia = 0, ib = 0;
  for (Index flat = 0; flat < n; ++flat) {
    bc.a_index[static_cast<std::size_t>(flat)] = ia;
    bc.b_index[static_cast<std::size_t>(flat)] = ib;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (counter[ax] < bc.out[ax]) break;
      ia -= sa[ax] * counter[ax];
      ib -= sb[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return bc;
}

enum class BinaryKind { kAdd, kSub, kMul };

Var binary(Var a, Var b, BinaryKind kind) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto bc = std::make_shared<Broadcast>(make_broadcast(av.shape, bv.shape));
  Tensor out(bc->out);
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) {
    const double x = bc->trivial ? av[i] : av[bc->a_index[static_cast<std::size_t>(i)]];
    const double y = bc->trivial ? bv[i] : bv[bc->b_index[static_cast<std::size_t>(i)]];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
    }
  }
  const int ia = a.id, ib = b.id;
  return t.record(std::move(out), {ia, ib}, [ia, ib, bc, kind](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    const Index n = g.numel();
    auto ai = [&](Index i) { return bc->trivial ? i : bc->a_index[static_cast<std::size_t>(i)]; };
    auto bi = [&](Index i) { return bc->trivial ? i : bc->b_index[static_cast<std::size_t>(i)]; };
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_buffer(ia);
      for (Index i = 0; i < n; ++i) {
        ga[ai(i)] += kind == BinaryKind::kMul ? g[i] * bv[bi(i)] : g[i];
      }
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      for (Index i = 0; i < n; ++i) {
        switch (kind) {
          case BinaryKind::kAdd: gb[bi(i)] += g[i]; break;
          case BinaryKind::kSub: gb[bi(i)] -= g[i]; break;
          case BinaryKind::kMul: gb[bi(i)] += g[i] * av[ai(i)]; break;
        }
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(av.shape);
  for (Index i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
  const int ia = a.id;
  return t.record(std::move(out), {ia}, [ia, deriv](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    Tensor& ga = tp.grad_buffer(ia);
    for (Index i = 0; i < g.numel(); ++i) ga[i] += g[i] * deriv(av[i]);
  });
}

Index checked_axis(const Tensor& t, Index axis) {
  if (axis < 0) axis += t.rank();
  if (axis < 0 || axis >= t.rank()) throw DimensionError("axis out of range for " + shape_string(t.shape));
  return axis;
}

}  // namespace

// ---------------------------------------------------------------------------

Var matmul(Var x, Var w) {
  Tape& t = tape_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.dim(-1) != wv.dim(0)) {
    throw DimensionError("matmul: " + shape_string(xv.shape) + " x " + shape_string(wv.shape));
  }
  const Index in = wv.dim(0), outd = wv.dim(1);
  Shape os = xv.shape;
  os.back() = outd;
  Tensor out(os);
  out.matrix(outd).noalias() = xv.matrix(in) * wv.matrix(outd);
  t.add_macs(static_cast<double>(xv.numel()) * static_cast<double>(outd));
  const int ix = x.id, iw = w.id;
  return t.record(std::move(out), {ix, iw}, [ix, iw, in, outd](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ix)) {
      tp.grad_buffer(ix).matrix(in).noalias() += g.matrix(outd) * tp.value(iw).matrix(outd).transpose();
    }
    if (tp.requires_grad(iw)) {
      tp.grad_buffer(iw).matrix(outd).noalias() += tp.value(ix).matrix(in).transpose() * g.matrix(outd);
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  if (b.tape != &t) throw ContractError("operands live on different tapes");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.dim(-1) != wv.dim(0) || bv.numel() != wv.dim(1)) {
    throw DimensionError("linear: x" + shape_string(xv.shape) + " W" + shape_string(wv.shape) + " b" +
                         shape_string(bv.shape));
  }
  const Index in = wv.dim(0), outd = wv.dim(1);
  Shape os = xv.shape;
  os.back() = outd;
  Tensor out(os);
  auto om = out.matrix(outd);
  om.noalias() = xv.matrix(in) * wv.matrix(outd);
  om.rowwise() += bv.matrix(outd).row(0);
  t.add_macs(static_cast<double>(xv.numel()) * static_cast<double>(outd));
  const int ix = x.id, iw = w.id, ib = b.id;
  return t.record(std::move(out), {ix, iw, ib}, [ix, iw, ib, in, outd](Tape& tp, const Tensor& g) {
    const auto gm = g.matrix(outd);
    if (tp.requires_grad(ix)) {
      tp.grad_buffer(ix).matrix(in).noalias() += gm * tp.value(iw).matrix(outd).transpose();
    }
    if (tp.requires_grad(iw)) {
      tp.grad_buffer(iw).matrix(outd).noalias() += tp.value(ix).matrix(in).transpose() * gm;
    }
    if (tp.requires_grad(ib)) {
      tp.grad_buffer(ib).matrix(outd).row(0) += gm.colwise().sum();
    }
  });
}

Var add(Var a, Var b) { return binary(a, b, BinaryKind::kAdd); }
Var sub(Var a, Var b) { return binary(a, b, BinaryKind::kSub); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::kMul); }

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double y = std::tanh(x);
        return 1.0 - y * y;
      });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.data) s += x;
  const int ia = a.id;
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (double& x : ga.data) x += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.data) s += x * x;
  const int ia = a.id;
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    Tensor& ga = tp.grad_buffer(ia);
    for (Index i = 0; i < av.numel(); ++i) ga[i] += 2.0 * av[i] * g[0];
  });
}

Var detach(Var a) {
  Tape& t = tape_of(a);
  return t.constant(a.value());
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id;
  return t.record(std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) { accumulate(tp.grad_buffer(ia), g); });
}

Var slice(Var a, Index axis, Index start, Index length) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  axis = checked_axis(av, axis);
  const Index extent = av.shape[static_cast<std::size_t>(axis)];
  if (start < 0 || length < 0 || start + length > extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of axis size " +
                         std::to_string(extent));
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= av.shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < av.rank(); ++i) inner *= av.shape[static_cast<std::size_t>(i)];
  Shape os = av.shape;
  os[static_cast<std::size_t>(axis)] = length;
  Tensor out(os);
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(av.data.begin() + (o * extent + start) * inner, length * inner, out.data.begin() + o * length * inner);
  }
  const int ia = a.id;
  return t.record(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < length * inner; ++i) ga[(o * extent + start) * inner + i] += g[o * length * inner + i];
    }
  });
}

Var concat(const std::vector<Var>& parts, Index axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Tape& t = tape_of(parts.front());
  const Tensor& first = parts.front().value();
  axis = checked_axis(first, axis);
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= first.shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < first.rank(); ++i) inner *= first.shape[static_cast<std::size_t>(i)];
  std::vector<Index> extents;
  std::vector<int> ids;
  Index total = 0;
  for (const Var& p : parts) {
    if (p.tape != &t) throw ContractError("operands live on different tapes");
    const Tensor& v = p.value();
    Shape s = v.shape;
    Shape f = first.shape;
    if (s.size() != f.size()) throw DimensionError("concat rank mismatch");
    s[static_cast<std::size_t>(axis)] = f[static_cast<std::size_t>(axis)] = 0;
    if (s != f) throw DimensionError("concat shape mismatch: " + shape_string(v.shape) + " vs " + shape_string(first.shape));
    extents.push_back(v.shape[static_cast<std::size_t>(axis)]);
    ids.push_back(p.id);
    total += extents.back();
  }
  Shape os = first.shape;
  os[static_cast<std::size_t>(axis)] = total;
  Tensor out(os);
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(v.data.begin() + o * extents[p] * inner, extents[p] * inner,
                  out.data.begin() + (o * total + offset) * inner);
    }
    offset += extents[p];
  }
  return t.record(std::move(out), ids, [=](Tape& tp, const Tensor& g) {
    Index off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tp.requires_grad(ids[p])) {
        Tensor& gp = tp.grad_buffer(ids[p]);
        for (Index o = 0; o < outer; ++o) {
          for (Index i = 0; i < extents[p] * inner; ++i) {
            gp[o * extents[p] * inner + i] += g[(o * total + off) * inner + i];
          }
        }
      }
      off += extents[p];
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  const Tensor& xv = x.value();
  const Index h = xv.dim(-1);
  if (gamma.value().numel() != h || beta.value().numel() != h) {
    throw DimensionError("layer_norm affine size mismatch for " + shape_string(xv.shape));
  }
  const Index rows = xv.numel() / h;
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(xv.numel()));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  Tensor out(xv.shape);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (Index r = 0; r < rows; ++r) {
    const double* xr = xv.data.data() + r * h;
    double mu = 0.0;
    for (Index i = 0; i < h; ++i) mu += xr[i];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (Index i = 0; i < h; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (Index i = 0; i < h; ++i) {
      const double xn = (xr[i] - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r * h + i)] = xn;
      out[r * h + i] = xn * gv[i] + bv[i];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return t.record(std::move(out), {ix, ig, ib}, [=](Tape& tp, const Tensor& g) {
    const Tensor& gv = tp.value(ig);
    if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
      Tensor& gg = tp.grad_buffer(ig);
      Tensor& gb = tp.grad_buffer(ib);
      for (Index r = 0; r < rows; ++r) {
        for (Index i = 0; i < h; ++i) {
          gg[i] += g[r * h + i] * (*xhat)[static_cast<std::size_t>(r * h + i)];
          gb[i] += g[r * h + i];
        }
      }
    }
    if (tp.requires_grad(ix)) {
      Tensor& gx = tp.grad_buffer(ix);
      std::vector<double> dxhat(static_cast<std::size_t>(h));
      for (Index r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (Index i = 0; i < h; ++i) {
          dxhat[static_cast<std::size_t>(i)] = g[r * h + i] * gv[i];
          m1 += dxhat[static_cast<std::size_t>(i)];
          m2 += dxhat[static_cast<std::size_t>(i)] * (*xhat)[static_cast<std::size_t>(r * h + i)];
        }
        m1 /= static_cast<double>(h);
        m2 /= static_cast<double>(h);
        const double rs = (*rstd)[static_cast<std::size_t>(r)];
        for (Index i = 0; i < h; ++i) {
          gx[r * h + i] += rs * (dxhat[static_cast<std::size_t>(i)] - m1 - (*xhat)[static_cast<std::size_t>(r * h + i)] * m2);
        }
      }
    }
  });
}

Var embedding(Var table, const std::vector<int>& ids, Shape out_shape) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding table must be 2-D");
  if (shape_numel(out_shape) != static_cast<Index>(ids.size())) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids do not fill " + shape_string(out_shape));
  }
  const Index vocab = tv.dim(0), h = tv.dim(1);
  Shape os = out_shape;
  os.push_back(h);
  Tensor out(os);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || ids[n] >= vocab) {
      throw DimensionError("embedding id " + std::to_string(ids[n]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.data.begin() + ids[n] * h, h, out.data.begin() + static_cast<Index>(n) * h);
  }
  const int it = table.id;
  return t.record(std::move(out), {it}, [it, ids, h](Tape& tp, const Tensor& g) {
    Tensor& gt = tp.grad_buffer(it);
    for (std::size_t n = 0; n < ids.size(); ++n) {
      for (Index i = 0; i < h; ++i) gt[ids[n] * h + i] += g[static_cast<Index>(n) * h + i];
    }
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& targets) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  const Index k = lv.dim(-1);
  const Index n = lv.numel() / k;
  if (static_cast<Index>(targets.size()) != n) {
    throw DimensionError("cross entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(lv.numel()));
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) throw DimensionError("cross entropy target out of range");
    const double* row = lv.data.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (Index i = 0; i < k; ++i) z += std::exp(row[i] - mx);
    for (Index i = 0; i < k; ++i) (*probs)[static_cast<std::size_t>(r * k + i)] = std::exp(row[i] - mx) / z;
    total += std::log(z) + mx - row[y];
  }
  const int il = logits.id;
  return t.record(Tensor::scalar(total / static_cast<double>(n)), {il}, [=](Tape& tp, const Tensor& g) {
    Tensor& gl = tp.grad_buffer(il);
    const double s = g[0] / static_cast<double>(n);
    for (Index r = 0; r < n; ++r) {
      for (Index i = 0; i < k; ++i) gl[r * k + i] += s * (*probs)[static_cast<std::size_t>(r * k + i)];
      gl[r * k + targets[static_cast<std::size_t>(r)]] -= s;
    }
  });
}

// ---------------------------------------------------------------------------
// Temporal convolutions.

Index same_padding(Index kernel, Index stride) { return std::max<Index>(0, (kernel - stride + 1) / 2); }

Index conv_output_length(Index length, Index kernel, Index stride, Index pad) {
  if (stride < 1) throw DimensionError("conv stride must be >= 1");
  if (kernel > length + 2 * pad) {
    throw DimensionError("conv kernel " + std::to_string(kernel) + " wider than padded input " +
                         std::to_string(length + 2 * pad));
  }
  return (length + 2 * pad - kernel) / stride + 1;
}

Index transpose_output_padding(Index length, Index kernel, Index stride, Index pad) {
  const Index down = conv_output_length(length, kernel, stride, pad);
  return length - ((down - 1) * stride - 2 * pad + kernel);
}

Var conv1d(Var x, Var kernel, Var bias, Index stride, Index pad) {
  Tape& t = tape_of(x, kernel);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 3 || kv.rank() != 3 || kv.dim(1) != xv.dim(2) || bias.value().numel() != kv.dim(2)) {
    throw DimensionError("conv1d: x" + shape_string(xv.shape) + " kernel" + shape_string(kv.shape));
  }
  const Index batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2);
  const Index k = kv.dim(0), cout = kv.dim(2);
  const Index out_len = conv_output_length(len, k, stride, pad);
  auto cols = std::make_shared<RowMatrix>(RowMatrix::Zero(batch * out_len, k * cin));
  for (Index b = 0; b < batch; ++b) {
    for (Index to = 0; to < out_len; ++to) {
      for (Index kk = 0; kk < k; ++kk) {
        const Index ti = to * stride + kk - pad;
        if (ti < 0 || ti >= len) continue;
        for (Index c = 0; c < cin; ++c) (*cols)(b * out_len + to, kk * cin + c) = xv[(b * len + ti) * cin + c];
      }
    }
  }
  Tensor out({batch, out_len, cout});
  auto om = out.matrix(cout);
  om.noalias() = *cols * kv.matrix(cout);
  om.rowwise() += bias.value().matrix(cout).row(0);
  t.add_macs(static_cast<double>(batch * out_len * k * cin * cout));
  const int ix = x.id, ik = kernel.id, ib = bias.id;
  return t.record(std::move(out), {ix, ik, ib}, [=](Tape& tp, const Tensor& g) {
    const auto gm = g.matrix(cout);
    if (tp.requires_grad(ik)) tp.grad_buffer(ik).matrix(cout).noalias() += cols->transpose() * gm;
    if (tp.requires_grad(ib)) tp.grad_buffer(ib).matrix(cout).row(0) += gm.colwise().sum();
    if (tp.requires_grad(ix)) {
      RowMatrix dcols = gm * tp.value(ik).matrix(cout).transpose();
      Tensor& gx = tp.grad_buffer(ix);
      for (Index b = 0; b < batch; ++b) {
        for (Index to = 0; to < out_len; ++to) {
          for (Index kk = 0; kk < k; ++kk) {
            const Index ti = to * stride + kk - pad;
            if (ti < 0 || ti >= len) continue;
            for (Index c = 0; c < cin; ++c) gx[(b * len + ti) * cin + c] += dcols(b * out_len + to, kk * cin + c);
          }
        }
      }
    }
  });
}

Var conv_transpose1d(Var x, Var kernel, Var bias, Index stride, Index pad, Index output_padding) {
  Tape& t = tape_of(x, kernel);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 3 || kv.rank() != 3 || kv.dim(1) != xv.dim(2) || bias.value().numel() != kv.dim(2)) {
    throw DimensionError("conv_transpose1d: x" + shape_string(xv.shape) + " kernel" + shape_string(kv.shape));
  }
  if (stride < 1 || output_padding < 0 || output_padding >= stride) {
    throw DimensionError("conv_transpose1d needs 0 <= output_padding < stride");
  }
  const Index batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2);
  const Index k = kv.dim(0), cout = kv.dim(2);
  const Index out_len = (len - 1) * stride - 2 * pad + k + output_padding;
  if (out_len < 1) throw DimensionError("conv_transpose1d produces empty output");
  // Kp[ci, kk*cout + co] = kernel[kk, ci, co]
  RowMatrix kp(cin, k * cout);
  for (Index kk = 0; kk < k; ++kk)
    for (Index c = 0; c < cin; ++c)
      for (Index o = 0; o < cout; ++o) kp(c, kk * cout + o) = kv[(kk * cin + c) * cout + o];
  RowMatrix contrib = xv.matrix(cin) * kp;
  Tensor out({batch, out_len, cout});
  for (Index b = 0; b < batch; ++b) {
    for (Index ti = 0; ti < len; ++ti) {
      for (Index kk = 0; kk < k; ++kk) {
        const Index to = ti * stride + kk - pad;
        if (to < 0 || to >= out_len) continue;
        for (Index o = 0; o < cout; ++o) out[(b * out_len + to) * cout + o] += contrib(b * len + ti, kk * cout + o);
      }
    }
  }
  out.matrix(cout).rowwise() += bias.value().matrix(cout).row(0);
  t.add_macs(static_cast<double>(batch * len * k * cin * cout));
  const int ix = x.id, ik = kernel.id, ib = bias.id;
  return t.record(std::move(out), {ix, ik, ib}, [=](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ib)) tp.grad_buffer(ib).matrix(cout).row(0) += g.matrix(cout).colwise().sum();
    const bool need_x = tp.requires_grad(ix), need_k = tp.requires_grad(ik);
    if (!need_x && !need_k) return;
    RowMatrix dcontrib = RowMatrix::Zero(batch * len, k * cout);
    for (Index b = 0; b < batch; ++b) {
      for (Index ti = 0; ti < len; ++ti) {
        for (Index kk = 0; kk < k; ++kk) {
          const Index to = ti * stride + kk - pad;
          if (to < 0 || to >= out_len) continue;
          for (Index o = 0; o < cout; ++o) dcontrib(b * len + ti, kk * cout + o) = g[(b * out_len + to) * cout + o];
        }
      }
    }
    if (need_x) {
      const Tensor& kv = tp.value(ik);
      RowMatrix kp(cin, k * cout);
      for (Index kk = 0; kk < k; ++kk)
        for (Index c = 0; c < cin; ++c)
          for (Index o = 0; o < cout; ++o) kp(c, kk * cout + o) = kv[(kk * cin + c) * cout + o];
      tp.grad_buffer(ix).matrix(cin).noalias() += dcontrib * kp.transpose();
    }
    if (need_k) {
      RowMatrix dkp = tp.value(ix).matrix(cin).transpose() * dcontrib;
      Tensor& gk = tp.grad_buffer(ik);
      for (Index kk = 0; kk < k; ++kk)
        for (Index c = 0; c < cin; ++c)
          for (Index o = 0; o < cout; ++o) gk[(kk * cin + c) * cout + o] += dkp(c, kk * cout + o);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention.

Var gqa_attention(Var q, Var k, Var v, bool causal) {
  Tape& t = tape_of(q, k);
  if (v.tape != &t) throw ContractError("operands live on different tapes");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 4 || kv.rank() != 4 || vv.rank() != 4 || kv.shape != vv.shape || qv.dim(0) != kv.dim(0) ||
      qv.dim(3) != kv.dim(3)) {
    throw DimensionError("gqa_attention: q" + shape_string(qv.shape) + " k" + shape_string(kv.shape) + " v" +
                         shape_string(vv.shape));
  }
  const Index batch = qv.dim(0), tq = qv.dim(1), hq = qv.dim(2), hd = qv.dim(3);
  const Index tk = kv.dim(1), hkv = kv.dim(2);
  if (hkv < 1 || hq % hkv != 0) {
    throw ConfigError("query heads (" + std::to_string(hq) + ") must be a multiple of kv heads (" +
                      std::to_string(hkv) + ")");
  }
  const double root = std::sqrt(static_cast<double>(hd));
  const Index shift = tk - tq;
  // probs[b][h][i][j]
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch * hq * tq * tk), 0.0);
  Tensor out(qv.shape);
  std::vector<double> scores(static_cast<std::size_t>(tk));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < hq; ++h) {
      const Index g = h * hkv / hq;
      for (Index i = 0; i < tq; ++i) {
        const Index visible = causal ? std::clamp<Index>(i + shift + 1, 0, tk) : tk;
        const double* qi = qv.data.data() + ((b * tq + i) * hq + h) * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < visible; ++j) {
          const double* kj = kv.data.data() + ((b * tk + j) * hkv + g) * hd;
          double dot = 0.0;
          for (Index d = 0; d < hd; ++d) dot += qi[d] * kj[d];
          scores[static_cast<std::size_t>(j)] = dot / root;
          mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (Index j = 0; j < visible; ++j) {
          scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          z += scores[static_cast<std::size_t>(j)];
        }
        double* p = probs->data() + ((b * hq + h) * tq + i) * tk;
        for (Index j = 0; j < visible; ++j) p[j] = scores[static_cast<std::size_t>(j)] / z;
        double* oi = out.data.data() + ((b * tq + i) * hq + h) * hd;
        for (Index j = 0; j < visible; ++j) {
          const double* vj = vv.data.data() + ((b * tk + j) * hkv + g) * hd;
          for (Index d = 0; d < hd; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }
  t.add_macs(2.0 * static_cast<double>(batch * hq * tq * tk * hd));
  const int iq = q.id, ik = k.id, iv = v.id;
  return t.record(std::move(out), {iq, ik, iv}, [=](Tape& tp, const Tensor& gout) {
    const Tensor& qv = tp.value(iq);
    const Tensor& kv = tp.value(ik);
    const Tensor& vv = tp.value(iv);
    const bool nq = tp.requires_grad(iq), nk = tp.requires_grad(ik), nv = tp.requires_grad(iv);
    Tensor* gq = nq ? &tp.grad_buffer(iq) : nullptr;
    Tensor* gk = nk ? &tp.grad_buffer(ik) : nullptr;
    Tensor* gv = nv ? &tp.grad_buffer(iv) : nullptr;
    std::vector<double> dp(static_cast<std::size_t>(tk));
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < hq; ++h) {
        const Index g = h * hkv / hq;
        for (Index i = 0; i < tq; ++i) {
          const Index visible = causal ? std::clamp<Index>(i + shift + 1, 0, tk) : tk;
          const double* p = probs->data() + ((b * hq + h) * tq + i) * tk;
          const double* go = gout.data.data() + ((b * tq + i) * hq + h) * hd;
          double row = 0.0;
          for (Index j = 0; j < visible; ++j) {
            const double* vj = vv.data.data() + ((b * tk + j) * hkv + g) * hd;
            double s = 0.0;
            for (Index d = 0; d < hd; ++d) s += go[d] * vj[d];
            dp[static_cast<std::size_t>(j)] = s;
            row += s * p[j];
            if (gv != nullptr) {
              double* gvj = gv->data.data() + ((b * tk + j) * hkv + g) * hd;
              for (Index d = 0; d < hd; ++d) gvj[d] += p[j] * go[d];
            }
          }
          if (gq == nullptr && gk == nullptr) continue;
          const double* qi = qv.data.data() + ((b * tq + i) * hq + h) * hd;
          for (Index j = 0; j < visible; ++j) {
            const double ds = p[j] * (dp[static_cast<std::size_t>(j)] - row) / root;
            const double* kj = kv.data.data() + ((b * tk + j) * hkv + g) * hd;
            if (gq != nullptr) {
              double* gqi = gq->data.data() + ((b * tq + i) * hq + h) * hd;
              for (Index d = 0; d < hd; ++d) gqi[d] += ds * kj[d];
            }
            if (gk != nullptr) {
              double* gkj = gk->data.data() + ((b * tk + j) * hkv + g) * hd;
              for (Index d = 0; d < hd; ++d) gkj[d] += ds * qi[d];
            }
          }
        }
      }
    }
  });
}

}  // namespace chunkflow
