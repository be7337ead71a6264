#include "ofnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ofnet {

void init_threads_from_env() {
#ifdef _OPENMP
  if (const char* s = std::getenv("OFNET_THREADS")) {
    int n = std::atoi(s);
    if (n >= 1) omp_set_num_threads(std::min(n, omp_get_max_threads()));
  }
#endif
}

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= size_t(d);
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
void require_finite(std::span<const T> v, const char* what) {
  for (const T& x : v) {
    if (!std::isfinite(double(x)))
      throw NumericError(std::string("non-finite value in ") + what);
  }
}

namespace {

template <typename T>
std::shared_ptr<TensorNode<T>> new_node(std::vector<int> shape,
                                        std::vector<T> value) {
  if (shape_numel(shape) != value.size())
    throw ConfigError("tensor shape " + shape_str(shape) +
                      " does not match data length " +
                      std::to_string(value.size()));
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

template <typename T>
bool needs_grad(const TensorT<T>& t) {
  return t.node()->requires_grad || !t.node()->parents.empty() ||
         t.node()->backprop != nullptr;
}

}  // namespace

template <typename T>
TensorT<T> TensorT<T>::zeros(std::vector<int> shape) {
  size_t n = shape_numel(shape);
  return TensorT(new_node<T>(std::move(shape), std::vector<T>(n, T(0))));
}

template <typename T>
TensorT<T> TensorT<T>::full(std::vector<int> shape, T v) {
  size_t n = shape_numel(shape);
  return TensorT(new_node<T>(std::move(shape), std::vector<T>(n, v)));
}

template <typename T>
TensorT<T> TensorT<T>::from(std::vector<int> shape, std::vector<T> data) {
  return TensorT(new_node<T>(std::move(shape), std::move(data)));
}

template <typename T>
TensorT<T> TensorT<T>::randn(std::vector<int> shape, Rng& rng, double stddev) {
  size_t n = shape_numel(shape);
  std::vector<T> data(n);
  for (size_t i = 0; i < n; ++i) data[i] = T(rng.normal() * stddev);
  return TensorT(new_node<T>(std::move(shape), std::move(data)));
}

template <typename T>
T TensorT<T>::scalar() const {
  if (size() != 1)
    throw ConfigError("scalar() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
TensorT<T> make_op(std::vector<int> shape, std::vector<T> value,
                   std::vector<TensorT<T>> parents,
                   std::function<void(TensorNode<T>&)> backprop) {
  auto n = new_node<T>(std::move(shape), std::move(value));
  bool track = false;
  for (const auto& p : parents) track = track || needs_grad(p);
  if (track) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return TensorT<T>(n);
}

// ---- ConvSpec --------------------------------------------------------------

ConvSpec ConvSpec::same_conv(int out_channels, int kernel_h, int kernel_w,
                             int dilation) {
  ConvSpec s;
  s.out_channels = out_channels;
  s.kernel_h = kernel_h;
  s.kernel_w = kernel_w;
  s.dilation = dilation;
  s.pad_h = (kernel_h - 1) * dilation / 2;
  s.pad_w = (kernel_w - 1) * dilation / 2;
  return s;
}

void ConvSpec::validate() const {
  if (kernel_h < 1 || kernel_w < 1)
    throw ConfigError("conv kernel must be at least 1x1");
  if (dilation < 1) throw ConfigError("conv dilation must be >= 1");
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  if (pad_h < 0 || pad_w < 0) throw ConfigError("conv padding must be >= 0");
  if (out_channels < 1) throw ConfigError("conv out_channels must be >= 1");
}

int ConvSpec::out_h(int in_h) const {
  return (in_h + 2 * pad_h - ((kernel_h - 1) * dilation + 1)) / stride + 1;
}

int ConvSpec::out_w(int in_w) const {
  return (in_w + 2 * pad_w - ((kernel_w - 1) * dilation + 1)) / stride + 1;
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// Range of output indices ox with 0 <= ox*stride + k0 <= limit-1.
inline void out_range(int k0, int stride, int limit, int out_n, int& lo,
                      int& hi) {
  lo = k0 < 0 ? (-k0 + stride - 1) / stride : 0;
  int max_i = limit - 1 - k0;
  hi = max_i < 0 ? 0 : std::min(out_n, max_i / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* out, int n_batch,
                    int ci, int h, int wd, int co, int oh, int ow,
                    const ConvSpec& s) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < n_batch; ++n) {
    for (int oc = 0; oc < co; ++oc) {
      T* op = out + (size_t(n) * co + oc) * oh * ow;
      std::fill(op, op + size_t(oh) * ow, b[oc]);
      for (int ic = 0; ic < ci; ++ic) {
        const T* xp = x + (size_t(n) * ci + ic) * h * wd;
        const T* wp = w + (size_t(oc) * ci + ic) * s.kernel_h * s.kernel_w;
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          int y0 = ky * s.dilation - s.pad_h;
          int oy_lo, oy_hi;
          out_range(y0, s.stride, h, oh, oy_lo, oy_hi);
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            T wv = wp[ky * s.kernel_w + kx];
            if (wv == T(0)) continue;
            int x0 = kx * s.dilation - s.pad_w;
            int ox_lo, ox_hi;
            out_range(x0, s.stride, wd, ow, ox_lo, ox_hi);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const T* xrow = xp + size_t(oy * s.stride + y0) * wd + x0;
              T* orow = op + size_t(oy) * ow;
              if (s.stride == 1) {
                for (int ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wv * xrow[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wv * xrow[ox * s.stride];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_grad_input(const T* gout, const T* w, T* gx, int n_batch, int ci,
                       int h, int wd, int co, int oh, int ow,
                       const ConvSpec& s) {
  // Gather form: each input element sums its uses, so threads never share
  // outputs and the result is thread-count independent.
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < n_batch; ++n) {
    for (int ic = 0; ic < ci; ++ic) {
      T* gp = gx + (size_t(n) * ci + ic) * h * wd;
      for (int oc = 0; oc < co; ++oc) {
        const T* gop = gout + (size_t(n) * co + oc) * oh * ow;
        const T* wp = w + (size_t(oc) * ci + ic) * s.kernel_h * s.kernel_w;
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          int y0 = ky * s.dilation - s.pad_h;
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            T wv = wp[ky * s.kernel_w + kx];
            if (wv == T(0)) continue;
            int x0 = kx * s.dilation - s.pad_w;
            if (s.stride == 1) {
              int oy_lo, oy_hi, ox_lo, ox_hi;
              out_range(y0, 1, h, oh, oy_lo, oy_hi);
              out_range(x0, 1, wd, ow, ox_lo, ox_hi);
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                T* grow = gp + size_t(oy + y0) * wd + x0;
                const T* gorow = gop + size_t(oy) * ow;
                for (int ox = ox_lo; ox < ox_hi; ++ox)
                  grow[ox] += wv * gorow[ox];
              }
            } else {
              for (int oy = 0; oy < oh; ++oy) {
                int iy = oy * s.stride + y0;
                if (iy < 0 || iy >= h) continue;
                T* grow = gp + size_t(iy) * wd;
                const T* gorow = gop + size_t(oy) * ow;
                for (int ox = 0; ox < ow; ++ox) {
                  int ix = ox * s.stride + x0;
                  if (ix < 0 || ix >= wd) continue;
                  grow[ix] += wv * gorow[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_grad_weight(const T* gout, const T* x, T* gw, T* gb, int n_batch,
                        int ci, int h, int wd, int co, int oh, int ow,
                        const ConvSpec& s) {
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    for (int ic = 0; ic < ci; ++ic) {
      T* gwp = gw + (size_t(oc) * ci + ic) * s.kernel_h * s.kernel_w;
      for (int ky = 0; ky < s.kernel_h; ++ky) {
        int y0 = ky * s.dilation - s.pad_h;
        int oy_lo, oy_hi;
        out_range(y0, s.stride, h, oh, oy_lo, oy_hi);
        for (int kx = 0; kx < s.kernel_w; ++kx) {
          int x0 = kx * s.dilation - s.pad_w;
          int ox_lo, ox_hi;
          out_range(x0, s.stride, wd, ow, ox_lo, ox_hi);
          T acc = 0;
          for (int n = 0; n < n_batch; ++n) {
            const T* gop = gout + (size_t(n) * co + oc) * oh * ow;
            const T* xp = x + (size_t(n) * ci + ic) * h * wd;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const T* gorow = gop + size_t(oy) * ow;
              const T* xrow = xp + size_t(oy * s.stride + y0) * wd + x0;
              if (s.stride == 1) {
                for (int ox = ox_lo; ox < ox_hi; ++ox)
                  acc += gorow[ox] * xrow[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox)
                  acc += gorow[ox] * xrow[ox * s.stride];
              }
            }
          }
          gwp[ky * s.kernel_w + kx] += acc;
        }
      }
    }
    T acc = 0;
    for (int n = 0; n < n_batch; ++n) {
      const T* gop = gout + (size_t(n) * co + oc) * oh * ow;
      for (size_t i = 0; i < size_t(oh) * ow; ++i) acc += gop[i];
    }
    gb[oc] += acc;
  }
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const ConvSpec& spec,
                  const TensorT<T>& weights, const TensorT<T>& bias) {
  spec.validate();
  if (input.ndim() != 4)
    throw ConfigError("conv2d input must be NCHW, got " +
                      shape_str(input.shape()));
  const int n = input.dim(0), ci = input.dim(1), h = input.dim(2),
            w = input.dim(3);
  if (weights.ndim() != 4 || weights.dim(0) != spec.out_channels ||
      weights.dim(1) != ci || weights.dim(2) != spec.kernel_h ||
      weights.dim(3) != spec.kernel_w)
    throw ConfigError("conv2d weights " + shape_str(weights.shape()) +
                      " do not match spec/input channels " +
                      shape_str(input.shape()));
  if (bias.ndim() != 1 || bias.dim(0) != spec.out_channels)
    throw ConfigError("conv2d bias must have shape (out_channels)");
  const int oh = spec.out_h(h), ow = spec.out_w(w);
  if (oh < 1 || ow < 1)
    throw ConfigError("conv2d output would be empty for input " +
                      shape_str(input.shape()));
  require_finite(input.values(), "conv2d input");

  std::vector<T> out(size_t(n) * spec.out_channels * oh * ow);
  conv2d_forward(input.values().data(), weights.values().data(),
                 bias.values().data(), out.data(), n, ci, h, w,
                 spec.out_channels, oh, ow, spec);

  ConvSpec s = spec;
  auto xn = input.node();
  auto wn = weights.node();
  auto bn = bias.node();
  return make_op<T>(
      {n, spec.out_channels, oh, ow}, std::move(out), {input, weights, bias},
      [=](TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (needs_grad(TensorT<T>(xn))) {
          xn->ensure_grad();
          conv2d_grad_input(g, wn->value.data(), xn->grad.data(), n, ci, h, w,
                            s.out_channels, oh, ow, s);
        }
        if (needs_grad(TensorT<T>(wn)) || needs_grad(TensorT<T>(bn))) {
          wn->ensure_grad();
          bn->ensure_grad();
          conv2d_grad_weight(g, xn->value.data(), wn->grad.data(),
                             bn->grad.data(), n, ci, h, w, s.out_channels, oh,
                             ow, s);
        }
      });
}

// ---- pointwise -------------------------------------------------------------

template <typename T>
TensorT<T> pointwise(const TensorT<T>& x, Pointwise fn) {
  const auto& v = x.node()->value;
  std::vector<T> out(v.size());
  switch (fn) {
    case Pointwise::relu:
      for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
      break;
    case Pointwise::sigmoid:
      for (size_t i = 0; i < v.size(); ++i)
        out[i] = T(1) / (T(1) + std::exp(-v[i]));
      break;
    case Pointwise::tanh:
      for (size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(v[i]);
      break;
    default:
      throw ConfigError("pointwise: unsupported function tag");
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn, fn](TensorNode<T>& o) {
    xn->ensure_grad();
    const T* g = o.grad.data();
    const T* y = o.value.data();
    const T* in = xn->value.data();
    T* gx = xn->grad.data();
    switch (fn) {
      case Pointwise::relu:
        for (size_t i = 0; i < o.size(); ++i)
          if (in[i] > T(0)) gx[i] += g[i];
        break;
      case Pointwise::sigmoid:
        for (size_t i = 0; i < o.size(); ++i)
          gx[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case Pointwise::tanh:
        for (size_t i = 0; i < o.size(); ++i)
          gx[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
    }
  });
}

// ---- bilinear upsample -----------------------------------------------------

namespace {

struct LinTap {
  int i0, i1;
  double w0, w1;
};

// Pixel-center sampling positions, no corner alignment.
std::vector<LinTap> lin_taps(int in_n, int out_n) {
  std::vector<LinTap> taps(static_cast<size_t>(out_n));
  double scale = double(in_n) / double(out_n);
  for (int j = 0; j < out_n; ++j) {
    double s = (j + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > in_n - 1) s = in_n - 1;
    int i0 = int(std::floor(s));
    int i1 = std::min(i0 + 1, in_n - 1);
    double f = s - i0;
    taps[size_t(j)] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

// Inverse map: for each input index, the output taps that read it.
std::vector<std::vector<std::pair<int, double>>> lin_sources(
    const std::vector<LinTap>& taps, int in_n) {
  std::vector<std::vector<std::pair<int, double>>> src(static_cast<size_t>(in_n));
  for (int j = 0; j < int(taps.size()); ++j) {
    const LinTap& t = taps[size_t(j)];
    if (t.w0 != 0.0) src[size_t(t.i0)].push_back({j, t.w0});
    if (t.i1 != t.i0 && t.w1 != 0.0) src[size_t(t.i1)].push_back({j, t.w1});
  }
  return src;
}

}  // namespace

template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& x, int out_h, int out_w) {
  if (x.ndim() != 4)
    throw ConfigError("bilinear_upsample input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w)
    throw ConfigError("bilinear_upsample cannot shrink: " + shape_str(x.shape()) +
                      " -> " + std::to_string(out_h) + "x" +
                      std::to_string(out_w));
  auto ty = lin_taps(h, out_h);
  auto tx = lin_taps(w, out_w);

  std::vector<T> out(size_t(n) * c * out_h * out_w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const T* xp = x.values().data() + (size_t(ni) * c + ci) * h * w;
      T* op = out.data() + (size_t(ni) * c + ci) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const LinTap& y = ty[size_t(oy)];
        const T* r0 = xp + size_t(y.i0) * w;
        const T* r1 = xp + size_t(y.i1) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const LinTap& xt = tx[size_t(ox)];
          double top = y.w0 * (xt.w0 * r0[xt.i0] + xt.w1 * r0[xt.i1]);
          double bot = y.w1 * (xt.w0 * r1[xt.i0] + xt.w1 * r1[xt.i1]);
          op[size_t(oy) * out_w + ox] = T(top + bot);
        }
      }
    }
  }

  auto xn = x.node();
  auto sy = lin_sources(ty, h);
  auto sx = lin_sources(tx, w);
  return make_op<T>(
      {n, c, out_h, out_w}, std::move(out), {x},
      [xn, sy, sx, n, c, h, w, out_h, out_w](TensorNode<T>& o) {
        xn->ensure_grad();
        const T* g = o.grad.data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int ni = 0; ni < n; ++ni) {
          for (int ci = 0; ci < c; ++ci) {
            const T* gp = g + (size_t(ni) * c + ci) * out_h * out_w;
            T* gx = xn->grad.data() + (size_t(ni) * c + ci) * h * w;
            for (int iy = 0; iy < h; ++iy) {
              for (int ix = 0; ix < w; ++ix) {
                double acc = 0;
                for (const auto& [oy, wy] : sy[size_t(iy)])
                  for (const auto& [ox, wx] : sx[size_t(ix)])
                    acc += wy * wx * gp[size_t(oy) * out_w + ox];
                gx[size_t(iy) * w + ix] += T(acc);
              }
            }
          }
        }
      });
}

// ---- concat / slice / arithmetic -------------------------------------------

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 4 || b.ndim() != 4)
    throw ConfigError("concat_channels expects NCHW tensors");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ConfigError("concat_channels spatial/batch mismatch: " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2),
            w = a.dim(3);
  const size_t plane = size_t(h) * w;
  std::vector<T> out(size_t(n) * (ca + cb) * plane);
  for (int ni = 0; ni < n; ++ni) {
    T* dst = out.data() + size_t(ni) * (ca + cb) * plane;
    std::copy_n(a.values().data() + size_t(ni) * ca * plane, size_t(ca) * plane,
                dst);
    std::copy_n(b.values().data() + size_t(ni) * cb * plane, size_t(cb) * plane,
                dst + size_t(ca) * plane);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>({n, ca + cb, h, w}, std::move(out), {a, b},
                    [an, bn, n, ca, cb, plane](TensorNode<T>& o) {
                      for (int ni = 0; ni < n; ++ni) {
                        const T* g =
                            o.grad.data() + size_t(ni) * (ca + cb) * plane;
                        if (needs_grad(TensorT<T>(an))) {
                          an->ensure_grad();
                          T* ga = an->grad.data() + size_t(ni) * ca * plane;
                          for (size_t i = 0; i < size_t(ca) * plane; ++i)
                            ga[i] += g[i];
                        }
                        if (needs_grad(TensorT<T>(bn))) {
                          bn->ensure_grad();
                          T* gb = bn->grad.data() + size_t(ni) * cb * plane;
                          for (size_t i = 0; i < size_t(cb) * plane; ++i)
                            gb[i] += g[size_t(ca) * plane + i];
                        }
                      }
                    });
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1) {
  if (x.ndim() != 4) throw ConfigError("slice_channels expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ConfigError("slice_channels range invalid");
  const size_t plane = size_t(h) * w;
  const int cs = c1 - c0;
  std::vector<T> out(size_t(n) * cs * plane);
  for (int ni = 0; ni < n; ++ni)
    std::copy_n(x.values().data() + (size_t(ni) * c + c0) * plane,
                size_t(cs) * plane, out.data() + size_t(ni) * cs * plane);
  auto xn = x.node();
  return make_op<T>({n, cs, h, w}, std::move(out), {x},
                    [xn, n, c, c0, cs, plane](TensorNode<T>& o) {
                      xn->ensure_grad();
                      for (int ni = 0; ni < n; ++ni) {
                        const T* g = o.grad.data() + size_t(ni) * cs * plane;
                        T* gx =
                            xn->grad.data() + (size_t(ni) * c + c0) * plane;
                        for (size_t i = 0; i < size_t(cs) * plane; ++i)
                          gx[i] += g[i];
                      }
                    });
}

template <typename T>
TensorT<T> pad_spatial(const TensorT<T>& x, int new_h, int new_w) {
  if (x.ndim() != 4) throw ConfigError("pad_spatial expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (new_h < h || new_w < w) throw ConfigError("pad_spatial cannot shrink");
  std::vector<T> out(size_t(n) * c * new_h * new_w, T(0));
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h; ++y)
      std::copy_n(x.values().data() + (size_t(p) * h + y) * w, w,
                  out.data() + (size_t(p) * new_h + y) * new_w);
  auto xn = x.node();
  return make_op<T>({n, c, new_h, new_w}, std::move(out), {x},
                    [xn, n, c, h, w, new_h, new_w](TensorNode<T>& o) {
                      xn->ensure_grad();
                      for (int p = 0; p < n * c; ++p)
                        for (int y = 0; y < h; ++y) {
                          const T* g =
                              o.grad.data() + (size_t(p) * new_h + y) * new_w;
                          T* gx = xn->grad.data() + (size_t(p) * h + y) * w;
                          for (int xx = 0; xx < w; ++xx) gx[xx] += g[xx];
                        }
                    });
}

template <typename T>
TensorT<T> crop_spatial(const TensorT<T>& x, int h, int w) {
  if (x.ndim() != 4) throw ConfigError("crop_spatial expects NCHW");
  const int n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (h > ih || w > iw) throw ConfigError("crop_spatial cannot grow");
  std::vector<T> out(size_t(n) * c * h * w);
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h; ++y)
      std::copy_n(x.values().data() + (size_t(p) * ih + y) * iw, w,
                  out.data() + (size_t(p) * h + y) * w);
  auto xn = x.node();
  return make_op<T>({n, c, h, w}, std::move(out), {x},
                    [xn, n, c, h, w, ih, iw](TensorNode<T>& o) {
                      xn->ensure_grad();
                      for (int p = 0; p < n * c; ++p)
                        for (int y = 0; y < h; ++y) {
                          const T* g = o.grad.data() + (size_t(p) * h + y) * w;
                          T* gx =
                              xn->grad.data() + (size_t(p) * ih + y) * iw;
                          for (int xx = 0; xx < w; ++xx) gx[xx] += g[xx];
                        }
                    });
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] + b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    if (needs_grad(TensorT<T>(an))) {
      an->ensure_grad();
      for (size_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (needs_grad(TensorT<T>(bn))) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("mul shape mismatch");
  std::vector<T> out(a.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    if (needs_grad(TensorT<T>(an))) {
      an->ensure_grad();
      for (size_t i = 0; i < o.size(); ++i)
        an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (needs_grad(TensorT<T>(bn))) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.size(); ++i)
        bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  std::vector<T> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * x.values()[i];
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn, c](TensorNode<T>& o) {
    xn->ensure_grad();
    for (size_t i = 0; i < o.size(); ++i) xn->grad[i] += c * o.grad[i];
  });
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  auto xn = x.node();
  return make_op<T>({1}, {acc}, {x}, [xn](TensorNode<T>& o) {
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += o.grad[0];
  });
}

// ---- backward --------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss, std::span<TensorT<T>> params) {
  if (loss.size() != 1)
    throw ConfigError("backward requires a scalar loss, got shape " +
                      shape_str(loss.shape()));
  for (auto& p : params) {
    p.node()->ensure_grad();
    std::fill(p.node()->grad.begin(), p.node()->grad.end(), T(0));
  }

  // Iterative post-order over parents.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode<T>* n : order)
    if (n != loss.node().get()) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---- optimizer -------------------------------------------------------------

template <typename T>
void optimizer_step(std::span<TensorT<T>> params, OptimState<T>& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), T(0));
      state.v[i].assign(params[i].size(), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw ConfigError("optimizer state does not match parameter count");
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.size())
      throw ConfigError("optimizer accumulator shape mismatch at param " +
                        std::to_string(i));
    if (!p.has_grad()) p.node()->ensure_grad();
    T* w = p.values().data();
    const T* g = p.grad().data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = double(g[j]) + state.weight_decay * double(w[j]);
      double mj = state.beta1 * double(m[j]) + (1.0 - state.beta1) * gj;
      double vj = state.beta2 * double(v[j]) + (1.0 - state.beta2) * gj * gj;
      m[j] = T(mj);
      v[j] = T(vj);
      double mh = mj / c1;
      double vh = vj / c2;
      w[j] = T(double(w[j]) - state.learning_rate * mh / (std::sqrt(vh) + state.eps));
    }
  }
}

// ---- explicit instantiation -------------------------------------------------

#define OFNET_INSTANTIATE(T)                                                   \
  template class TensorT<T>;                                                   \
  template TensorT<T> make_op<T>(std::vector<int>, std::vector<T>,             \
                                 std::vector<TensorT<T>>,                      \
                                 std::function<void(TensorNode<T>&)>);         \
  template void require_finite<T>(std::span<const T>, const char*);            \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const ConvSpec&,            \
                                const TensorT<T>&, const TensorT<T>&);         \
  template TensorT<T> pointwise<T>(const TensorT<T>&, Pointwise);              \
  template TensorT<T> bilinear_upsample<T>(const TensorT<T>&, int, int);       \
  template TensorT<T> concat_channels<T>(const TensorT<T>&, const TensorT<T>&);\
  template TensorT<T> slice_channels<T>(const TensorT<T>&, int, int);          \
  template TensorT<T> pad_spatial<T>(const TensorT<T>&, int, int);             \
  template TensorT<T> crop_spatial<T>(const TensorT<T>&, int, int);            \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                          \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                           \
  template void backward<T>(const TensorT<T>&, std::span<TensorT<T>>);         \
  template void optimizer_step<T>(std::span<TensorT<T>>, OptimState<T>&);

OFNET_INSTANTIATE(float)
OFNET_INSTANTIATE(double)
#undef OFNET_INSTANTIATE

}  // namespace ofnet
