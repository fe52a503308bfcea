#include "vtff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vtff {

namespace {

thread_local Tape* g_active_tape = nullptr;
bool g_finite_checks = true;

void check_finite(const TensorNode& node, const char* op_name) {
  if (!g_finite_checks) return;
  for (float v : node.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op_name);
    }
  }
}

std::shared_ptr<TensorNode> make_node(Shape shape) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(static_cast<size_t>(numel(shape)), 0.0f);
  node->shape = std::move(shape);
  return node;
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void maybe_record(bool record, std::vector<std::shared_ptr<TensorNode>> inputs,
                  const std::shared_ptr<TensorNode>& output,
                  std::function<void()> backward_fn) {
  if (!record) return;
  output->requires_grad = true;
  g_active_tape->record(std::move(inputs), output, std::move(backward_fn));
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<size_t>(i)] =
        strides[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` viewed through broadcast shape `out`; 0 on broadcast axes.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  auto base = row_major_strides(shape);
  std::vector<int64_t> strides(out.size(), 0);
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t oi = out.size() - shape.size() + i;
    strides[oi] = shape[i] == 1 ? 0 : base[i];
  }
  return strides;
}

// Elementwise binary op with broadcasting. FwdFn(a,b)->out; DaFn/DbFn give the
// local partials evaluated at (a,b).
template <class FwdFn, class DaFn, class DbFn>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          FwdFn fwd, DaFn dfa, DbFn dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto out = make_node(out_shape);
  auto an = a.node();
  auto bn = b.node();

  auto out_strides = row_major_strides(out_shape);
  auto sa = broadcast_strides(an->shape, out_shape);
  auto sb = broadcast_strides(bn->shape, out_shape);
  size_t rank = out_shape.size();
  int64_t total = numel(out_shape);

  std::vector<int64_t> map_a(static_cast<size_t>(total));
  std::vector<int64_t> map_b(static_cast<size_t>(total));
  for (int64_t idx = 0; idx < total; ++idx) {
    int64_t rem = idx, ia = 0, ib = 0;
    for (size_t d = 0; d < rank; ++d) {
      int64_t coord = rem / out_strides[d];
      rem %= out_strides[d];
      ia += coord * sa[d];
      ib += coord * sb[d];
    }
    map_a[static_cast<size_t>(idx)] = ia;
    map_b[static_cast<size_t>(idx)] = ib;
    out->data[static_cast<size_t>(idx)] =
        fwd(an->data[static_cast<size_t>(ia)], bn->data[static_cast<size_t>(ib)]);
  }
  check_finite(*out, name);

  bool record = wants_grad({&a, &b});
  maybe_record(record, {an, bn}, out,
               [an, bn, out, map_a = std::move(map_a), map_b = std::move(map_b), dfa, dfb]() {
                 if (out->grad.empty()) return;
                 const bool ga = an->requires_grad;
                 const bool gb = bn->requires_grad;
                 if (ga) an->ensure_grad();
                 if (gb) bn->ensure_grad();
                 for (size_t idx = 0; idx < out->grad.size(); ++idx) {
                   float go = out->grad[idx];
                   float av = an->data[static_cast<size_t>(map_a[idx])];
                   float bv = bn->data[static_cast<size_t>(map_b[idx])];
                   if (ga) an->grad[static_cast<size_t>(map_a[idx])] += go * dfa(av, bv);
                   if (gb) bn->grad[static_cast<size_t>(map_b[idx])] += go * dfb(av, bv);
                 }
               });
  return Tensor(out);
}

// Elementwise unary op. DFn receives (x, y) where y is the forward output.
template <class FwdFn, class DFn>
Tensor unary_elementwise(const Tensor& x, const char* name, FwdFn fwd, DFn df) {
  auto xn = x.node();
  auto out = make_node(xn->shape);
  for (size_t i = 0; i < xn->data.size(); ++i) out->data[i] = fwd(xn->data[i]);
  check_finite(*out, name);

  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out, df]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    for (size_t i = 0; i < out->grad.size(); ++i) {
      xn->grad[i] += out->grad[i] * df(xn->data[i], out->data[i]);
    }
  });
  return Tensor(out);
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
}

Tensor Tensor::zeros(Shape shape) { return Tensor(make_node(std::move(shape))); }

Tensor Tensor::full(Shape shape, float value) {
  auto node = make_node(std::move(shape));
  std::fill(node->data.begin(), node->data.end(), value);
  return Tensor(node);
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  if (static_cast<int64_t>(values.size()) != numel(shape)) {
    throw std::invalid_argument("data length does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(node);
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

float Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() requires a single-element tensor");
  return node_->data[0];
}

std::vector<float> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<float>(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<std::shared_ptr<TensorNode>> inputs,
                  std::shared_ptr<TensorNode> output, std::function<void()> backward_fn) {
  ops_.push_back(Op{std::move(inputs), std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward() requires a scalar loss");
  loss.node()->grad.assign(1, 1.0f);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->backward_fn();
  }
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float, float y) { return y; }, [](float x, float) { return x; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

Tensor scale(const Tensor& a, float c) {
  return unary_elementwise(
      a, "scale", [c](float x) { return c * x; }, [c](float, float) { return c; });
}

Tensor add_scalar(const Tensor& a, float c) {
  return unary_elementwise(
      a, "add_scalar", [c](float x) { return x + c; }, [](float, float) { return 1.0f; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul expects rank-2 tensors");
  }
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw std::invalid_argument("matmul inner dimensions differ: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  auto an = a.node();
  auto bn = b.node();
  auto out = make_node({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      float av = an->data[static_cast<size_t>(i * k + p)];
      if (av == 0.0f) continue;
      const float* brow = bn->data.data() + p * n;
      float* orow = out->data.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(*out, "matmul");

  bool record = wants_grad({&a, &b});
  maybe_record(record, {an, bn}, out, [an, bn, out, m, k, n]() {
    if (out->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          float go = out->grad[static_cast<size_t>(i * n + j)];
          if (go == 0.0f) continue;
          const float* brow = bn->data.data() + 0;
          for (int64_t p = 0; p < k; ++p) {
            an->grad[static_cast<size_t>(i * k + p)] += go * brow[p * n + j];
          }
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
          float av = an->data[static_cast<size_t>(i * k + p)];
          if (av == 0.0f) continue;
          const float* grow = out->grad.data() + i * n;
          float* brow = bn->grad.data() + p * n;
          for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
  return Tensor(out);
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d expects a rank-2 tensor");
  int64_t m = a.dim(0), n = a.dim(1);
  auto an = a.node();
  auto out = make_node({n, m});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      out->data[static_cast<size_t>(j * m + i)] = an->data[static_cast<size_t>(i * n + j)];
    }
  }
  bool record = wants_grad({&a});
  maybe_record(record, {an}, out, [an, out, m, n]() {
    if (out->grad.empty()) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        an->grad[static_cast<size_t>(i * n + j)] += out->grad[static_cast<size_t>(j * m + i)];
      }
    }
  });
  return Tensor(out);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw std::invalid_argument("conv2d expects [H,W,C] or [B,H,W,C] input");
  }
  if (kernel.rank() != 4) throw std::invalid_argument("conv2d kernel must be [k,k,Cin,Cout]");
  if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d padding must be >= 0");

  const bool batched = input.rank() == 4;
  const int64_t batch = batched ? input.dim(0) : 1;
  const int64_t h = input.dim(batched ? 1 : 0);
  const int64_t w = input.dim(batched ? 2 : 1);
  const int64_t cin = input.dim(batched ? 3 : 2);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh != kw) throw std::invalid_argument("conv2d kernel must be square");
  if (kernel.dim(2) != cin) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(input.shape()) +
                                ", kernel " + shape_str(kernel.shape()));
  }
  const int64_t cout = kernel.dim(3);
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw std::invalid_argument("conv2d kernel larger than padded input");
  }
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;

  auto in = input.node();
  auto kn = kernel.node();
  Shape out_shape = batched ? Shape{batch, oh, ow, cout} : Shape{oh, ow, cout};
  auto out = make_node(out_shape);

  auto run = [=](std::span<const float> x, std::span<const float> wgt, std::span<float> y) {
    for (int64_t b = 0; b < batch; ++b) {
      const float* xb = x.data() + b * h * w * cin;
      float* yb = y.data() + b * oh * ow * cout;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          float* yrow = yb + (oy * ow + ox) * cout;
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              const float* xrow = xb + (iy * w + ix) * cin;
              const float* wrow = wgt.data() + (ky * kw + kx) * cin * cout;
              for (int64_t ci = 0; ci < cin; ++ci) {
                float xv = xrow[ci];
                if (xv == 0.0f) continue;
                const float* wc = wrow + ci * cout;
                for (int64_t co = 0; co < cout; ++co) yrow[co] += xv * wc[co];
              }
            }
          }
        }
      }
    }
  };
  run(in->data, kn->data, out->data);
  check_finite(*out, "conv2d");

  bool record = wants_grad({&input, &kernel});
  maybe_record(record, {in, kn}, out,
               [in, kn, out, batch, h, w, cin, kh, kw, cout, oh, ow, stride, padding]() {
                 if (out->grad.empty()) return;
                 const bool gi = in->requires_grad;
                 const bool gk = kn->requires_grad;
                 if (gi) in->ensure_grad();
                 if (gk) kn->ensure_grad();
                 for (int64_t b = 0; b < batch; ++b) {
                   const float* xb = in->data.data() + b * h * w * cin;
                   float* gxb = gi ? in->grad.data() + b * h * w * cin : nullptr;
                   const float* gyb = out->grad.data() + b * oh * ow * cout;
                   for (int64_t oy = 0; oy < oh; ++oy) {
                     for (int64_t ox = 0; ox < ow; ++ox) {
                       const float* gyrow = gyb + (oy * ow + ox) * cout;
                       for (int64_t ky = 0; ky < kh; ++ky) {
                         int64_t iy = oy * stride - padding + ky;
                         if (iy < 0 || iy >= h) continue;
                         for (int64_t kx = 0; kx < kw; ++kx) {
                           int64_t ix = ox * stride - padding + kx;
                           if (ix < 0 || ix >= w) continue;
                           const float* xrow = xb + (iy * w + ix) * cin;
                           for (int64_t ci = 0; ci < cin; ++ci) {
                             const float* wc = kn->data.data() + ((ky * kw + kx) * cin + ci) * cout;
                             float acc = 0.0f;
                             if (gk) {
                               float xv = xrow[ci];
                               float* gwc = kn->grad.data() + ((ky * kw + kx) * cin + ci) * cout;
                               for (int64_t co = 0; co < cout; ++co) {
                                 float gy = gyrow[co];
                                 gwc[co] += xv * gy;
                                 acc += wc[co] * gy;
                               }
                             } else {
                               for (int64_t co = 0; co < cout; ++co) acc += wc[co] * gyrow[co];
                             }
                             if (gi) gxb[(iy * w + ix) * cin + ci] += acc;
                           }
                         }
                       }
                     }
                   }
                 }
               });
  return Tensor(out);
}

float gelu_forward_value(float x) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  const float kAlpha = 0.7978845608028654f;
  float inner = kAlpha * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

namespace {
float gelu_grad_value(float x) {
  const float kAlpha = 0.7978845608028654f;
  float u = kAlpha * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float du = kAlpha * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}
}  // namespace

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x, "sigmoid", [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor gelu(const Tensor& x) {
  return unary_elementwise(
      x, "gelu", [](float v) { return gelu_forward_value(v); },
      [](float v, float) { return gelu_grad_value(v); });
}

Tensor log_elem(const Tensor& x) {
  return unary_elementwise(
      x, "log", [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::kRelu: return relu(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kGelu: return gelu(x);
  }
  throw std::invalid_argument("unknown activation");
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax axis out of range");
  auto xn = x.node();
  const Shape& shape = xn->shape;
  int64_t axis_len = shape[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<size_t>(i)];

  auto out = make_node(shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * axis_len * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (int64_t a = 0; a < axis_len; ++a) {
        mx = std::max(mx, xn->data[static_cast<size_t>(base + a * inner)]);
      }
      double denom = 0.0;
      for (int64_t a = 0; a < axis_len; ++a) {
        double e = std::exp(static_cast<double>(xn->data[static_cast<size_t>(base + a * inner)] - mx));
        out->data[static_cast<size_t>(base + a * inner)] = static_cast<float>(e);
        denom += e;
      }
      for (int64_t a = 0; a < axis_len; ++a) {
        out->data[static_cast<size_t>(base + a * inner)] =
            static_cast<float>(out->data[static_cast<size_t>(base + a * inner)] / denom);
      }
    }
  }
  check_finite(*out, "softmax");

  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out, outer, inner, axis_len]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * axis_len * inner + in;
        double dot = 0.0;
        for (int64_t a = 0; a < axis_len; ++a) {
          size_t i = static_cast<size_t>(base + a * inner);
          dot += static_cast<double>(out->grad[i]) * out->data[i];
        }
        for (int64_t a = 0; a < axis_len; ++a) {
          size_t i = static_cast<size_t>(base + a * inner);
          xn->grad[i] += out->data[i] * (out->grad[i] - static_cast<float>(dot));
        }
      }
    }
  });
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("layer_norm eps must be > 0");
  int64_t c = x.dim(x.rank() - 1);
  if (gamma.size() != c || beta.size() != c) {
    throw std::invalid_argument("layer_norm gamma/beta must have length C");
  }
  int64_t tokens = x.size() / c;
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto out = make_node(xn->shape);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(tokens));
  auto xhat = std::make_shared<std::vector<float>>(xn->data.size());

  for (int64_t t = 0; t < tokens; ++t) {
    const float* row = xn->data.data() + t * c;
    double mu = 0.0;
    for (int64_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t i = 0; i < c; ++i) {
      double d = row[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<size_t>(t)] = istd;
    for (int64_t i = 0; i < c; ++i) {
      float xh = (row[i] - static_cast<float>(mu)) * istd;
      (*xhat)[static_cast<size_t>(t * c + i)] = xh;
      out->data[static_cast<size_t>(t * c + i)] = gn->data[static_cast<size_t>(i)] * xh +
                                                  bn->data[static_cast<size_t>(i)];
    }
  }
  check_finite(*out, "layer_norm");

  bool record = wants_grad({&x, &gamma, &beta});
  maybe_record(record, {xn, gn, bn}, out, [xn, gn, bn, out, tokens, c, inv_std, xhat]() {
    if (out->grad.empty()) return;
    const bool gx = xn->requires_grad;
    const bool gg = gn->requires_grad;
    const bool gb = bn->requires_grad;
    if (gx) xn->ensure_grad();
    if (gg) gn->ensure_grad();
    if (gb) bn->ensure_grad();
    for (int64_t t = 0; t < tokens; ++t) {
      const float* go = out->grad.data() + t * c;
      const float* xh = xhat->data() + t * c;
      if (gg || gb) {
        for (int64_t i = 0; i < c; ++i) {
          if (gg) gn->grad[static_cast<size_t>(i)] += go[i] * xh[i];
          if (gb) bn->grad[static_cast<size_t>(i)] += go[i];
        }
      }
      if (gx) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (int64_t i = 0; i < c; ++i) {
          float dyh = go[i] * gn->data[static_cast<size_t>(i)];
          sum_dy += dyh;
          sum_dy_xh += static_cast<double>(dyh) * xh[i];
        }
        float istd = (*inv_std)[static_cast<size_t>(t)];
        float m1 = static_cast<float>(sum_dy / c);
        float m2 = static_cast<float>(sum_dy_xh / c);
        for (int64_t i = 0; i < c; ++i) {
          float dyh = go[i] * gn->data[static_cast<size_t>(i)];
          xn->grad[static_cast<size_t>(t * c + i)] += istd * (dyh - m1 - xh[i] * m2);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode, float momentum,
                  float eps) {
  int64_t c = x.dim(x.rank() - 1);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    throw std::invalid_argument("batch_norm parameter length mismatch");
  }
  int64_t n = x.size() / c;  // positions per channel (batch * spatial)
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto out = make_node(xn->shape);

  if (mode == Mode::kEval) {
    auto rm = running_mean.node();
    auto rv = running_var.node();
    std::vector<float> istd(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i) {
      istd[static_cast<size_t>(i)] = 1.0f / std::sqrt(rv->data[static_cast<size_t>(i)] + eps);
    }
    for (int64_t p = 0; p < n; ++p) {
      for (int64_t i = 0; i < c; ++i) {
        size_t idx = static_cast<size_t>(p * c + i);
        float xh = (xn->data[idx] - rm->data[static_cast<size_t>(i)]) * istd[static_cast<size_t>(i)];
        out->data[idx] = gn->data[static_cast<size_t>(i)] * xh + bn->data[static_cast<size_t>(i)];
      }
    }
    check_finite(*out, "batch_norm");
    bool record = wants_grad({&x, &gamma, &beta});
    maybe_record(record, {xn, gn, bn}, out,
                 [xn, gn, bn, out, n, c, istd = std::move(istd), rm]() {
                   if (out->grad.empty()) return;
                   const bool gx = xn->requires_grad;
                   const bool gg = gn->requires_grad;
                   const bool gb = bn->requires_grad;
                   if (gx) xn->ensure_grad();
                   if (gg) gn->ensure_grad();
                   if (gb) bn->ensure_grad();
                   for (int64_t p = 0; p < n; ++p) {
                     for (int64_t i = 0; i < c; ++i) {
                       size_t idx = static_cast<size_t>(p * c + i);
                       float go = out->grad[idx];
                       float is = istd[static_cast<size_t>(i)];
                       if (gx) xn->grad[idx] += go * gn->data[static_cast<size_t>(i)] * is;
                       if (gg) {
                         float xh = (xn->data[idx] - rm->data[static_cast<size_t>(i)]) * is;
                         gn->grad[static_cast<size_t>(i)] += go * xh;
                       }
                       if (gb) bn->grad[static_cast<size_t>(i)] += go;
                     }
                   }
                 });
    return Tensor(out);
  }

  // Train mode: batch statistics over all non-channel positions.
  auto mu = std::make_shared<std::vector<float>>(static_cast<size_t>(c), 0.0f);
  auto istd = std::make_shared<std::vector<float>>(static_cast<size_t>(c), 0.0f);
  auto xhat = std::make_shared<std::vector<float>>(xn->data.size());
  for (int64_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (int64_t p = 0; p < n; ++p) s += xn->data[static_cast<size_t>(p * c + i)];
    double m = s / static_cast<double>(n);
    double v = 0.0;
    for (int64_t p = 0; p < n; ++p) {
      double d = xn->data[static_cast<size_t>(p * c + i)] - m;
      v += d * d;
    }
    v /= static_cast<double>(n);
    (*mu)[static_cast<size_t>(i)] = static_cast<float>(m);
    (*istd)[static_cast<size_t>(i)] = static_cast<float>(1.0 / std::sqrt(v + eps));
    auto rm = running_mean.node();
    auto rv = running_var.node();
    rm->data[static_cast<size_t>(i)] =
        (1.0f - momentum) * rm->data[static_cast<size_t>(i)] + momentum * static_cast<float>(m);
    rv->data[static_cast<size_t>(i)] =
        (1.0f - momentum) * rv->data[static_cast<size_t>(i)] + momentum * static_cast<float>(v);
  }
  for (int64_t p = 0; p < n; ++p) {
    for (int64_t i = 0; i < c; ++i) {
      size_t idx = static_cast<size_t>(p * c + i);
      float xh = (xn->data[idx] - (*mu)[static_cast<size_t>(i)]) * (*istd)[static_cast<size_t>(i)];
      (*xhat)[idx] = xh;
      out->data[idx] = gn->data[static_cast<size_t>(i)] * xh + bn->data[static_cast<size_t>(i)];
    }
  }
  check_finite(*out, "batch_norm");

  bool record = wants_grad({&x, &gamma, &beta});
  maybe_record(record, {xn, gn, bn}, out, [xn, gn, bn, out, n, c, istd, xhat]() {
    if (out->grad.empty()) return;
    const bool gx = xn->requires_grad;
    const bool gg = gn->requires_grad;
    const bool gb = bn->requires_grad;
    if (gx) xn->ensure_grad();
    if (gg) gn->ensure_grad();
    if (gb) bn->ensure_grad();
    for (int64_t i = 0; i < c; ++i) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int64_t p = 0; p < n; ++p) {
        size_t idx = static_cast<size_t>(p * c + i);
        sum_dy += out->grad[idx];
        sum_dy_xh += static_cast<double>(out->grad[idx]) * (*xhat)[idx];
      }
      if (gg) gn->grad[static_cast<size_t>(i)] += static_cast<float>(sum_dy_xh);
      if (gb) bn->grad[static_cast<size_t>(i)] += static_cast<float>(sum_dy);
      if (gx) {
        float g = gn->data[static_cast<size_t>(i)];
        float is = (*istd)[static_cast<size_t>(i)];
        float m1 = static_cast<float>(sum_dy / n);
        float m2 = static_cast<float>(sum_dy_xh / n);
        for (int64_t p = 0; p < n; ++p) {
          size_t idx = static_cast<size_t>(p * c + i);
          xn->grad[idx] += g * is * (out->grad[idx] - m1 - (*xhat)[idx] * m2);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor adaptive_avg_pool(const Tensor& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw std::invalid_argument("adaptive_avg_pool expects [H,W,C] or [B,H,W,C]");
  }
  const bool batched = x.rank() == 4;
  const int64_t batch = batched ? x.dim(0) : 1;
  const int64_t h = x.dim(batched ? 1 : 0);
  const int64_t w = x.dim(batched ? 2 : 1);
  const int64_t c = x.dim(batched ? 3 : 2);
  auto xn = x.node();
  Shape out_shape = batched ? Shape{batch, 1, 1, c} : Shape{1, 1, c};
  auto out = make_node(out_shape);
  const float inv = 1.0f / static_cast<float>(h * w);
  for (int64_t b = 0; b < batch; ++b) {
    const float* xb = xn->data.data() + b * h * w * c;
    float* ob = out->data.data() + b * c;
    for (int64_t p = 0; p < h * w; ++p) {
      for (int64_t i = 0; i < c; ++i) ob[i] += xb[p * c + i];
    }
    for (int64_t i = 0; i < c; ++i) ob[i] *= inv;
  }
  check_finite(*out, "adaptive_avg_pool");

  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out, batch, h, w, c, inv]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    for (int64_t b = 0; b < batch; ++b) {
      const float* gob = out->grad.data() + b * c;
      float* gxb = xn->grad.data() + b * h * w * c;
      for (int64_t p = 0; p < h * w; ++p) {
        for (int64_t i = 0; i < c; ++i) gxb[p * c + i] += gob[i] * inv;
      }
    }
  });
  return Tensor(out);
}

Tensor sum(const Tensor& x) {
  auto xn = x.node();
  double acc = 0.0;
  for (float v : xn->data) acc += v;
  auto out = make_node({1});
  out->data[0] = static_cast<float>(acc);
  check_finite(*out, "sum");
  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    float go = out->grad[0];
    for (float& g : xn->grad) g += go;
  });
  return Tensor(out);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.size())); }

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw std::invalid_argument("reshape element count mismatch: " + shape_str(x.shape()) +
                                " -> " + shape_str(new_shape));
  }
  auto xn = x.node();
  auto out = std::make_shared<TensorNode>();
  out->shape = std::move(new_shape);
  out->data = xn->data;
  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    for (size_t i = 0; i < out->grad.size(); ++i) xn->grad[i] += out->grad[i];
  });
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat requires at least one tensor");
  int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != rank) throw std::invalid_argument("concat rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != out_shape[static_cast<size_t>(d)]) {
        throw std::invalid_argument("concat shape mismatch off-axis");
      }
    }
    axis_total += t.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;
  auto out = make_node(out_shape);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  bool record = false;
  for (const Tensor& t : parts) {
    nodes.push_back(t.node());
    offsets.push_back(off);
    int64_t a = t.dim(axis);
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(t.node()->data.data() + o * a * inner, a * inner,
                  out->data.data() + (o * axis_total + off) * inner);
    }
    off += a;
    if (Tape::active() && t.requires_grad()) record = true;
  }

  maybe_record(record, nodes, out, [nodes, offsets, out, outer, inner, axis_total, axis]() {
    if (out->grad.empty()) return;
    for (size_t p = 0; p < nodes.size(); ++p) {
      auto& node = nodes[p];
      if (!node->requires_grad) continue;
      node->ensure_grad();
      int64_t a = node->shape[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o) {
        const float* src = out->grad.data() + (o * axis_total + offsets[p]) * inner;
        float* dst = node->grad.data() + o * a * inner;
        for (int64_t i = 0; i < a * inner; ++i) dst[i] += src[i];
      }
    }
  });
  return Tensor(out);
}

Tensor select(const Tensor& x, int64_t index) {
  if (x.rank() < 1) throw std::invalid_argument("select requires rank >= 1");
  if (index < 0 || index >= x.dim(0)) throw std::invalid_argument("select index out of range");
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  if (out_shape.empty()) out_shape = {1};
  int64_t chunk = x.size() / x.dim(0);
  auto xn = x.node();
  auto out = make_node(out_shape);
  std::copy_n(xn->data.data() + index * chunk, chunk, out->data.data());
  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out, index, chunk]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    for (int64_t i = 0; i < chunk; ++i) {
      xn->grad[static_cast<size_t>(index * chunk + i)] += out->grad[static_cast<size_t>(i)];
    }
  });
  return Tensor(out);
}

Tensor pick(const Tensor& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.size()) {
    throw std::invalid_argument("pick index out of range");
  }
  auto xn = x.node();
  auto out = make_node({1});
  out->data[0] = xn->data[static_cast<size_t>(flat_index)];
  bool record = wants_grad({&x});
  maybe_record(record, {xn}, out, [xn, out, flat_index]() {
    if (out->grad.empty()) return;
    xn->ensure_grad();
    xn->grad[static_cast<size_t>(flat_index)] += out->grad[0];
  });
  return Tensor(out);
}

}  // namespace vtff
