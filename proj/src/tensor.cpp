#include "tadkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tadkd {

namespace {

int shape_size(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::runtime_error(std::string(op) + ": shape mismatch: " + detail);
}

// C(MxN) += A(MxK) * B(KxN), all row-major.
void gemm_nn(int M, int K, int N, const double* A, const double* B, double* C) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + static_cast<size_t>(m) * K;
    double* c = C + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + static_cast<size_t>(k) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C(MxN) += A^T * B with A stored (KxM), B (KxN).
void gemm_tn(int M, int K, int N, const double* A, const double* B, double* C) {
  for (int k = 0; k < K; ++k) {
    const double* a = A + static_cast<size_t>(k) * M;
    const double* b = B + static_cast<size_t>(k) * N;
    for (int m = 0; m < M; ++m) {
      const double av = a[m];
      if (av == 0.0) continue;
      double* c = C + static_cast<size_t>(m) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C(MxN) += A * B^T with A (MxK), B (NxK).
void gemm_nt(int M, int K, int N, const double* A, const double* B, double* C) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + static_cast<size_t>(m) * K;
    double* c = C + static_cast<size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const double* b = B + static_cast<size_t>(n) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[n] += acc;
    }
  }
}

}  // namespace

// ---- RNG helpers ------------------------------------------------------------

double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

double normal(Rng& rng, double mean, double stddev) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  return mean + stddev * z;
}

int uniform_int(Rng& rng, int lo, int hi) {
  const uint64_t bound = static_cast<uint64_t>(hi - lo) + 1;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  uint64_t r = rng();
  while (r >= limit) r = rng();
  return lo + static_cast<int>(r % bound);
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the combined value
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---- Tensor core ----------------------------------------------------------

struct Tensor::Impl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = nullptr;
  std::vector<std::shared_ptr<Impl>> parents;
  std::function<void(const double*)> backward_fn;  // receives this node's grad

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const int n = shape_size(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  const int n = shape_size(shape);
  if (static_cast<int>(data.size()) != n)
    shape_error("from_data", "data length " + std::to_string(data.size()) +
                                 " vs shape " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::size() const { return static_cast<int>(impl_->data.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(i); }
double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }
const std::vector<double>& Tensor::data_vec() const { return impl_->data; }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

double* Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad.data();
}

const double* Tensor::grad_data() const {
  return impl_->grad.empty() ? nullptr : impl_->grad.data();
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty())
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::value() const {
  if (size() != 1) shape_error("value", "expected scalar, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(int flat) const { return impl_->data.at(flat); }

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ == other.impl_;
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor make_op(const char* name, std::vector<int> shape,
               std::vector<double> data, std::vector<Tensor> inputs,
               std::function<void(const double*)> backward_fn) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs)
      if (in.requires_grad()) needs = true;
  if (needs) {
    out.impl_->requires_grad = true;
    out.impl_->op = name;
    out.impl_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.impl_->parents.push_back(in.impl_);
    out.impl_->backward_fn = std::move(backward_fn);
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::runtime_error("backward: loss must be a scalar tensor");
  if (!loss.requires_grad())
    throw std::runtime_error("backward: loss was not produced by a recorded graph");

  using Impl = Tensor::Impl;
  // Iterative post-order DFS over parents; reversed order is a valid reverse
  // topological order, so each node's grad is complete before its closure runs.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, size_t>> stack;
  stack.emplace_back(loss.impl_.get(), 0);
  visited.insert(loss.impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.impl_->ensure_grad();
  loss.impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->backward_fn) node->backward_fn(node->grad.data());
  }
}

namespace {

// Accumulation helper for closures: adds into a tensor's grad if it wants one.
void accum(Tensor& t, const std::function<void(double*)>& fill) {
  if (!t.requires_grad()) return;
  fill(t.grad());
}

}  // namespace

// ---- elementwise / reduction ops -------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const double* xd = x.data();
  for (int i = 0; i < x.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  Tensor xin = x;
  return make_op("relu", x.shape(), std::move(out), {x}, [xin](const double* g) mutable {
    accum(xin, [&](double* gx) {
      const double* xd = xin.data();
      for (int i = 0; i < xin.size(); ++i)
        if (xd[i] > 0.0) gx[i] += g[i];  // subgradient at 0 is 0
    });
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  const double* xd = x.data();
  for (int i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xd[i]));
  Tensor xin = x;
  auto vals = std::make_shared<std::vector<double>>(out);
  return make_op("sigmoid", x.shape(), std::move(out), {x},
                 [xin, vals](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (size_t i = 0; i < vals->size(); ++i) {
                       const double s = (*vals)[i];
                       gx[i] += g[i] * s * (1.0 - s);
                     }
                   });
                 });
}

Tensor softmax(const Tensor& x) {
  if (x.shape().empty()) shape_error("softmax", "rank-0 input");
  const int k = x.shape().back();
  const int rows = x.size() / k;
  std::vector<double> out(x.size());
  const double* xd = x.data();
  for (int r = 0; r < rows; ++r) {
    const double* row = xd + static_cast<size_t>(r) * k;
    double* o = out.data() + static_cast<size_t>(r) * k;
    double mx = row[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      o[i] = std::exp(row[i] - mx);
      sum += o[i];
    }
    for (int i = 0; i < k; ++i) o[i] /= sum;
  }
  Tensor xin = x;
  auto probs = std::make_shared<std::vector<double>>(out);
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [xin, probs, rows, k](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (int r = 0; r < rows; ++r) {
                       const double* p = probs->data() + static_cast<size_t>(r) * k;
                       const double* gr = g + static_cast<size_t>(r) * k;
                       double dot = 0.0;
                       for (int i = 0; i < k; ++i) dot += gr[i] * p[i];
                       double* go = gx + static_cast<size_t>(r) * k;
                       for (int i = 0; i < k; ++i) go[i] += p[i] * (gr[i] - dot);
                     }
                   });
                 });
}

namespace {

Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          const std::function<double(double, double)>& f,
                          const std::function<void(const double*, const Tensor&,
                                                   const Tensor&, double*, double*)>& bw) {
  if (a.shape() != b.shape())
    shape_error(name, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  const double* ad = a.data();
  const double* bd = b.data();
  for (int i = 0; i < a.size(); ++i) out[i] = f(ad[i], bd[i]);
  Tensor ain = a, bin = b;
  return make_op(name, a.shape(), std::move(out), {a, b},
                 [ain, bin, bw](const double* g) mutable {
                   double* ga = ain.requires_grad() ? ain.grad() : nullptr;
                   double* gb = bin.requires_grad() ? bin.grad() : nullptr;
                   bw(g, ain, bin, ga, gb);
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const double* g, const Tensor& a, const Tensor&, double* ga, double* gb) {
        for (int i = 0; i < a.size(); ++i) {
          if (ga) ga[i] += g[i];
          if (gb) gb[i] += g[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const double* g, const Tensor& a, const Tensor&, double* ga, double* gb) {
        for (int i = 0; i < a.size(); ++i) {
          if (ga) ga[i] += g[i];
          if (gb) gb[i] -= g[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const double* g, const Tensor& a, const Tensor& b, double* ga, double* gb) {
        const double* ad = a.data();
        const double* bd = b.data();
        for (int i = 0; i < a.size(); ++i) {
          if (ga) ga[i] += g[i] * bd[i];
          if (gb) gb[i] += g[i] * ad[i];
        }
      });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const double* ad = a.data();
  for (int i = 0; i < a.size(); ++i) out[i] = c * ad[i];
  Tensor ain = a;
  return make_op("scale", a.shape(), std::move(out), {a},
                 [ain, c](const double* g) mutable {
                   accum(ain, [&](double* ga) {
                     for (int i = 0; i < ain.size(); ++i) ga[i] += c * g[i];
                   });
                 });
}

Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  const double* xd = x.data();
  for (int i = 0; i < x.size(); ++i) s += xd[i];
  Tensor xin = x;
  return make_op("reduce_sum", {1}, {s}, {x}, [xin](const double* g) mutable {
    accum(xin, [&](double* gx) {
      for (int i = 0; i < xin.size(); ++i) gx[i] += g[0];
    });
  });
}

Tensor reduce_mean(const Tensor& x) {
  const double inv = 1.0 / x.size();
  double s = 0.0;
  const double* xd = x.data();
  for (int i = 0; i < x.size(); ++i) s += xd[i];
  Tensor xin = x;
  return make_op("reduce_mean", {1}, {s * inv}, {x},
                 [xin, inv](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (int i = 0; i < xin.size(); ++i) gx[i] += g[0] * inv;
                   });
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.shape().size() != 2) shape_error("gather_rows", "expected 2-d input");
  const int cols = x.dim(1);
  std::vector<double> out(rows.size() * cols);
  const double* xd = x.data();
  for (size_t r = 0; r < rows.size(); ++r) {
    const int src = rows[r];
    if (src < 0 || src >= x.dim(0))
      throw std::runtime_error("gather_rows: row index " + std::to_string(src) +
                               " out of range [0," + std::to_string(x.dim(0)) + ")");
    std::copy_n(xd + static_cast<size_t>(src) * cols, cols,
                out.data() + r * cols);
  }
  Tensor xin = x;
  auto idx = rows;
  return make_op("gather_rows", {static_cast<int>(rows.size()), cols},
                 std::move(out), {x}, [xin, idx, cols](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (size_t r = 0; r < idx.size(); ++r) {
                       double* dst = gx + static_cast<size_t>(idx[r]) * cols;
                       const double* src = g + r * cols;
                       for (int c = 0; c < cols; ++c) dst[c] += src[c];
                     }
                   });
                 });
}

Tensor gather_elements(const Tensor& x, const std::vector<int>& flat_indices) {
  std::vector<double> out(flat_indices.size());
  for (size_t i = 0; i < flat_indices.size(); ++i) {
    const int src = flat_indices[i];
    if (src < 0 || src >= x.size())
      throw std::runtime_error("gather_elements: index out of range");
    out[i] = x.at(src);
  }
  Tensor xin = x;
  auto idx = flat_indices;
  return make_op("gather_elements", {static_cast<int>(flat_indices.size())},
                 std::move(out), {x}, [xin, idx](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
                   });
                 });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat", "no inputs");
  std::vector<int> rest(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0, inner = 1;
  for (int d : rest) inner *= d;
  for (const auto& p : parts) {
    std::vector<int> r(p.shape().begin() + 1, p.shape().end());
    if (r != rest)
      shape_error("concat", "inner dims differ: " + shape_str(parts[0].shape()) +
                                " vs " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows) * inner);
  for (const auto& p : parts)
    out.insert(out.end(), p.data(), p.data() + p.size());
  std::vector<int> shape;
  shape.push_back(rows);
  shape.insert(shape.end(), rest.begin(), rest.end());
  auto inputs = parts;
  return make_op("concat", std::move(shape), std::move(out), parts,
                 [inputs](const double* g) mutable {
                   size_t off = 0;
                   for (auto& p : inputs) {
                     if (p.requires_grad()) {
                       double* gp = p.grad();
                       for (int i = 0; i < p.size(); ++i) gp[i] += g[off + i];
                     }
                     off += p.size();
                   }
                 });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_size(shape) != x.size())
    shape_error("reshape", shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor xin = x;
  std::vector<double> out(x.data(), x.data() + x.size());
  return make_op("reshape", std::move(shape), std::move(out), {x},
                 [xin](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (int i = 0; i < xin.size(); ++i) gx[i] += g[i];
                   });
                 });
}

Tensor mul_mask_chw(const Tensor& x, const Tensor& mask) {
  if (x.shape().size() != 3 || mask.shape().size() != 2 ||
      x.dim(1) != mask.dim(0) || x.dim(2) != mask.dim(1))
    shape_error("mul_mask_chw", shape_str(x.shape()) + " vs " + shape_str(mask.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> out(x.size());
  const double* xd = x.data();
  const double* md = mask.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i)
      out[static_cast<size_t>(ch) * hw + i] = xd[static_cast<size_t>(ch) * hw + i] * md[i];
  Tensor xin = x, min = mask;
  return make_op("mul_mask_chw", x.shape(), std::move(out), {x, mask},
                 [xin, min, c, hw](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     const double* md = min.data();
                     for (int ch = 0; ch < c; ++ch)
                       for (int i = 0; i < hw; ++i)
                         gx[static_cast<size_t>(ch) * hw + i] +=
                             g[static_cast<size_t>(ch) * hw + i] * md[i];
                   });
                   accum(min, [&](double* gm) {
                     const double* xd = xin.data();
                     for (int ch = 0; ch < c; ++ch)
                       for (int i = 0; i < hw; ++i)
                         gm[i] += g[static_cast<size_t>(ch) * hw + i] *
                                  xd[static_cast<size_t>(ch) * hw + i];
                   });
                 });
}

Tensor select_row_blocks(const Tensor& x, const std::vector<int>& block_index,
                         int block_size) {
  if (x.shape().size() != 2) shape_error("select_row_blocks", "expected 2-d input");
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(block_index.size()) != rows)
    shape_error("select_row_blocks", "index count " + std::to_string(block_index.size()) +
                                         " vs rows " + std::to_string(rows));
  std::vector<double> out(static_cast<size_t>(rows) * block_size);
  const double* xd = x.data();
  for (int r = 0; r < rows; ++r) {
    const int off = block_index[r] * block_size;
    if (off < 0 || off + block_size > cols)
      throw std::runtime_error("select_row_blocks: block out of range");
    std::copy_n(xd + static_cast<size_t>(r) * cols + off, block_size,
                out.data() + static_cast<size_t>(r) * block_size);
  }
  Tensor xin = x;
  auto idx = block_index;
  return make_op("select_row_blocks", {rows, block_size}, std::move(out), {x},
                 [xin, idx, block_size, cols](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     for (size_t r = 0; r < idx.size(); ++r) {
                       double* dst = gx + r * cols + idx[r] * block_size;
                       const double* src = g + r * block_size;
                       for (int c = 0; c < block_size; ++c) dst[c] += src[c];
                     }
                   });
                 });
}

// ---- spatial ops -------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    shape_error("conv2d", "input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
  const int ic = x.dim(0), ih = x.dim(1), iw = x.dim(2);
  const int oc = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ic)
    shape_error("conv2d", "in-channels " + std::to_string(ic) + " vs weight " +
                              std::to_string(w.dim(1)));
  if (b.size() != oc) shape_error("conv2d", "bias size vs out-channels");
  const int oh = (ih + 2 * padding - k) / stride + 1;
  const int ow = (iw + 2 * padding - k) / stride + 1;
  if (oh <= 0 || ow <= 0) shape_error("conv2d", "empty output for " + shape_str(x.shape()));

  const int ck = ic * k * k;
  const int ohw = oh * ow;
  auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(ck) * ohw, 0.0);
  const double* xd = x.data();
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col->data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int sy = oy * stride - padding + ky;
          if (sy < 0 || sy >= ih) continue;
          const double* src = xd + (static_cast<size_t>(c) * ih + sy) * iw;
          for (int ox = 0; ox < ow; ++ox) {
            const int sx = ox * stride - padding + kx;
            if (sx >= 0 && sx < iw) dst[oy * ow + ox] = src[sx];
          }
        }
      }
    }
  }

  std::vector<double> out(static_cast<size_t>(oc) * ohw);
  const double* bd = b.data();
  for (int c = 0; c < oc; ++c)
    std::fill_n(out.data() + static_cast<size_t>(c) * ohw, ohw, bd[c]);
  gemm_nn(oc, ck, ohw, w.data(), col->data(), out.data());

  Tensor xin = x, win = w, bin = b;
  return make_op(
      "conv2d", {oc, oh, ow}, std::move(out), {x, w, b},
      [xin, win, bin, col, ic, ih, iw, oc, k, oh, ow, stride, padding](const double* g) mutable {
        const int ck = ic * k * k;
        const int ohw = oh * ow;
        accum(win, [&](double* gw) { gemm_nt(oc, ohw, ck, g, col->data(), gw); });
        accum(bin, [&](double* gb) {
          for (int c = 0; c < oc; ++c) {
            double acc = 0.0;
            const double* gr = g + static_cast<size_t>(c) * ohw;
            for (int i = 0; i < ohw; ++i) acc += gr[i];
            gb[c] += acc;
          }
        });
        accum(xin, [&](double* gx) {
          std::vector<double> gcol(static_cast<size_t>(ck) * ohw, 0.0);
          gemm_tn(ck, oc, ohw, win.data(), g, gcol.data());
          for (int c = 0; c < ic; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const double* src =
                    gcol.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                  const int sy = oy * stride - padding + ky;
                  if (sy < 0 || sy >= ih) continue;
                  double* dst = gx + (static_cast<size_t>(c) * ih + sy) * iw;
                  for (int ox = 0; ox < ow; ++ox) {
                    const int sx = ox * stride - padding + kx;
                    if (sx >= 0 && sx < iw) dst[sx] += src[oy * ow + ox];
                  }
                }
              }
            }
          }
        });
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.shape().size() != 2) shape_error("linear", "weight " + shape_str(w.shape()));
  const bool vec = x.shape().size() == 1;
  const int rows = vec ? 1 : x.dim(0);
  const int in = vec ? x.dim(0) : x.dim(1);
  const int out_dim = w.dim(1);
  if (in != w.dim(0))
    shape_error("linear", "input features " + std::to_string(in) + " vs weight rows " +
                              std::to_string(w.dim(0)));
  if (b.size() != out_dim) shape_error("linear", "bias size vs out features");
  std::vector<double> out(static_cast<size_t>(rows) * out_dim);
  const double* bd = b.data();
  for (int r = 0; r < rows; ++r)
    std::copy_n(bd, out_dim, out.data() + static_cast<size_t>(r) * out_dim);
  gemm_nn(rows, in, out_dim, x.data(), w.data(), out.data());

  std::vector<int> oshape = vec ? std::vector<int>{out_dim} : std::vector<int>{rows, out_dim};
  Tensor xin = x, win = w, bin = b;
  return make_op("linear", std::move(oshape), std::move(out), {x, w, b},
                 [xin, win, bin, rows, in, out_dim](const double* g) mutable {
                   accum(win, [&](double* gw) { gemm_tn(in, rows, out_dim, xin.data(), g, gw); });
                   accum(bin, [&](double* gb) {
                     for (int r = 0; r < rows; ++r) {
                       const double* gr = g + static_cast<size_t>(r) * out_dim;
                       for (int c = 0; c < out_dim; ++c) gb[c] += gr[c];
                     }
                   });
                   accum(xin, [&](double* gx) { gemm_nt(rows, out_dim, in, g, win.data(), gx); });
                 });
}

namespace {

Tensor pool2d(const char* name, const Tensor& x, int kernel, int stride, bool is_max) {
  if (x.shape().size() != 3) shape_error(name, "expected {C,H,W}, got " + shape_str(x.shape()));
  const int c = x.dim(0), ih = x.dim(1), iw = x.dim(2);
  if (kernel > ih || kernel > iw) shape_error(name, "kernel exceeds input");
  const int oh = (ih - kernel) / stride + 1;
  const int ow = (iw - kernel) / stride + 1;
  std::vector<double> out(static_cast<size_t>(c) * oh * ow);
  auto argmax = std::make_shared<std::vector<int>>();
  if (is_max) argmax->resize(out.size());
  const double* xd = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double best = -1e300, acc = 0.0;
        int best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const int idx = (ch * ih + oy * stride + ky) * iw + ox * stride + kx;
            const double v = xd[idx];
            if (is_max) {
              if (v > best) { best = v; best_idx = idx; }
            } else {
              acc += v;
            }
          }
        }
        const size_t o = (static_cast<size_t>(ch) * oh + oy) * ow + ox;
        if (is_max) {
          out[o] = best;
          (*argmax)[o] = best_idx;
        } else {
          out[o] = acc / (kernel * kernel);
        }
      }
    }
  }
  Tensor xin = x;
  const double inv = 1.0 / (kernel * kernel);
  return make_op(name, {c, oh, ow}, std::move(out), {x},
                 [xin, argmax, is_max, c, ih, iw, oh, ow, kernel, stride, inv](const double* g) mutable {
                   accum(xin, [&](double* gx) {
                     if (is_max) {
                       for (size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += g[o];
                     } else {
                       for (int ch = 0; ch < c; ++ch)
                         for (int oy = 0; oy < oh; ++oy)
                           for (int ox = 0; ox < ow; ++ox) {
                             const double gv =
                                 g[(static_cast<size_t>(ch) * oh + oy) * ow + ox] * inv;
                             for (int ky = 0; ky < kernel; ++ky)
                               for (int kx = 0; kx < kernel; ++kx)
                                 gx[(ch * ih + oy * stride + ky) * iw + ox * stride + kx] += gv;
                           }
                     }
                   });
                 });
}

}  // namespace

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
  return pool2d("max_pool2d", x, kernel, stride, true);
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride) {
  return pool2d("avg_pool2d", x, kernel, stride, false);
}

// ---- fused losses ------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) shape_error("softmax_cross_entropy", "expected {N,K}");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    shape_error("softmax_cross_entropy", "label count vs rows");
  std::vector<double> out(n);
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * k);
  const double* xd = logits.data();
  for (int r = 0; r < n; ++r) {
    if (labels[r] < 0 || labels[r] >= k)
      throw std::runtime_error("softmax_cross_entropy: label out of range");
    const double* row = xd + static_cast<size_t>(r) * k;
    double mx = row[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    double* p = probs->data() + static_cast<size_t>(r) * k;
    for (int i = 0; i < k; ++i) {
      p[i] = std::exp(row[i] - mx);
      sum += p[i];
    }
    for (int i = 0; i < k; ++i) p[i] /= sum;
    // log-space: lse - logit[label]
    out[r] = std::log(sum) + mx - row[labels[r]];
  }
  Tensor lin = logits;
  auto lab = labels;
  return make_op("softmax_cross_entropy", {n}, std::move(out), {logits},
                 [lin, probs, lab, n, k](const double* g) mutable {
                   accum(lin, [&](double* gx) {
                     for (int r = 0; r < n; ++r) {
                       const double* p = probs->data() + static_cast<size_t>(r) * k;
                       double* go = gx + static_cast<size_t>(r) * k;
                       for (int i = 0; i < k; ++i) go[i] += g[r] * p[i];
                       go[lab[r]] -= g[r];
                     }
                   });
                 });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (logits.shape().size() != 2) shape_error("bce_with_logits", "expected {N,K}");
  const int n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != static_cast<size_t>(logits.size()))
    shape_error("bce_with_logits", "target count vs logits");
  std::vector<double> out(n, 0.0);
  const double* xd = logits.data();
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < k; ++i) {
      const double z = xd[static_cast<size_t>(r) * k + i];
      const double y = targets[static_cast<size_t>(r) * k + i];
      out[r] += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
  }
  Tensor lin = logits;
  auto targ = std::make_shared<std::vector<double>>(targets);
  return make_op("bce_with_logits", {n}, std::move(out), {logits},
                 [lin, targ, n, k](const double* g) mutable {
                   accum(lin, [&](double* gx) {
                     const double* xd = lin.data();
                     for (int r = 0; r < n; ++r)
                       for (int i = 0; i < k; ++i) {
                         const size_t o = static_cast<size_t>(r) * k + i;
                         const double s = 1.0 / (1.0 + std::exp(-xd[o]));
                         gx[o] += g[r] * (s - (*targ)[o]);
                       }
                   });
                 });
}

Tensor smooth_l1_rows(const Tensor& pred, const std::vector<double>& target) {
  if (pred.shape().size() != 2) shape_error("smooth_l1_rows", "expected {N,K}");
  const int n = pred.dim(0), k = pred.dim(1);
  if (target.size() != static_cast<size_t>(pred.size()))
    shape_error("smooth_l1_rows", "target count vs pred");
  std::vector<double> out(n, 0.0);
  const double* xd = pred.data();
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < k; ++i) {
      const double d = xd[static_cast<size_t>(r) * k + i] - target[static_cast<size_t>(r) * k + i];
      out[r] += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
    }
  }
  Tensor pin = pred;
  auto targ = std::make_shared<std::vector<double>>(target);
  return make_op("smooth_l1_rows", {n}, std::move(out), {pred},
                 [pin, targ, n, k](const double* g) mutable {
                   accum(pin, [&](double* gx) {
                     const double* xd = pin.data();
                     for (int r = 0; r < n; ++r)
                       for (int i = 0; i < k; ++i) {
                         const size_t o = static_cast<size_t>(r) * k + i;
                         const double d = xd[o] - (*targ)[o];
                         const double dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
                         gx[o] += g[r] * dd;
                       }
                   });
                 });
}

// ---- optimizer -----------------------------------------------------------------

SgdOptimizer::SgdOptimizer(double learning_rate, double momentum, double weight_decay)
    : learning_rate_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {}

void SgdOptimizer::step(std::vector<Tensor>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    velocity_keys_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      velocity_[i].assign(params[i].size(), 0.0);
      velocity_keys_[i] = params[i].data();
    }
  }
  if (velocity_.size() != params.size())
    throw std::runtime_error("sgd_step: parameter list changed size");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (velocity_keys_[i] != p.data())
      throw std::runtime_error("sgd_step: parameter list changed identity");
    if (!p.has_grad())
      throw std::runtime_error("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    if (velocity_[i].size() != static_cast<size_t>(p.size()))
      throw std::runtime_error("sgd_step: velocity/parameter shape mismatch");
    double* pd = p.data();
    double* gd = p.grad();
    double* v = velocity_[i].data();
    for (int j = 0; j < p.size(); ++j) {
      const double g = gd[j] + weight_decay_ * pd[j];
      v[j] = momentum_ * v[j] + g;
      pd[j] -= learning_rate_ * v[j];
    }
    p.zero_grad();
  }
}

// ---- finite differences ----------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& f,
                         std::vector<Tensor> params, double step) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    const double* g = p.grad_data();
    analytic.emplace_back(g ? std::vector<double>(g, g + p.size())
                            : std::vector<double>(p.size(), 0.0));
  }
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    double* pd = p.data();
    for (int j = 0; j < p.size(); ++j) {
      const double saved = pd[j];
      pd[j] = saved + step;
      const double fp = f().value();
      pd[j] = saved - step;
      const double fm = f().value();
      pd[j] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[pi][j];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double step) {
  return finite_diff_check([&]() { return f(x); }, {x}, step);
}

}  // namespace tadkd
