#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace tadkd {

// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// the distributions below are hand-rolled so streams are identical across
// standard-library implementations.
using Rng = std::mt19937_64;

double uniform01(Rng& rng);                       // [0, 1)
double uniform(Rng& rng, double lo, double hi);   // [lo, hi)
double normal(Rng& rng, double mean, double stddev);
int uniform_int(Rng& rng, int lo, int hi);        // inclusive, unbiased
uint64_t mix_seed(uint64_t seed, uint64_t stream);

/// Dense n-dimensional f64 tensor with an attached gradient slot.
///
/// A Tensor is a value-semantic handle onto shared storage; copying shares
/// the storage. Operations on tensors that require gradients record a
/// backward closure on the output, forming a dynamic tape that backward()
/// replays in reverse topological order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int size() const;
  int dim(int i) const;

  double* data();
  const double* data() const;
  const std::vector<double>& data_vec() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool has_grad() const;          // grad buffer allocated
  double* grad();                 // allocates on demand
  const double* grad_data() const;
  void zero_grad();

  double value() const;           // scalar tensors only
  double at(int flat) const;

  // Identity test on storage (same underlying buffer).
  bool same_storage(const Tensor& other) const;

  friend void backward(const Tensor& loss);
  friend Tensor make_op(const char* name, std::vector<int> shape,
                        std::vector<double> data, std::vector<Tensor> inputs,
                        std::function<void(const double*)> backward_fn);

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

/// Runs reverse-mode accumulation from a scalar loss. Every requires_grad
/// tensor reachable through the recorded graph receives d(loss)/d(tensor),
/// added into its grad buffer. Each node's closure runs exactly once.
void backward(const Tensor& loss);

/// Builds a custom op node: `data` is the already-computed forward value,
/// `backward_fn` receives the output gradient and must accumulate into the
/// inputs' grads. The node is recorded only if some input requires grad.
Tensor make_op(const char* name, std::vector<int> shape,
               std::vector<double> data, std::vector<Tensor> inputs,
               std::function<void(const double*)> backward_fn);

/// Suppresses graph recording for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// ---- forward ops -----------------------------------------------------------

// x: {C,H,W}, w: {OC,IC,K,K}, b: {OC}
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);
// x: {N,IN} or {IN}, w: {IN,OUT}, b: {OUT}
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // over the last axis
Tensor max_pool2d(const Tensor& x, int kernel, int stride);
Tensor avg_pool2d(const Tensor& x, int kernel, int stride);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor gather_elements(const Tensor& x, const std::vector<int>& flat_indices);
Tensor concat(const std::vector<Tensor>& parts);  // along axis 0
Tensor reshape(const Tensor& x, std::vector<int> shape);
// x: {C,H,W} multiplied by m: {H,W} broadcast across channels
Tensor mul_mask_chw(const Tensor& x, const Tensor& mask);
// per-row k: out[i] = x[i, block_index[i]*block : ...+block]
Tensor select_row_blocks(const Tensor& x, const std::vector<int>& block_index,
                         int block_size);

// ---- fused losses (numerically stable) --------------------------------------

// logits: {N,K}; returns {N}: per-row -log softmax(logits)[label]
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels);
// logits: {N,K}, targets: {N,K} constants; returns {N}: per-row sum over K of
// binary cross-entropy between sigmoid(logit) and target
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);
// pred, target: {N,K}; returns {N}: per-row sum of smooth-L1(pred - target)
Tensor smooth_l1_rows(const Tensor& pred, const std::vector<double>& target);

// ---- optimizer ---------------------------------------------------------------

/// Momentum SGD: v = mu*v + (g + wd*p); p -= lr*v. Grads are zeroed after
/// each step. Velocity buffers are keyed by parameter storage.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum, double weight_decay);
  void step(std::vector<Tensor>& params);
  void set_learning_rate(double lr) { learning_rate_ = lr; }
  double learning_rate() const { return learning_rate_; }

 private:
  double learning_rate_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
  std::vector<const void*> velocity_keys_;
};

// ---- gradient checking --------------------------------------------------------

/// Compares analytic gradients of f() w.r.t. `params` against central finite
/// differences. Returns the max over all coordinates of
/// |analytic - numeric| / max(1, |analytic|). f must be deterministic.
double finite_diff_check(const std::function<Tensor()>& f,
                         std::vector<Tensor> params, double step);
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double step);

}  // namespace tadkd
