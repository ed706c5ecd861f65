#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace s2st::ad {

using Mat = Eigen::MatrixXd;

struct Node {
  Mat value;
  Mat grad;  // empty until a gradient flows
  bool requires_grad{false};
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void accumulate(const Mat& g);
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  bool defined() const { return node != nullptr; }
  const Mat& v() const { return node->value; }
  Mat& grad_ref();
  bool has_grad() const { return node && node->grad.size() > 0; }
  void zero_grad();
  int rows() const { return static_cast<int>(node->value.rows()); }
  int cols() const { return static_cast<int>(node->value.cols()); }
  double scalar() const { return node->value(0, 0); }

  std::shared_ptr<Node> node;
};

/// Records operations executed while it is alive, for reverse-mode backward.
/// Exactly one tape may be active per thread; operations executed with no
/// active tape produce value-only nodes (inference mode).
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::shared_ptr<Node> n);
  /// Seeds d(root)/d(root) = 1 and back-propagates. Root must be 1x1.
  void backward(const Var& root);

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
  Tape* prev_{nullptr};
};

// ---- operations ------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var add_rowvec(const Var& a, const Var& row);  // broadcast a 1xC row over rows
Var add_const(const Var& a, const Mat& m);
Var mul_const(const Var& a, const Mat& m);  // elementwise
Var scale(const Var& a, double s);
Var hadamard(const Var& a, const Var& b);
Var relu(const Var& a);
Var sigmoid(const Var& a);
/// Gated linear unit over column halves: out = a[:, :C/2] * sigmoid(a[:, C/2:]).
Var glu_cols(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var slice_cols(const Var& a, int begin, int n);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& table, const std::vector<int>& ids);
/// Mean over consecutive blocks of `block` rows; rows must divide evenly.
Var avg_pool_rows(const Var& a, int block);
/// 1-D convolution over rows (time) with same-style zero padding kernel/2.
/// x: T x Cin, w: (Cin*kernel) x Cout, b: 1 x Cout. Output: ceil(T/stride) x Cout
/// for odd kernels.
Var conv1d(const Var& x, const Var& w, const Var& b, int kernel, int stride);
Var dropout(const Var& a, double p, std::mt19937_64& rng);
Var mean_all(const Var& a);
Var sum_all(const Var& a);
/// Weighted sum of 1x1 scalars.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

/// Label-smoothed cross entropy, averaged over rows:
/// loss = mean_t [ (1-eps) * nll(target_t) + eps * mean_c nll(c) ].
Var label_smoothed_ce(const Var& logits, const std::vector<int>& targets, double eps);

/// Mean squared error against a constant target vector. pred is T x 1.
Var mse_const(const Var& pred, const Eigen::VectorXd& target);

/// CTC loss (unnormalized -log P(target | log_probs)); blank is the last
/// class. Declared here, implemented on top of the ctc module.
Var ctc_loss_op(const Var& log_probs, const std::vector<int>& target);

// Finite-difference helper shared by the gradient-check tests.
double central_difference(const std::function<double()>& f, double* theta, double h);

}  // namespace s2st::ad
