#include "s2st/autodiff.hpp"

#include <cmath>

#include "s2st/common.hpp"
#include "s2st/ctc.hpp"

namespace s2st::ad {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
  grad += g;
}

Var::Var(Mat value, bool requires_grad) : node(std::make_shared<Node>()) {
  node->value = std::move(value);
  node->requires_grad = requires_grad;
}

Mat& Var::grad_ref() {
  if (node->grad.size() == 0) node->grad = Mat::Zero(node->value.rows(), node->value.cols());
  return node->grad;
}

void Var::zero_grad() {
  if (node && node->grad.size() > 0) node->grad.setZero();
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<Node> n) { nodes_.push_back(std::move(n)); }

void Tape::backward(const Var& root) {
  if (!root.defined() || root.rows() != 1 || root.cols() != 1)
    throw DomainError("backward: root must be a 1x1 scalar");
  root.node->accumulate(Mat::Ones(1, 1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = it->get();
    if (n->backward && n->grad.size() > 0) n->backward();
  }
}

namespace {

Var make_node(Mat value, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node*)> backward) {
  bool needs = false;
  Tape* tape = Tape::active();
  if (tape) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  Var out(std::move(value), needs);
  if (needs) {
    Node* self = out.node.get();
    out.node->parents = std::move(parents);
    out.node->backward = [self, fn = std::move(backward)]() { fn(self); };
    tape->record(out.node);
  }
  return out;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Mat y = a.v() * b.v();
  auto pa = a.node, pb = b.node;
  return make_node(std::move(y), {pa, pb}, [pa, pb](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self->grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Mat y = a.v() * b.v().transpose();
  auto pa = a.node, pb = b.node;
  return make_node(std::move(y), {pa, pb}, [pa, pb](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad * pb->value);
    if (pb->requires_grad) pb->accumulate(self->grad.transpose() * pa->value);
  });
}

Var add(const Var& a, const Var& b) {
  Mat y = a.v() + b.v();
  auto pa = a.node, pb = b.node;
  return make_node(std::move(y), {pa, pb}, [pa, pb](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad);
    if (pb->requires_grad) pb->accumulate(self->grad);
  });
}

Var add_rowvec(const Var& a, const Var& row) {
  Mat y = a.v();
  y.rowwise() += Eigen::RowVectorXd(row.v().row(0));
  auto pa = a.node, pr = row.node;
  return make_node(std::move(y), {pa, pr}, [pa, pr](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad);
    if (pr->requires_grad) pr->accumulate(self->grad.colwise().sum());
  });
}

Var add_const(const Var& a, const Mat& m) {
  Mat y = a.v() + m;
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad);
  });
}

Var mul_const(const Var& a, const Mat& m) {
  Mat y = a.v().cwiseProduct(m);
  auto pa = a.node;
  return make_node(std::move(y), {pa, nullptr},
                   [pa, m](Node* self) {
                     if (pa->requires_grad) pa->accumulate(self->grad.cwiseProduct(m));
                   });
}

Var scale(const Var& a, double s) {
  Mat y = a.v() * s;
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa, s](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad * s);
  });
}

Var hadamard(const Var& a, const Var& b) {
  Mat y = a.v().cwiseProduct(b.v());
  auto pa = a.node, pb = b.node;
  return make_node(std::move(y), {pa, pb}, [pa, pb](Node* self) {
    if (pa->requires_grad) pa->accumulate(self->grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self->grad.cwiseProduct(pa->value));
  });
}

Var relu(const Var& a) {
  Mat y = a.v().cwiseMax(0.0);
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa](Node* self) {
    if (!pa->requires_grad) return;
    Mat g = self->grad;
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j)
        if (pa->value(i, j) <= 0.0) g(i, j) = 0.0;
    pa->accumulate(g);
  });
}

Var sigmoid(const Var& a) {
  Mat y = (1.0 / (1.0 + (-a.v().array()).exp())).matrix();
  auto pa = a.node;
  Mat yc = y;
  return make_node(std::move(y), {pa}, [pa, yc](Node* self) {
    if (!pa->requires_grad) return;
    Mat g = self->grad.array() * yc.array() * (1.0 - yc.array());
    pa->accumulate(g);
  });
}

Var glu_cols(const Var& a) {
  const int c = a.cols();
  if (c % 2 != 0) throw ShapeError("glu_cols: column count must be even");
  const int h = c / 2;
  Mat left = a.v().leftCols(h);
  Mat gate = (1.0 / (1.0 + (-a.v().rightCols(h).array()).exp())).matrix();
  Mat y = left.cwiseProduct(gate);
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa, left, gate, h](Node* self) {
    if (!pa->requires_grad) return;
    Mat g = Mat::Zero(pa->value.rows(), pa->value.cols());
    g.leftCols(h) = self->grad.cwiseProduct(gate);
    g.rightCols(h) =
        self->grad.cwiseProduct(left).cwiseProduct(gate.cwiseProduct((1.0 - gate.array()).matrix()));
    pa->accumulate(g);
  });
}

Var softmax_rows(const Var& a) {
  Mat y = a.v();
  for (int i = 0; i < y.rows(); ++i) {
    double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  auto pa = a.node;
  Mat yc = y;
  return make_node(std::move(y), {pa}, [pa, yc](Node* self) {
    if (!pa->requires_grad) return;
    Mat g(yc.rows(), yc.cols());
    for (int i = 0; i < yc.rows(); ++i) {
      double dot = self->grad.row(i).dot(yc.row(i));
      g.row(i) = yc.row(i).cwiseProduct((self->grad.row(i).array() - dot).matrix());
    }
    pa->accumulate(g);
  });
}

Var log_softmax_rows(const Var& a) {
  Mat y = a.v();
  for (int i = 0; i < y.rows(); ++i) {
    double m = y.row(i).maxCoeff();
    double lse = m + std::log((y.row(i).array() - m).exp().sum());
    y.row(i).array() -= lse;
  }
  auto pa = a.node;
  Mat yc = y;
  return make_node(std::move(y), {pa}, [pa, yc](Node* self) {
    if (!pa->requires_grad) return;
    Mat p = yc.array().exp();
    Mat g(yc.rows(), yc.cols());
    for (int i = 0; i < yc.rows(); ++i) {
      double s = self->grad.row(i).sum();
      g.row(i) = self->grad.row(i) - s * p.row(i);
    }
    pa->accumulate(g);
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const int T = x.rows(), C = x.cols();
  Mat xhat(T, C);
  Eigen::VectorXd inv_std(T);
  for (int i = 0; i < T; ++i) {
    double mu = x.v().row(i).mean();
    double var = (x.v().row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = (x.v().row(i).array() - mu) * is;
  }
  Mat y = xhat;
  for (int i = 0; i < T; ++i)
    y.row(i) = xhat.row(i).cwiseProduct(gain.v().row(0)) + bias.v().row(0);
  auto px = x.node, pg = gain.node, pb = bias.node;
  return make_node(std::move(y), {px, pg, pb}, [px, pg, pb, xhat, inv_std, C](Node* self) {
    const Mat& gy = self->grad;
    if (pg->requires_grad) pg->accumulate(gy.cwiseProduct(xhat).colwise().sum());
    if (pb->requires_grad) pb->accumulate(gy.colwise().sum());
    if (px->requires_grad) {
      Mat gx(gy.rows(), gy.cols());
      for (int i = 0; i < gy.rows(); ++i) {
        Eigen::RowVectorXd h = gy.row(i).cwiseProduct(pg->value.row(0));  // dL/dxhat
        double mean_h = h.mean();
        double mean_hx = h.cwiseProduct(xhat.row(i)).mean();
        gx.row(i) =
            (h.array() - mean_h - xhat.row(i).array() * mean_hx) * inv_std(i);
      }
      px->accumulate(gx);
    }
  });
}

Var slice_cols(const Var& a, int begin, int n) {
  Mat y = a.v().middleCols(begin, n);
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa, begin, n](Node* self) {
    if (!pa->requires_grad) return;
    Mat g = Mat::Zero(pa->value.rows(), pa->value.cols());
    g.middleCols(begin, n) = self->grad;
    pa->accumulate(g);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  int rows = parts[0].rows();
  int cols = 0;
  for (const Var& p : parts) cols += p.cols();
  Mat y(rows, cols);
  int at = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = p.v();
    parents.push_back(p.node);
    offsets.push_back(at);
    at += p.cols();
  }
  return make_node(std::move(y), parents, [parents, offsets](Node* self) {
    for (size_t i = 0; i < parents.size(); ++i) {
      Node* p = parents[i].get();
      if (p->requires_grad)
        p->accumulate(self->grad.middleCols(offsets[i], p->value.cols()));
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Mat y(static_cast<int>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw ShapeError("gather_rows: id out of range: " + std::to_string(ids[i]));
    y.row(static_cast<int>(i)) = table.v().row(ids[i]);
  }
  auto pt = table.node;
  return make_node(std::move(y), {pt}, [pt, ids](Node* self) {
    if (!pt->requires_grad) return;
    Mat g = Mat::Zero(pt->value.rows(), pt->value.cols());
    for (size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self->grad.row(static_cast<int>(i));
    pt->accumulate(g);
  });
}

Var avg_pool_rows(const Var& a, int block) {
  if (block < 1 || a.rows() % block != 0)
    throw ShapeError("avg_pool_rows: rows must divide by block");
  const int out_rows = a.rows() / block;
  Mat y = Mat::Zero(out_rows, a.cols());
  for (int i = 0; i < out_rows; ++i) {
    for (int j = 0; j < block; ++j) y.row(i) += a.v().row(i * block + j);
    y.row(i) /= block;
  }
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa, block](Node* self) {
    if (!pa->requires_grad) return;
    Mat g(pa->value.rows(), pa->value.cols());
    for (int i = 0; i < self->grad.rows(); ++i)
      for (int j = 0; j < block; ++j) g.row(i * block + j) = self->grad.row(i) / block;
    pa->accumulate(g);
  });
}

Var conv1d(const Var& x, const Var& w, const Var& b, int kernel, int stride) {
  const int T = x.rows(), cin = x.cols();
  if (w.rows() != cin * kernel) throw ShapeError("conv1d: weight rows must be Cin*kernel");
  const int cout = w.cols();
  const int pad = kernel / 2;
  const int t_out = (T + 2 * pad - kernel) / stride + 1;
  if (t_out < 1) throw ShapeError("conv1d: empty output");

  // im2col patch matrix; zero rows stand in for padding.
  Mat patches = Mat::Zero(t_out, cin * kernel);
  for (int o = 0; o < t_out; ++o) {
    int start = o * stride - pad;
    for (int k = 0; k < kernel; ++k) {
      int t = start + k;
      if (t < 0 || t >= T) continue;
      patches.block(o, k * cin, 1, cin) = x.v().row(t);
    }
  }
  Mat y = patches * w.v();
  y.rowwise() += Eigen::RowVectorXd(b.v().row(0));

  auto px = x.node, pw = w.node, pb = b.node;
  return make_node(std::move(y), {px, pw, pb},
                   [px, pw, pb, patches, kernel, stride, pad, T, cin](Node* self) {
                     const Mat& gy = self->grad;
                     if (pb->requires_grad) pb->accumulate(gy.colwise().sum());
                     if (pw->requires_grad) pw->accumulate(patches.transpose() * gy);
                     if (px->requires_grad) {
                       Mat gpatches = gy * pw->value.transpose();
                       Mat gx = Mat::Zero(T, cin);
                       for (int o = 0; o < gpatches.rows(); ++o) {
                         int start = o * stride - pad;
                         for (int k = 0; k < kernel; ++k) {
                           int t = start + k;
                           if (t < 0 || t >= T) continue;
                           gx.row(t) += gpatches.block(o, k * cin, 1, cin);
                         }
                       }
                       px->accumulate(gx);
                     }
                   });
}

Var dropout(const Var& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout: p must be < 1");
  Mat mask(a.rows(), a.cols());
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (int i = 0; i < mask.rows(); ++i)
    for (int j = 0; j < mask.cols(); ++j) mask(i, j) = keep(rng) ? scale : 0.0;
  return mul_const(a, mask);
}

Var mean_all(const Var& a) {
  Mat y(1, 1);
  y(0, 0) = a.v().mean();
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa](Node* self) {
    if (!pa->requires_grad) return;
    double g = self->grad(0, 0) / static_cast<double>(pa->value.size());
    pa->accumulate(Mat::Constant(pa->value.rows(), pa->value.cols(), g));
  });
}

Var sum_all(const Var& a) {
  Mat y(1, 1);
  y(0, 0) = a.v().sum();
  auto pa = a.node;
  return make_node(std::move(y), {pa}, [pa](Node* self) {
    if (!pa->requires_grad) return;
    pa->accumulate(Mat::Constant(pa->value.rows(), pa->value.cols(), self->grad(0, 0)));
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty())
    throw ShapeError("weighted_sum: term/weight mismatch");
  double acc = 0.0;
  std::vector<std::shared_ptr<Node>> parents;
  for (size_t i = 0; i < terms.size(); ++i) {
    acc += weights[i] * terms[i].scalar();
    parents.push_back(terms[i].node);
  }
  Mat y(1, 1);
  y(0, 0) = acc;
  return make_node(std::move(y), parents, [parents, weights](Node* self) {
    double g = self->grad(0, 0);
    for (size_t i = 0; i < parents.size(); ++i) {
      if (parents[i]->requires_grad) parents[i]->accumulate(Mat::Constant(1, 1, g * weights[i]));
    }
  });
}

Var label_smoothed_ce(const Var& logits, const std::vector<int>& targets, double eps) {
  const int T = logits.rows(), V = logits.cols();
  if (static_cast<int>(targets.size()) != T)
    throw ShapeError("label_smoothed_ce: target count mismatch");
  if (eps < 0.0 || eps >= 1.0) throw ConfigError("label_smoothed_ce: eps must be in [0,1)");

  Mat lsm = logits.v();
  for (int i = 0; i < T; ++i) {
    double m = lsm.row(i).maxCoeff();
    double lse = m + std::log((lsm.row(i).array() - m).exp().sum());
    lsm.row(i).array() -= lse;
  }
  double loss = 0.0;
  for (int i = 0; i < T; ++i) {
    int t = targets[i];
    if (t < 0 || t >= V) throw ShapeError("label_smoothed_ce: target out of range");
    loss += -(1.0 - eps) * lsm(i, t) - eps * lsm.row(i).mean();
  }
  loss /= T;

  auto pl = logits.node;
  Mat y(1, 1);
  y(0, 0) = loss;
  return make_node(std::move(y), {pl}, [pl, lsm, targets, eps, T, V](Node* self) {
    if (!pl->requires_grad) return;
    double g = self->grad(0, 0) / T;
    Mat p = lsm.array().exp();
    Mat grad = p;  // softmax minus smoothed target distribution
    for (int i = 0; i < T; ++i) {
      grad.row(i).array() -= eps / V;
      grad(i, targets[i]) -= (1.0 - eps);
    }
    pl->accumulate(grad * g);
  });
}

Var mse_const(const Var& pred, const Eigen::VectorXd& target) {
  if (pred.cols() != 1 || pred.rows() != target.size())
    throw ShapeError("mse_const: prediction must be T x 1 matching target length");
  const int T = pred.rows();
  Eigen::VectorXd diff = pred.v().col(0) - target;
  Mat y(1, 1);
  y(0, 0) = diff.squaredNorm() / T;
  auto pp = pred.node;
  return make_node(std::move(y), {pp}, [pp, diff, T](Node* self) {
    if (!pp->requires_grad) return;
    pp->accumulate((2.0 / T) * diff * self->grad(0, 0));
  });
}

Var ctc_loss_op(const Var& log_probs, const std::vector<int>& target) {
  const bool needs = Tape::active() != nullptr && log_probs.node->requires_grad;
  ctc::Gradient g;
  double loss = ctc::ctc_loss(log_probs.v(), target, needs ? &g : nullptr);
  Mat y(1, 1);
  y(0, 0) = loss;
  auto pl = log_probs.node;
  Mat grad_mat = std::move(g.wrt_log_probs);
  return make_node(std::move(y), {pl}, [pl, grad_mat](Node* self) {
    if (!pl->requires_grad) return;
    pl->accumulate(grad_mat * self->grad(0, 0));
  });
}

double central_difference(const std::function<double()>& f, double* theta, double h) {
  double saved = *theta;
  *theta = saved + h;
  double up = f();
  *theta = saved - h;
  double down = f();
  *theta = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace s2st::ad
