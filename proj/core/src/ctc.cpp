#include "s2st/ctc.hpp"

#include <cmath>
#include <limits>

#include "s2st/common.hpp"

namespace s2st::ctc {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace

std::vector<int> collapse_path(const std::vector<int>& path, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != blank) out.push_back(c);
    prev = c;
  }
  return out;
}

int min_frames_for_target(const std::vector<int>& target) {
  int frames = static_cast<int>(target.size());
  for (size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++frames;  // a blank must separate repeats
  }
  return frames;
}

double ctc_loss(const Eigen::MatrixXd& log_probs, const std::vector<int>& target, Gradient* grad) {
  const int T = static_cast<int>(log_probs.rows());
  const int num_classes = static_cast<int>(log_probs.cols());
  if (T < 1 || num_classes < 2) throw ShapeError("ctc_loss: need T >= 1 and at least 2 classes");
  const int blank = num_classes - 1;
  for (int c : target) {
    if (c < 0 || c >= blank) throw ShapeError("ctc_loss: target label out of range");
  }

  const int L = static_cast<int>(target.size());
  const int U = 2 * L + 1;
  std::vector<int> ext(U, blank);
  for (int i = 0; i < L; ++i) ext[2 * i + 1] = target[i];

  if (grad) grad->wrt_log_probs = Eigen::MatrixXd::Zero(T, num_classes);

  if (min_frames_for_target(target) > T) {
    return std::numeric_limits<double>::infinity();  // explicit infeasible marker
  }

  Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(T, U, kLogZero);
  alpha(0, 0) = log_probs(0, blank);
  if (U > 1) alpha(0, 1) = log_probs(0, ext[1]);
  for (int t = 1; t < T; ++t) {
    for (int u = 0; u < U; ++u) {
      double a = alpha(t - 1, u);
      if (u > 0) a = log_sum_exp(a, alpha(t - 1, u - 1));
      if (u > 1 && ext[u] != blank && ext[u] != ext[u - 2]) a = log_sum_exp(a, alpha(t - 1, u - 2));
      alpha(t, u) = a == kLogZero ? kLogZero : a + log_probs(t, ext[u]);
    }
  }

  double log_z = alpha(T - 1, U - 1);
  if (U > 1) log_z = log_sum_exp(log_z, alpha(T - 1, U - 2));
  if (log_z == kLogZero) {
    return std::numeric_limits<double>::infinity();
  }

  if (grad) {
    Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(T, U, kLogZero);
    beta(T - 1, U - 1) = 0.0;
    if (U > 1) beta(T - 1, U - 2) = 0.0;
    for (int t = T - 2; t >= 0; --t) {
      for (int u = 0; u < U; ++u) {
        double b = beta(t + 1, u) + log_probs(t + 1, ext[u]);
        if (u + 1 < U) b = log_sum_exp(b, beta(t + 1, u + 1) + log_probs(t + 1, ext[u + 1]));
        if (u + 2 < U && ext[u] != blank && ext[u] != ext[u + 2])
          b = log_sum_exp(b, beta(t + 1, u + 2) + log_probs(t + 1, ext[u + 2]));
        beta(t, u) = b;
      }
    }
    for (int t = 0; t < T; ++t) {
      for (int u = 0; u < U; ++u) {
        double occ = alpha(t, u) + beta(t, u);
        if (occ == kLogZero) continue;
        grad->wrt_log_probs(t, ext[u]) -= std::exp(occ - log_z);
      }
    }
  }
  return -log_z;
}

double ctc_brute_force(const Eigen::MatrixXd& probs, const std::vector<int>& target) {
  const int T = static_cast<int>(probs.rows());
  const int num_classes = static_cast<int>(probs.cols());
  if (T < 1 || num_classes < 2) throw ShapeError("ctc_brute_force: bad shape");
  const int blank = num_classes - 1;

  double states = std::pow(static_cast<double>(num_classes), static_cast<double>(T));
  if (states > 1e6) throw DomainError("ctc_brute_force: search space exceeds 1e6 paths");

  std::vector<int> path(T, 0);
  double total = 0.0;
  while (true) {
    if (collapse_path(path, blank) == target) {
      double p = 1.0;
      for (int t = 0; t < T; ++t) p *= probs(t, path[t]);
      total += p;
    }
    int pos = T - 1;
    while (pos >= 0 && path[pos] == num_classes - 1) {
      path[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++path[pos];
  }
  if (total <= 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(total);
}

std::vector<int> greedy_decode(const Eigen::MatrixXd& log_probs) {
  const int T = static_cast<int>(log_probs.rows());
  const int blank = static_cast<int>(log_probs.cols()) - 1;
  std::vector<int> path(T);
  for (int t = 0; t < T; ++t) {
    int best = 0;
    log_probs.row(t).maxCoeff(&best);
    path[t] = best;
  }
  return collapse_path(path, blank);
}

}  // namespace s2st::ctc
