#pragma once

#include <Eigen/Core>
#include <vector>

namespace s2st::ctc {

/// Gradient of the CTC loss with respect to the per-step log-probabilities,
/// treating them as free variables (the softmax coupling is handled by the
/// layer that produced them).
struct Gradient {
  Eigen::MatrixXd wrt_log_probs;
};

/// -log P(target | log_probs) marginalized over all alignments, computed via
/// the forward recursion in log space. The blank is the last class. An
/// unreachable target yields +infinity (never NaN); its gradient is zero.
///
/// log_probs: T x (V+1) rows of normalized log-probabilities.
double ctc_loss(const Eigen::MatrixXd& log_probs, const std::vector<int>& target,
                Gradient* grad = nullptr);

/// Exhaustive alignment-marginalization oracle. Enumerates every frame-label
/// path, collapses it (dedupe repeats, drop blanks) and sums probabilities of
/// the paths matching the target. probs holds plain probabilities.
/// Refuses when (V+1)^T exceeds 1e6 states.
double ctc_brute_force(const Eigen::MatrixXd& probs, const std::vector<int>& target);

/// Per-step argmax, collapse repeats, then remove blanks.
std::vector<int> greedy_decode(const Eigen::MatrixXd& log_probs);

/// Collapse rule shared by decode and the brute-force oracle.
std::vector<int> collapse_path(const std::vector<int>& path, int blank);

/// Smallest number of frames that can carry the target (length plus one slack
/// frame per adjacent repeat). Used by the trainer to skip infeasible pairs.
int min_frames_for_target(const std::vector<int>& target);

}  // namespace s2st::ctc
