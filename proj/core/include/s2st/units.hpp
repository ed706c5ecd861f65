#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "s2st/common.hpp"

namespace s2st::units {

/// Discrete unit stream: cluster indices, one per 20-ms frame.
using UnitSequence = std::vector<int>;

/// Run-length collapsed unit stream. No two adjacent units are equal and
/// sum(durations) recovers the original length.
struct ReducedUnits {
  std::vector<int> units;
  std::vector<int> durations;

  bool operator==(const ReducedUnits&) const = default;
};

/// Fixed-size groups of r units per decoding step; the final group may be
/// right-padded with pad_id.
struct StackedUnits {
  std::vector<std::vector<int>> groups;
  int reduction{1};
  int pad_id{0};
};

/// K-means codebook over frame features.
struct Codebook {
  Eigen::MatrixXd centroids;  // K x D
  uint64_t seed{0};
  int iterations{0};
  double inertia{0.0};

  int size() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
};

struct SpecAugmentPolicy {
  int n_freq_masks{0};
  int freq_mask_width{0};  // F: mask width drawn from [0, F]
  int n_time_masks{0};
  int time_mask_width{0};  // T_max
};

/// Per-utterance mean/variance normalization. Columns with variance below
/// the floor come out all-zero; a single-frame input is mean-centered only.
Eigen::MatrixXd cmvn(const Eigen::MatrixXd& frames, double variance_floor = 1e-8);

/// Frequency/time masking with the masked region set to the utterance
/// feature mean. Masks that exceed the matrix bounds are clipped.
Eigen::MatrixXd specaugment(const Eigen::MatrixXd& frames, const SpecAugmentPolicy& policy,
                            uint64_t seed);

/// Lloyd's algorithm with k-means++ initialization. Ties in assignment break
/// toward the lowest centroid index; an empty cluster is re-seeded at the
/// point farthest from its assigned centroid.
Codebook kmeans_fit(const Eigen::MatrixXd& frames, int num_clusters, int max_iters, uint64_t seed);

// Per-iteration inertia trace of the last kmeans_fit call path, exposed for
// the monotonicity checks.
Codebook kmeans_fit_traced(const Eigen::MatrixXd& frames, int num_clusters, int max_iters,
                           uint64_t seed, std::vector<double>* inertia_trace);

/// Nearest-centroid assignment per frame (squared Euclidean, lowest index on
/// ties).
UnitSequence quantize(const Eigen::MatrixXd& frames, const Codebook& codebook);

ReducedUnits reduce(const UnitSequence& seq);
UnitSequence expand(const ReducedUnits& reduced);

StackedUnits stack(const UnitSequence& seq, int reduction, int pad_id);
UnitSequence unstack(const StackedUnits& stacked);

// Codebook file: text header (K, D, seed) followed by K lines of D floats.
void save_codebook(const Codebook& codebook, const std::string& path);
Codebook load_codebook(const std::string& path);

// Unit files: one utterance per line. Full form is space-separated ints,
// reduced form is space-separated unit:duration pairs.
void save_unit_file(const std::vector<UnitSequence>& sequences, const std::string& path);
std::vector<UnitSequence> load_unit_file(const std::string& path);
void save_reduced_file(const std::vector<ReducedUnits>& sequences, const std::string& path);
std::vector<ReducedUnits> load_reduced_file(const std::string& path);

}  // namespace s2st::units
