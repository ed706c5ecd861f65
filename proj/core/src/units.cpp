#include "s2st/units.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace s2st::units {

Eigen::MatrixXd cmvn(const Eigen::MatrixXd& frames, double variance_floor) {
  if (frames.rows() < 1) throw DomainError("cmvn: empty frame matrix");
  Eigen::MatrixXd out = frames;
  Eigen::RowVectorXd mean = frames.colwise().mean();
  out.rowwise() -= mean;
  if (frames.rows() == 1) return out;  // variance undefined; center only
  Eigen::RowVectorXd var = out.array().square().colwise().mean();
  for (int c = 0; c < out.cols(); ++c) {
    double v = std::max(var(c), variance_floor);
    out.col(c) /= std::sqrt(v);
  }
  return out;
}

Eigen::MatrixXd specaugment(const Eigen::MatrixXd& frames, const SpecAugmentPolicy& policy,
                            uint64_t seed) {
  const int T = static_cast<int>(frames.rows());
  const int D = static_cast<int>(frames.cols());
  Eigen::MatrixXd out = frames;
  if (policy.n_freq_masks == 0 && policy.n_time_masks == 0) return out;

  const double fill = frames.mean();
  std::mt19937_64 rng(seed);

  int F = policy.freq_mask_width;
  if (F > D) {
    fmt::print(stderr, "[specaugment] freq mask width {} exceeds feature dim {}; clipping\n", F, D);
    F = D;
  }
  int W = policy.time_mask_width;
  if (W > T) {
    fmt::print(stderr, "[specaugment] time mask width {} exceeds {} frames; clipping\n", W, T);
    W = T;
  }

  for (int m = 0; m < policy.n_freq_masks; ++m) {
    int f = std::uniform_int_distribution<int>(0, F)(rng);
    if (f == 0) continue;
    int f0 = std::uniform_int_distribution<int>(0, D - f)(rng);
    out.middleCols(f0, f).setConstant(fill);
  }
  for (int m = 0; m < policy.n_time_masks; ++m) {
    int w = std::uniform_int_distribution<int>(0, W)(rng);
    if (w == 0) continue;
    int t0 = std::uniform_int_distribution<int>(0, T - w)(rng);
    out.middleRows(t0, w).setConstant(fill);
  }
  return out;
}

namespace {

int nearest_centroid(const Eigen::MatrixXd& centroids, const Eigen::RowVectorXd& point) {
  int best = 0;
  double best_d = (centroids.row(0) - point).squaredNorm();
  for (int k = 1; k < centroids.rows(); ++k) {
    double d = (centroids.row(k) - point).squaredNorm();
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = k;
    }
  }
  return best;
}

int count_distinct_rows(const Eigen::MatrixXd& m) {
  std::vector<int> order(m.rows());
  for (int i = 0; i < m.rows(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (int c = 0; c < m.cols(); ++c) {
      if (m(a, c) != m(b, c)) return m(a, c) < m(b, c);
    }
    return false;
  });
  int distinct = m.rows() > 0 ? 1 : 0;
  for (size_t i = 1; i < order.size(); ++i) {
    if (m.row(order[i]) != m.row(order[i - 1])) ++distinct;
  }
  return distinct;
}

}  // namespace

Codebook kmeans_fit_traced(const Eigen::MatrixXd& frames, int num_clusters, int max_iters,
                           uint64_t seed, std::vector<double>* inertia_trace) {
  const int n = static_cast<int>(frames.rows());
  const int d = static_cast<int>(frames.cols());
  if (num_clusters < 2) throw ConfigError("kmeans: K must be >= 2");
  if (n < num_clusters) throw DataError("kmeans: fewer points than clusters");
  if (count_distinct_rows(frames) < num_clusters)
    throw DataError("kmeans: fewer distinct points than clusters");

  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  Eigen::MatrixXd centroids(num_clusters, d);
  std::uniform_int_distribution<int> first(0, n - 1);
  centroids.row(0) = frames.row(first(rng));
  Eigen::VectorXd dist2(n);
  for (int i = 0; i < n; ++i) dist2(i) = (frames.row(i) - centroids.row(0)).squaredNorm();
  for (int k = 1; k < num_clusters; ++k) {
    double total = dist2.sum();
    int chosen = 0;
    if (total <= 0.0) {
      // All mass at existing centroids; fall back to the first unused point.
      for (int i = 0; i < n; ++i) {
        if (dist2(i) > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      double acc = 0.0;
      chosen = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += dist2(i);
        if (acc >= r) {
          chosen = i;
          break;
        }
      }
    }
    centroids.row(k) = frames.row(chosen);
    for (int i = 0; i < n; ++i)
      dist2(i) = std::min(dist2(i), (frames.row(i) - centroids.row(k)).squaredNorm());
  }

  std::vector<int> assign(n, -1);
  std::vector<int> prev_assign;
  int iters = 0;
  double inertia = 0.0;
  if (inertia_trace) inertia_trace->clear();

  for (int iter = 0; iter < max_iters; ++iter) {
    prev_assign = assign;
    for (int i = 0; i < n; ++i) assign[i] = nearest_centroid(centroids, frames.row(i));

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(num_clusters, d);
    std::vector<int> counts(num_clusters, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += frames.row(i);
      ++counts[assign[i]];
    }
    for (int k = 0; k < num_clusters; ++k) {
      if (counts[k] > 0) centroids.row(k) = sums.row(k) / counts[k];
    }
    // Empty clusters are re-seeded at the point farthest from its centroid.
    for (int k = 0; k < num_clusters; ++k) {
      if (counts[k] > 0) continue;
      int far = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        double dd = (frames.row(i) - centroids.row(assign[i])).squaredNorm();
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      centroids.row(k) = frames.row(far);
      assign[far] = k;
    }

    inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      int k = nearest_centroid(centroids, frames.row(i));
      assign[i] = k;
      inertia += (frames.row(i) - centroids.row(k)).squaredNorm();
    }
    if (inertia_trace) inertia_trace->push_back(inertia);
    ++iters;
    if (assign == prev_assign) break;
  }

  Codebook cb;
  cb.centroids = std::move(centroids);
  cb.seed = seed;
  cb.iterations = iters;
  cb.inertia = inertia;
  return cb;
}

Codebook kmeans_fit(const Eigen::MatrixXd& frames, int num_clusters, int max_iters, uint64_t seed) {
  return kmeans_fit_traced(frames, num_clusters, max_iters, seed, nullptr);
}

UnitSequence quantize(const Eigen::MatrixXd& frames, const Codebook& codebook) {
  if (frames.cols() != codebook.centroids.cols())
    throw ShapeError(fmt::format("quantize: frame dim {} != codebook dim {}", frames.cols(),
                                 codebook.centroids.cols()));
  UnitSequence out(frames.rows());
  for (int i = 0; i < frames.rows(); ++i) out[i] = nearest_centroid(codebook.centroids, frames.row(i));
  return out;
}

ReducedUnits reduce(const UnitSequence& seq) {
  if (seq.empty()) throw DomainError("reduce: empty unit sequence");
  ReducedUnits out;
  out.units.push_back(seq[0]);
  out.durations.push_back(1);
  for (size_t i = 1; i < seq.size(); ++i) {
    if (seq[i] == out.units.back()) {
      ++out.durations.back();
    } else {
      out.units.push_back(seq[i]);
      out.durations.push_back(1);
    }
  }
  return out;
}

UnitSequence expand(const ReducedUnits& reduced) {
  if (reduced.units.size() != reduced.durations.size())
    throw DomainError("expand: units/durations length mismatch");
  UnitSequence out;
  for (size_t i = 0; i < reduced.units.size(); ++i) {
    if (reduced.durations[i] < 1) throw DomainError("expand: durations must be positive");
    out.insert(out.end(), reduced.durations[i], reduced.units[i]);
  }
  return out;
}

StackedUnits stack(const UnitSequence& seq, int reduction, int pad_id) {
  if (reduction < 1) throw DomainError("stack: reduction factor must be >= 1");
  StackedUnits out;
  out.reduction = reduction;
  out.pad_id = pad_id;
  for (size_t i = 0; i < seq.size(); i += reduction) {
    std::vector<int> group;
    group.reserve(reduction);
    for (int j = 0; j < reduction; ++j) {
      size_t idx = i + j;
      group.push_back(idx < seq.size() ? seq[idx] : pad_id);
    }
    out.groups.push_back(std::move(group));
  }
  return out;
}

UnitSequence unstack(const StackedUnits& stacked) {
  UnitSequence out;
  for (size_t g = 0; g < stacked.groups.size(); ++g) {
    for (int u : stacked.groups[g]) {
      if (u != stacked.pad_id) out.push_back(u);
    }
  }
  return out;
}

void save_codebook(const Codebook& codebook, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write codebook: " + path);
  out << "K " << codebook.size() << " D " << codebook.dim() << " seed " << codebook.seed << "\n";
  out.precision(17);
  for (int k = 0; k < codebook.size(); ++k) {
    for (int c = 0; c < codebook.dim(); ++c) {
      if (c) out << ' ';
      out << codebook.centroids(k, c);
    }
    out << '\n';
  }
}

Codebook load_codebook(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open codebook: " + path);
  std::string kw1, kw2, kw3;
  int K = 0, D = 0;
  uint64_t seed = 0;
  if (!(in >> kw1 >> K >> kw2 >> D >> kw3 >> seed) || kw1 != "K" || kw2 != "D" || kw3 != "seed")
    throw DataError("codebook header malformed: " + path);
  if (K < 2 || D < 1) throw DataError("codebook header out of range: " + path);
  Codebook cb;
  cb.seed = seed;
  cb.centroids.resize(K, D);
  for (int k = 0; k < K; ++k) {
    for (int c = 0; c < D; ++c) {
      if (!(in >> cb.centroids(k, c))) throw DataError("codebook truncated: " + path);
    }
  }
  return cb;
}

void save_unit_file(const std::vector<UnitSequence>& sequences, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write unit file: " + path);
  for (const auto& seq : sequences) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
}

std::vector<UnitSequence> load_unit_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open unit file: " + path);
  std::vector<UnitSequence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    UnitSequence seq;
    std::istringstream ls(line);
    int v;
    while (ls >> v) seq.push_back(v);
    if (seq.empty()) throw DataError(fmt::format("unit file line {}: empty sequence", lineno));
    out.push_back(std::move(seq));
  }
  return out;
}

void save_reduced_file(const std::vector<ReducedUnits>& sequences, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write reduced unit file: " + path);
  for (const auto& seq : sequences) {
    for (size_t i = 0; i < seq.units.size(); ++i) {
      if (i) out << ' ';
      out << seq.units[i] << ':' << seq.durations[i];
    }
    out << '\n';
  }
}

std::vector<ReducedUnits> load_reduced_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reduced unit file: " + path);
  std::vector<ReducedUnits> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    ReducedUnits seq;
    std::istringstream ls(line);
    std::string pair;
    while (ls >> pair) {
      size_t colon = pair.find(':');
      if (colon == std::string::npos)
        throw DataError(fmt::format("reduced unit file line {}: expected unit:duration, got '{}'",
                                    lineno, pair));
      try {
        seq.units.push_back(std::stoi(pair.substr(0, colon)));
        seq.durations.push_back(std::stoi(pair.substr(colon + 1)));
      } catch (const std::exception&) {
        throw DataError(fmt::format("reduced unit file line {}: bad pair '{}'", lineno, pair));
      }
    }
    if (seq.units.empty()) throw DataError(fmt::format("reduced unit file line {}: empty", lineno));
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace s2st::units
