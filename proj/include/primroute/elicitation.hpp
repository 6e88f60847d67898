#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "primroute/inference.hpp"
#include "primroute/model.hpp"
#include "primroute/tasks.hpp"

namespace primroute {

using Vec = std::vector<double>;

struct DifferencePair {
  Vec h_plus;
  Vec h_minus;
  Skill skill = Skill::kArithmetic;
  std::uint64_t instance_seed = 0;
  int variant = 0;

  Vec difference() const;
};

struct FilterStats {
  std::size_t candidates = 0;
  std::size_t accepted = 0;
  std::map<std::string, std::size_t> rejected_by_reason;
  std::vector<ContrastPair> accepted_pairs;

  double acceptance_rate() const {
    return candidates == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(candidates);
  }
};

/// Generates greedily under both framings and keeps pairs passing quality_filter.
FilterStats filter_contrast_pairs(const Model& model, const std::vector<ContrastPair>& pairs,
                                  const FilterBand& band = {}, std::size_t max_steps = 6);

/// Last-token hiddens at `layer` for the positive and negative prompt of each
/// pair. Throws DataError when `pairs` is empty.
std::vector<DifferencePair> collect_pairs(const Model& model, const std::vector<ContrastPair>& pairs,
                                          std::size_t layer);

struct PcaReport {
  /// Explained-variance fractions, nonincreasing, summing to 1.
  std::vector<double> fractions;
  /// Coordinates of each input on the top two components.
  std::vector<std::array<double, 2>> projection;

  double top_fraction(std::size_t k) const;
};

/// Eigen-decomposition of the covariance of mean-centered data. Throws
/// DataError for fewer than 2 rows, d < 2, or zero total variance.
PcaReport pca_report(const std::vector<Vec>& data);

struct KMeansConfig {
  std::size_t max_iters = 300;
  double tol = 1e-6;
  std::size_t restarts = 5;
};

struct KMeansResult {
  std::vector<int> assignments;
  std::vector<Vec> centroids;
  double inertia = 0.0;
  /// Within-cluster sum of squares after each assignment step of the kept restart.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  /// Number of empty clusters re-seeded from the farthest point.
  std::size_t reseeds = 0;
};

/// Lloyd iterations with k-means++ seeding; keeps the restart with the lowest
/// inertia. Deterministic given the seed. Throws DataError if k > rows.
KMeansResult kmeans(const std::vector<Vec>& data, std::size_t k, std::uint64_t seed, const KMeansConfig& config = {});

struct PrimitiveLibrary {
  std::size_t layer = 0;
  /// Unit-norm rows v_1..v_K.
  std::vector<Vec> vectors;
  /// Cluster means before normalization.
  std::vector<Vec> raw_centroids;
  /// Cluster index per retained pair.
  std::vector<int> assignments;
  std::uint64_t model_fingerprint = 0;
  std::uint64_t config_hash = 0;
  /// Skill label per retained pair, kept for reports.
  std::vector<int> pair_skills;

  std::size_t size() const { return vectors.size(); }
  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }
  /// Hash of the stored (binary32) rows and header fields.
  std::uint64_t hash() const;

  /// Binary rows plus a JSON sidecar at path + ".json" carrying `sidecar_extra`.
  void save(const std::filesystem::path& path, const std::string& sidecar_extra_json = "{}") const;
  /// Rows are renormalized after loading. Throws ProvenanceError when the
  /// fingerprint differs from `expected_fingerprint` unless allow_mismatch.
  static PrimitiveLibrary load(const std::filesystem::path& path, std::uint64_t expected_fingerprint,
                               bool allow_mismatch = false);
};

/// v_i = mean of differences in cluster i, then L2-normalized. Summation runs in
/// pair order. Throws DataError on an empty or zero-norm cluster.
PrimitiveLibrary build_library(const std::vector<Vec>& differences, const std::vector<int>& assignments,
                               std::size_t k, std::size_t layer);

std::vector<Vec> cosine_matrix(const PrimitiveLibrary& library);
double mean_abs_off_diagonal(const std::vector<Vec>& matrix);

/// Assignment maximizing total similarity (Hungarian method); result[i] is the
/// column matched to row i. Requires a square matrix.
std::vector<int> max_weight_matching(const std::vector<Vec>& similarity);

/// Cluster purity against reference labels.
double cluster_purity(const std::vector<int>& assignments, const std::vector<int>& labels);

struct SweepRow {
  std::size_t vector_index = 0;
  double alpha = 0.0;
  Skill skill = Skill::kArithmetic;
  double accuracy = 0.0;
  double mean_tokens = 0.0;
};

/// Greedy accuracy per (vector, alpha, family) with v_inject = alpha * v_i.
std::vector<SweepRow> static_sweep(const Model& model, const PrimitiveLibrary& library,
                                   const std::vector<std::vector<TaskInstance>>& eval_sets,
                                   const std::vector<double>& alphas, std::size_t max_steps = 6);

}  // namespace primroute
