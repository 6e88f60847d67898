#include "primroute/elicitation.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"
#include "primroute/rng.hpp"

namespace primroute {

namespace {

constexpr std::string_view kLibraryMagic = "PRLIBRY1";
constexpr std::uint32_t kLibraryVersion = 1;

double squared_distance(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

double norm(const Vec& a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

void require_rectangular(const std::vector<Vec>& data, const char* op) {
  if (data.empty()) throw DataError(std::string(op) + ": no data");
  for (const auto& row : data) {
    if (row.size() != data.front().size()) throw DimensionError(std::string(op) + ": rows differ in length");
  }
}

/// Nearest centroid (lowest index on ties) for every row; returns the inertia.
double assign(const std::vector<Vec>& data, const std::vector<Vec>& centroids, std::vector<int>& assignments) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double dist = squared_distance(data[i], centroids[c]);
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(c);
      }
    }
    assignments[i] = arg;
    inertia += best;
  }
  return inertia;
}

std::vector<Vec> plus_plus_seeds(const std::vector<Vec>& data, std::size_t k, Rng& rng) {
  std::vector<Vec> centroids{data[rng.below(data.size())]};
  std::vector<double> dist(data.size());
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, squared_distance(data[i], c));
      dist[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.below(data.size());
    } else {
      double u = rng.uniform() * total;
      pick = data.size() - 1;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (u < dist[i]) {
          pick = i;
          break;
        }
        u -= dist[i];
      }
    }
    centroids.push_back(data[pick]);
  }
  return centroids;
}

KMeansResult lloyd(const std::vector<Vec>& data, std::size_t k, Rng& rng, const KMeansConfig& config) {
  KMeansResult r;
  const std::size_t d = data.front().size();
  r.centroids = plus_plus_seeds(data, k, rng);
  r.assignments.assign(data.size(), 0);
  for (r.iterations = 0; r.iterations < config.max_iters; ++r.iterations) {
    r.inertia_history.push_back(assign(data, r.centroids, r.assignments));
    std::vector<Vec> next(k, Vec(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto& c = next[r.assignments[i]];
      for (std::size_t j = 0; j < d; ++j) c[j] += data[i][j];
      ++count[r.assignments[i]];
    }
    std::vector<char> taken(data.size(), 0);
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) {
        for (double& x : next[c]) x /= static_cast<double>(count[c]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own centroid.
      double far = -1.0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (taken[i]) continue;
        const double dist = squared_distance(data[i], r.centroids[r.assignments[i]]);
        if (dist > far) {
          far = dist;
          arg = i;
        }
      }
      taken[arg] = 1;
      next[c] = data[arg];
      ++r.reseeds;
    }
    double movement = 0.0;
    for (std::size_t c = 0; c < k; ++c) movement = std::max(movement, std::sqrt(squared_distance(next[c], r.centroids[c])));
    r.centroids = std::move(next);
    if (movement < config.tol) {
      ++r.iterations;
      break;
    }
  }
  r.inertia = assign(data, r.centroids, r.assignments);
  r.inertia_history.push_back(r.inertia);
  return r;
}

}  // namespace

Vec DifferencePair::difference() const {
  if (h_plus.size() != h_minus.size()) throw DimensionError("difference: h+ and h- differ in length");
  Vec out(h_plus.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = h_plus[i] - h_minus[i];
  return out;
}

FilterStats filter_contrast_pairs(const Model& model, const std::vector<ContrastPair>& pairs, const FilterBand& band,
                                  std::size_t max_steps) {
  FilterStats stats;
  for (const auto& pair : pairs) {
    ++stats.candidates;
    const auto pos = generate(model, pair.positive_prompt, nullptr, max_steps, Sampling::greedy_decoding());
    const auto neg = generate(model, pair.negative_prompt, nullptr, max_steps, Sampling::greedy_decoding());
    const auto verdict = quality_filter(pos.tokens, neg.tokens, pair.instance, band);
    if (verdict.accepted) {
      ++stats.accepted;
      stats.accepted_pairs.push_back(pair);
    } else {
      ++stats.rejected_by_reason[verdict.reason];
    }
  }
  return stats;
}

std::vector<DifferencePair> collect_pairs(const Model& model, const std::vector<ContrastPair>& pairs,
                                          std::size_t layer) {
  if (pairs.empty()) throw DataError("collect_pairs: no accepted contrast pairs");
  std::vector<DifferencePair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    DifferencePair dp;
    dp.h_plus = forward_to_layer(model, p.positive_prompt, layer).hidden;
    dp.h_minus = forward_to_layer(model, p.negative_prompt, layer).hidden;
    dp.skill = p.instance.skill;
    dp.instance_seed = p.instance.seed;
    dp.variant = p.variant;
    out.push_back(std::move(dp));
  }
  return out;
}

double PcaReport::top_fraction(std::size_t k) const {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(k, fractions.size()); ++i) s += fractions[i];
  return s;
}

PcaReport pca_report(const std::vector<Vec>& data) {
  require_rectangular(data, "pca_report");
  const std::size_t n = data.size(), d = data.front().size();
  if (n < 2 || d < 2) throw DataError("pca_report: need at least 2 vectors of dimension at least 2");
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = data[i][j];
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_report: eigen-decomposition failed");
  const Eigen::VectorXd evals = solver.eigenvalues();
  double total = 0.0;
  for (Eigen::Index i = 0; i < evals.size(); ++i) total += std::max(0.0, evals(i));
  if (!(total > 1e-300)) throw DataError("pca_report: data has zero variance; fractions undefined");
  PcaReport r;
  for (Eigen::Index i = evals.size(); i-- > 0;) r.fractions.push_back(std::max(0.0, evals(i)) / total);
  const Eigen::VectorXd pc1 = solver.eigenvectors().col(evals.size() - 1);
  const Eigen::VectorXd pc2 = solver.eigenvectors().col(evals.size() - 2);
  for (std::size_t i = 0; i < n; ++i) r.projection.push_back({x.row(i).dot(pc1), x.row(i).dot(pc2)});
  return r;
}

KMeansResult kmeans(const std::vector<Vec>& data, std::size_t k, std::uint64_t seed, const KMeansConfig& config) {
  require_rectangular(data, "kmeans");
  if (k == 0 || k > data.size()) {
    throw DataError("kmeans: k=" + std::to_string(k) + " but only " + std::to_string(data.size()) + " vectors");
  }
  KMeansResult best;
  bool have = false;
  for (std::size_t restart = 0; restart < std::max<std::size_t>(1, config.restarts); ++restart) {
    Rng rng(derive_seed(seed, "kmeans", {restart}));
    auto r = lloyd(data, k, rng, config);
    if (!have || r.inertia < best.inertia) {
      best = std::move(r);
      have = true;
    }
  }
  return best;
}

PrimitiveLibrary build_library(const std::vector<Vec>& differences, const std::vector<int>& assignments,
                               std::size_t k, std::size_t layer) {
  require_rectangular(differences, "build_library");
  if (assignments.size() != differences.size()) throw DimensionError("build_library: one assignment per vector");
  const std::size_t d = differences.front().size();
  PrimitiveLibrary lib;
  lib.layer = layer;
  lib.assignments = assignments;
  lib.raw_centroids.assign(k, Vec(d, 0.0));
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < differences.size(); ++i) {
    if (assignments[i] < 0 || static_cast<std::size_t>(assignments[i]) >= k) {
      throw DataError("build_library: assignment " + std::to_string(assignments[i]) + " outside [0, k)");
    }
    auto& c = lib.raw_centroids[assignments[i]];
    for (std::size_t j = 0; j < d; ++j) c[j] += differences[i][j];
    ++count[assignments[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] == 0) throw DataError("build_library: cluster " + std::to_string(c) + " is empty");
    for (double& x : lib.raw_centroids[c]) x /= static_cast<double>(count[c]);
    const double n = norm(lib.raw_centroids[c]);
    if (!(n > 1e-12)) {
      throw DataError("build_library: cluster " + std::to_string(c) + " of " + std::to_string(count[c]) +
                      " vectors has a zero-norm centroid (differences cancel)");
    }
    Vec v = lib.raw_centroids[c];
    for (double& x : v) x /= n;
    lib.vectors.push_back(std::move(v));
  }
  return lib;
}

std::uint64_t PrimitiveLibrary::hash() const {
  ByteWriter w;
  w.u64(size());
  w.u64(dim());
  w.u64(layer);
  w.u64(model_fingerprint);
  for (const auto& v : vectors)
    for (double x : v) w.f32(static_cast<float>(x));
  return w.hash();
}

void PrimitiveLibrary::save(const std::filesystem::path& path, const std::string& sidecar_extra_json) const {
  ByteWriter w;
  w.magic(kLibraryMagic);
  w.u32(kLibraryVersion);
  w.u64(size());
  w.u64(dim());
  w.u64(layer);
  w.u64(model_fingerprint);
  w.u64(config_hash);
  for (const auto& v : vectors)
    for (double x : v) w.f32(static_cast<float>(x));
  w.u64(w.hash());
  write_file_bytes(path, w.buffer());

  nlohmann::ordered_json j;
  j["k"] = size();
  j["dim"] = dim();
  j["layer"] = layer;
  j["model_fingerprint"] = hex64(model_fingerprint);
  j["library_hash"] = hex64(hash());
  std::vector<std::size_t> histogram(size(), 0);
  for (int a : assignments) {
    if (a >= 0 && static_cast<std::size_t>(a) < histogram.size()) ++histogram[a];
  }
  j["assignment_histogram"] = histogram;
  j["cosine_matrix"] = cosine_matrix(*this);
  j["extra"] = nlohmann::ordered_json::parse(sidecar_extra_json);
  auto sidecar = path;
  sidecar += ".json";
  write_text_file(sidecar, j.dump(2) + "\n");
}

PrimitiveLibrary PrimitiveLibrary::load(const std::filesystem::path& path, std::uint64_t expected_fingerprint,
                                        bool allow_mismatch) {
  ByteReader r(read_file_bytes(path), path.string());
  r.expect_magic(kLibraryMagic);
  const auto version = r.u32();
  if (version != kLibraryVersion) throw FormatError(path.string() + ": unsupported library version");
  PrimitiveLibrary lib;
  const auto k = r.u64();
  const auto d = r.u64();
  if (k == 0 || d == 0 || k > 4096 || d > 65536) throw FormatError(path.string() + ": implausible library header");
  lib.layer = r.u64();
  lib.model_fingerprint = r.u64();
  lib.config_hash = r.u64();
  for (std::uint64_t i = 0; i < k; ++i) {
    Vec v(d);
    for (auto& x : v) x = static_cast<double>(r.f32());
    lib.vectors.push_back(std::move(v));
  }
  const std::size_t body = r.position();
  if (fnv1a64(r.prefix(body)) != r.u64()) throw FormatError(path.string() + ": content hash mismatch");
  if (!allow_mismatch && lib.model_fingerprint != expected_fingerprint) {
    throw ProvenanceError(path.string() + ": library was elicited from model " + hex64(lib.model_fingerprint) +
                          " but the supplied model is " + hex64(expected_fingerprint));
  }
  for (auto& v : lib.vectors) {
    const double n = norm(v);
    if (!(n > 0)) throw FormatError(path.string() + ": zero row in library");
    for (double& x : v) x /= n;
  }
  return lib;
}

std::vector<Vec> cosine_matrix(const PrimitiveLibrary& library) {
  const std::size_t k = library.size();
  std::vector<Vec> m(k, Vec(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) {
        m[i][j] = 1.0;
        continue;
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < library.dim(); ++c) dot += library.vectors[i][c] * library.vectors[j][c];
      m[i][j] = std::clamp(dot / (norm(library.vectors[i]) * norm(library.vectors[j])), -1.0, 1.0);
    }
  }
  // Exact symmetry regardless of summation order.
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < i; ++j) m[i][j] = m[j][i];
  return m;
}

double mean_abs_off_diagonal(const std::vector<Vec>& matrix) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < matrix.size(); ++i)
    for (std::size_t j = 0; j < matrix.size(); ++j)
      if (i != j) {
        s += std::abs(matrix[i][j]);
        ++n;
      }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

std::vector<int> max_weight_matching(const std::vector<Vec>& similarity) {
  const std::size_t n = similarity.size();
  for (const auto& row : similarity) {
    if (row.size() != n) throw DimensionError("max_weight_matching: matrix must be square");
  }
  // Hungarian method on cost = -similarity, 1-based potentials.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -similarity[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> match(n, -1);
  for (std::size_t j = 1; j <= n; ++j) match[p[j] - 1] = static_cast<int>(j - 1);
  return match;
}

double cluster_purity(const std::vector<int>& assignments, const std::vector<int>& labels) {
  if (assignments.size() != labels.size() || assignments.empty()) throw DimensionError("cluster_purity: bad lengths");
  std::map<int, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < labels.size(); ++i) ++table[assignments[i]][labels[i]];
  std::size_t hits = 0;
  for (const auto& [cluster, counts] : table) {
    std::size_t best = 0;
    for (const auto& [label, c] : counts) best = std::max(best, c);
    hits += best;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<SweepRow> static_sweep(const Model& model, const PrimitiveLibrary& library,
                                   const std::vector<std::vector<TaskInstance>>& eval_sets,
                                   const std::vector<double>& alphas, std::size_t max_steps) {
  if (library.layer < 1 || library.layer >= model.config().num_layers) {
    throw DimensionError("static_sweep: library layer outside the model");
  }
  // acc[i][a][family] accumulated per prompt so each prefill is shared.
  const std::size_t k = library.size();
  std::vector<SweepRow> rows;
  for (const auto& tasks : eval_sets) {
    if (tasks.empty()) continue;
    std::vector<std::size_t> correct(k * alphas.size(), 0), tokens(k * alphas.size(), 0);
    for (const auto& t : tasks) {
      Decoder dec = prefill(model, t.prompt, library.layer);
      const auto mark = dec.mark();
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t a = 0; a < alphas.size(); ++a) {
          Vec steer(library.dim());
          for (std::size_t c = 0; c < steer.size(); ++c) steer[c] = alphas[a] * library.vectors[i][c];
          dec.rollback(mark);
          const auto gen = generate_from(dec, t.prompt.back(), &steer, max_steps, Sampling::greedy_decoding());
          correct[i * alphas.size() + a] += static_cast<std::size_t>(verify(gen.tokens, t));
          tokens[i * alphas.size() + a] += gen.count;
        }
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        SweepRow row;
        row.vector_index = i;
        row.alpha = alphas[a];
        row.skill = tasks.front().skill;
        row.accuracy = static_cast<double>(correct[i * alphas.size() + a]) / static_cast<double>(tasks.size());
        row.mean_tokens = static_cast<double>(tokens[i * alphas.size() + a]) / static_cast<double>(tasks.size());
        rows.push_back(row);
      }
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.vector_index, a.alpha) < std::tie(b.vector_index, b.alpha);
  });
  return rows;
}

}  // namespace primroute
