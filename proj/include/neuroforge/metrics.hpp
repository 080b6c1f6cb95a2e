#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "neuroforge/errors.hpp"
#include "neuroforge/io.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge {

/// Sparse joint label histogram of two segmentations.
struct ContingencyTable {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> n;  // (gt, pred) -> count
  std::map<std::uint32_t, std::uint64_t> a;                            // gt row sums
  std::map<std::uint32_t, std::uint64_t> b;                            // pred column sums
  std::uint64_t total = 0;

  /// Merges another table (e.g. from a different shard).
  void merge(const ContingencyTable& o) {
    for (const auto& [k, v] : o.n) n[k] += v;
    for (const auto& [k, v] : o.a) a[k] += v;
    for (const auto& [k, v] : o.b) b[k] += v;
    total += o.total;
  }
};

inline ContingencyTable contingency(const LabelVolume& gt, const LabelVolume& pred, bool ignore_zero_gt = true) {
  if (!(gt.shape() == pred.shape()))
    throw DataError("gt " + gt.shape().str() + " and prediction " + pred.shape().str() + " differ in shape");
  std::vector<std::uint64_t> keys;
  keys.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (!ignore_zero_gt || gt[i] != 0) keys.push_back(static_cast<std::uint64_t>(gt[i]) << 32 | pred[i]);
  if (keys.empty()) throw DataError("no voxels left to compare after excluding gt label 0");
  std::sort(keys.begin(), keys.end());
  ContingencyTable t;
  for (std::size_t i = 0; i < keys.size();) {
    std::size_t j = i;
    while (j < keys.size() && keys[j] == keys[i]) ++j;
    const auto g = static_cast<std::uint32_t>(keys[i] >> 32);
    const auto p = static_cast<std::uint32_t>(keys[i] & 0xffffffffu);
    const std::uint64_t c = j - i;
    t.n[{g, p}] = c;
    t.a[g] += c;
    t.b[p] += c;
    i = j;
  }
  t.total = keys.size();
  return t;
}

struct VariationOfInformation {
  double total = 0.0;
  double split = 0.0;  // H(pred | gt)
  double merge = 0.0;  // H(gt | pred)
};

/// Variation of information in nats.
inline VariationOfInformation variation_of_information(const ContingencyTable& t) {
  const double n = static_cast<double>(t.total);
  VariationOfInformation vi;
  for (const auto& [k, c] : t.n) {
    const double pij = c / n;
    const double pi = t.a.at(k.first) / n;
    const double pj = t.b.at(k.second) / n;
    vi.split -= pij * std::log(pij / pi);
    vi.merge -= pij * std::log(pij / pj);
  }
  // Exact zeros instead of -0 or round-off residue for identical partitions.
  vi.split = std::max(vi.split, 0.0);
  vi.merge = std::max(vi.merge, 0.0);
  vi.total = vi.split + vi.merge;
  return vi;
}

inline VariationOfInformation variation_of_information(const LabelVolume& gt, const LabelVolume& pred,
                                                       bool ignore_zero_gt = true) {
  return variation_of_information(contingency(gt, pred, ignore_zero_gt));
}

struct AdaptedRand {
  double error = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Adapted Rand error: 1 - F-score of pair precision and recall.
inline AdaptedRand adapted_rand_error(const ContingencyTable& t) {
  auto sq = [](std::uint64_t v) { return static_cast<double>(v) * static_cast<double>(v); };
  double sn = 0, sa = 0, sb = 0;
  for (const auto& [k, c] : t.n) sn += sq(c);
  for (const auto& [k, c] : t.a) sa += sq(c);
  for (const auto& [k, c] : t.b) sb += sq(c);
  AdaptedRand r;
  r.precision = sn / sb;
  r.recall = sn / sa;
  r.error = 1.0 - 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline AdaptedRand adapted_rand_error(const LabelVolume& gt, const LabelVolume& pred, bool ignore_zero_gt = true) {
  return adapted_rand_error(contingency(gt, pred, ignore_zero_gt));
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance, symmetrized.
inline GaussianFit fit_gaussian(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw DataError("gaussian fit needs at least 2 feature vectors");
  const auto dim = static_cast<Eigen::Index>(features[0].size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (static_cast<Eigen::Index>(features[i].size()) != dim) throw DataError("feature vectors differ in dimension");
    for (Eigen::Index j = 0; j < dim; ++j) x(static_cast<Eigen::Index>(i), j) = features[i][static_cast<std::size_t>(j)];
  }
  GaussianFit g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(features.size() - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  return g;
}

namespace detail {

inline void check_psd(const Eigen::MatrixXd& m, const char* what) {
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8)
    throw DataError(std::string(what) + " covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8) throw DataError(std::string(what) + " covariance is not PSD");
}

/// Square root of a symmetric PSD matrix, clamping eigenvalues at 0.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the cross term taken
/// as Tr((S1^{1/2} S2 S1^{1/2})^{1/2}), which is symmetric and has the same
/// eigenvalues as (S1 S2)^{1/2}.
inline double frechet_distance(const GaussianFit& p, const GaussianFit& q) {
  if (p.mean.size() != q.mean.size() || p.cov.rows() != q.cov.rows())
    throw DataError("frechet distance: dimension mismatch (" + std::to_string(p.mean.size()) + " vs " +
                    std::to_string(q.mean.size()) + ")");
  detail::check_psd(p.cov, "first");
  detail::check_psd(q.cov, "second");
  const Eigen::MatrixXd s1h = detail::sqrt_psd(p.cov);
  Eigen::MatrixXd m = s1h * q.cov * s1h;
  m = 0.5 * (m + m.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (p.mean - q.mean).squaredNorm() + p.cov.trace() + q.cov.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------
// Feature files and the built-in extractor

inline constexpr const char* kFeatureMagic = "NEUROFORGE-FEATURES-1";

inline void save_features(const std::filesystem::path& path, const std::vector<std::vector<double>>& f) {
  const std::size_t dim = f.empty() ? 0 : f[0].size();
  std::vector<char> payload;
  payload.reserve(f.size() * dim * sizeof(double));
  for (const auto& v : f) {
    if (v.size() != dim) throw DataError("feature vectors differ in dimension");
    const auto* b = reinterpret_cast<const char*>(v.data());
    payload.insert(payload.end(), b, b + dim * sizeof(double));
  }
  io::write_framed(path, kFeatureMagic, {{"count", f.size()}, {"dim", dim}, {"dtype", "f64"}}, payload);
}

inline std::vector<std::vector<double>> load_features(const std::filesystem::path& path) {
  const auto fr = io::read_framed(path, kFeatureMagic);
  std::size_t count = 0, dim = 0;
  std::string dtype;
  try {
    count = fr.descriptor.at("count").get<std::size_t>();
    dim = fr.descriptor.at("dim").get<std::size_t>();
    dtype = fr.descriptor.at("dtype").get<std::string>();
  } catch (const io::json::exception& e) {
    throw DataError(path.string() + ": malformed feature descriptor: " + e.what());
  }
  const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
  if (!width) throw DataError(path.string() + ": unsupported feature dtype '" + dtype + "'");
  if (fr.payload.size() != count * dim * width) throw DataError(path.string() + ": payload size mismatch");
  std::vector<std::vector<double>> out(count, std::vector<double>(dim));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      const char* src = fr.payload.data() + (i * dim + j) * width;
      if (width == 8) {
        std::memcpy(&out[i][j], src, 8);
      } else {
        float v;
        std::memcpy(&v, src, 4);
        out[i][j] = v;
      }
    }
  return out;
}

/// Stand-in feature extractor: each full-depth lateral tile gives one vector
/// of mean, standard deviation, mean lateral gradient magnitude and mean
/// axial difference, at lateral pooling factors 1, 2 and 4.
inline std::vector<std::vector<double>> tile_features(const Volume& v, int tile = 16) {
  const auto s = v.shape();
  if (s.h < tile || s.w < tile) throw DataError("volume " + s.str() + " smaller than feature tile " + std::to_string(tile));
  std::vector<std::vector<double>> out;
  for (int ty = 0; ty + tile <= s.h; ty += tile)
    for (int tx = 0; tx + tile <= s.w; tx += tile) {
      std::vector<double> f;
      for (int p : {1, 2, 4}) {
        const int n = tile / p;
        std::vector<double> g(static_cast<std::size_t>(s.d) * n * n, 0.0);
        for (int z = 0; z < s.d; ++z)
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
              double acc = 0;
              for (int a = 0; a < p; ++a)
                for (int b = 0; b < p; ++b) acc += v(z, ty + y * p + a, tx + x * p + b);
              g[(static_cast<std::size_t>(z) * n + y) * n + x] = acc / (p * p);
            }
        auto at = [&](int z, int y, int x) { return g[(static_cast<std::size_t>(z) * n + y) * n + x]; };
        double mean = 0, sq = 0, grad = 0, axial = 0;
        for (double e : g) mean += e;
        mean /= static_cast<double>(g.size());
        for (double e : g) sq += (e - mean) * (e - mean);
        int ng = 0, na = 0;
        for (int z = 0; z < s.d; ++z)
          for (int y = 0; y + 1 < n; ++y)
            for (int x = 0; x + 1 < n; ++x, ++ng)
              grad += std::hypot(at(z, y + 1, x) - at(z, y, x), at(z, y, x + 1) - at(z, y, x));
        for (int z = 0; z + 1 < s.d; ++z)
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++na) axial += std::abs(at(z + 1, y, x) - at(z, y, x));
        f.push_back(mean);
        f.push_back(std::sqrt(sq / static_cast<double>(g.size())));
        f.push_back(ng ? grad / ng : 0.0);
        f.push_back(na ? axial / na : 0.0);
      }
      out.push_back(std::move(f));
    }
  return out;
}

/// Pearson correlation between intensities and a binary mask (point-biserial r).
inline double point_biserial(const Volume& v, const BinaryGrid& mask) {
  if (!(v.shape() == mask.shape())) throw DataError("point-biserial: volume and mask differ in shape");
  const double n = static_cast<double>(v.size());
  double mv = 0, mm = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    mv += v[i];
    mm += mask[i];
  }
  mv /= n;
  mm /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double a = v[i] - mv, b = mask[i] - mm;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("point-biserial: constant input");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace neuroforge
