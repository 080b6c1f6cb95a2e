#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuroforge/ellipse.hpp"
#include "neuroforge/io.hpp"
#include "neuroforge/morphology.hpp"
#include "neuroforge/rng.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge {

struct MitoSignature {
  BinaryGrid stamp;
  double major_axis_len = 0.0;
  double orientation = 0.0;
  std::size_t volume = 0;
  std::string source_id;
};

struct RemodelConfig {
  double elastic_alpha = 8.0;
  double elastic_sigma = 16.0;
  double top_volume_fraction = 0.10;
  std::array<double, 2> axis_ratio_range{0.2, 0.6};
  int margin = 1;
  int max_attempts = 50;
  int mito_target = 4;

  void validate() const {
    if (!(elastic_alpha >= 0.0) || !(elastic_sigma > 0.0))
      throw UsageError("remodel: elastic_alpha must be >= 0 and elastic_sigma > 0");
    if (!(top_volume_fraction > 0.0 && top_volume_fraction <= 1.0))
      throw UsageError("remodel: top_volume_fraction must lie in (0, 1]");
    if (!(axis_ratio_range[0] > 0.0 && axis_ratio_range[0] <= axis_ratio_range[1]))
      throw UsageError("remodel: axis_ratio_range needs 0 < min <= max");
    if (margin < 0) throw UsageError("remodel: margin must be >= 0");
    if (max_attempts < 1) throw UsageError("remodel: max_attempts must be >= 1");
    if (mito_target < 0) throw UsageError("remodel: mito_target must be >= 0");
  }
};

struct PlacementReport {
  int requested = 0;
  int placed = 0;
  long attempts = 0;
  /// Attempts spent on each requested placement (each <= max_attempts).
  std::vector<int> attempts_per_request;
};

// ---------------------------------------------------------------------------
// Signature library

/// One signature per mitochondrion instance. Descriptors come from the
/// instance's maximum-area lateral slice; the stamp is the tight 3D crop.
/// Instances too small or too thin for an ellipse fit are skipped.
inline std::vector<MitoSignature> build_signature_library(const LabelVolume& mito,
                                                          const std::string& source = "mito") {
  const auto s = mito.shape();
  struct Box {
    int lo[3], hi[3];
    std::size_t n = 0;
  };
  std::map<std::uint32_t, Box> boxes;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const auto id = mito(z, y, x);
        if (!id) continue;
        auto [it, fresh] = boxes.try_emplace(id);
        auto& b = it->second;
        const int p[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = fresh ? p[a] : std::min(b.lo[a], p[a]);
          b.hi[a] = fresh ? p[a] : std::max(b.hi[a], p[a]);
        }
        ++b.n;
      }
  if (boxes.empty()) throw DataError("mitochondria label volume has no instances");
  std::vector<MitoSignature> lib;
  for (const auto& [id, b] : boxes) {
    const Shape3 cs{b.hi[0] - b.lo[0] + 1, b.hi[1] - b.lo[1] + 1, b.hi[2] - b.lo[2] + 1};
    BinaryGrid stamp(cs, 0, mito.resolution());
    for (int z = 0; z < cs.d; ++z)
      for (int y = 0; y < cs.h; ++y)
        for (int x = 0; x < cs.w; ++x)
          stamp(z, y, x) = mito(z + b.lo[0], y + b.lo[1], x + b.lo[2]) == id ? 1 : 0;
    auto on = [&](int z, int y, int x) { return stamp(z, y, x) != 0; };
    const auto [zbest, area] = max_area_slice(cs, on);
    EllipseFit fit;
    try {
      fit = fit_ellipse_slice(cs, zbest, on);
    } catch (const DataError&) {
      continue;
    }
    lib.push_back({std::move(stamp), fit.major_len, fit.theta, b.n, source + ":" + std::to_string(id)});
  }
  if (lib.empty()) throw DataError("no mitochondrion instance is large enough for an ellipse fit");
  return lib;
}

inline constexpr const char* kSignatureMagic = "NEUROFORGE-SIGLIB-1";

inline void save_signature_library(const std::filesystem::path& path, const std::vector<MitoSignature>& lib) {
  io::json sigs = io::json::array();
  std::vector<char> payload;
  for (const auto& s : lib) {
    const auto sh = s.stamp.shape();
    sigs.push_back({{"source_id", s.source_id},
                    {"major_axis_len", s.major_axis_len},
                    {"orientation", s.orientation},
                    {"volume", s.volume},
                    {"stamp_shape", {sh.d, sh.h, sh.w}}});
    const auto bytes = s.stamp.data();
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  }
  io::write_framed(path, kSignatureMagic, {{"count", lib.size()}, {"signatures", sigs}}, payload);
}

inline std::vector<MitoSignature> load_signature_library(const std::filesystem::path& path) {
  const auto f = io::read_framed(path, kSignatureMagic);
  std::vector<MitoSignature> lib;
  try {
    std::size_t off = 0;
    for (const auto& e : f.descriptor.at("signatures")) {
      const auto sh = e.at("stamp_shape").get<std::array<int, 3>>();
      const Shape3 s{sh[0], sh[1], sh[2]};
      if (off + s.size() > f.payload.size()) throw DataError(path.string() + ": truncated stamp payload");
      std::vector<std::uint8_t> bytes(f.payload.begin() + static_cast<std::ptrdiff_t>(off),
                                      f.payload.begin() + static_cast<std::ptrdiff_t>(off + s.size()));
      off += s.size();
      MitoSignature sig{BinaryGrid(s, std::move(bytes)), e.at("major_axis_len").get<double>(),
                        e.at("orientation").get<double>(), e.at("volume").get<std::size_t>(),
                        e.at("source_id").get<std::string>()};
      const auto ones = static_cast<std::size_t>(
          std::count_if(sig.stamp.data().begin(), sig.stamp.data().end(), [](auto v) { return v != 0; }));
      if (ones == 0 || ones != sig.volume || !(sig.major_axis_len > 0.0))
        throw DataError(path.string() + ": inconsistent signature '" + sig.source_id + "'");
      lib.push_back(std::move(sig));
    }
    if (off != f.payload.size()) throw DataError(path.string() + ": trailing payload bytes");
    if (lib.size() != f.descriptor.at("count").get<std::size_t>())
      throw DataError(path.string() + ": signature count mismatch");
  } catch (const io::json::exception& e) {
    throw DataError(path.string() + ": malformed library descriptor: " + e.what());
  }
  return lib;
}

// ---------------------------------------------------------------------------
// Selective elastic deformation

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

/// Separable 2D Gaussian smoothing of an h x w plane, replicate borders.
inline void smooth_plane(std::vector<double>& p, int h, int w, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(p.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * p[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      p[y * w + x] = acc;
    }
}

}  // namespace detail

/// Per-slice lateral displacement: uniform white noise smoothed by a
/// Gaussian of width sigma, rescaled so the largest component magnitude in
/// each slice equals alpha. No axial displacement.
inline DisplacementField make_elastic_field(Shape3 s, double alpha, double sigma, Rng& rng) {
  DisplacementField f(s);
  if (alpha == 0.0) return f;
  const auto k = detail::gaussian_kernel(sigma);
  const auto plane = static_cast<std::size_t>(s.h) * s.w;
  std::vector<double> dy(plane), dx(plane);
  for (int z = 0; z < s.d; ++z) {
    for (auto& v : dy) v = rng.uniform(-1.0, 1.0);
    for (auto& v : dx) v = rng.uniform(-1.0, 1.0);
    detail::smooth_plane(dy, s.h, s.w, k);
    detail::smooth_plane(dx, s.h, s.w, k);
    double peak = 0;
    for (std::size_t i = 0; i < plane; ++i) peak = std::max({peak, std::abs(dy[i]), std::abs(dx[i])});
    const double scale = peak > 0 ? alpha / peak : 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      auto& d = f.d[static_cast<std::size_t>(z) * plane + i];
      d = {0.f, static_cast<float>(dy[i] * scale), static_cast<float>(dx[i] * scale)};
      // Float rounding must not push a component past alpha.
      for (int a = 1; a < 3; ++a) d[a] = std::clamp(d[a], static_cast<float>(-alpha), static_cast<float>(alpha));
    }
  }
  return f;
}

/// Warps the membrane channel and the labels with one shared field; the
/// mitochondria channel is returned untouched.
inline std::pair<ConditionVolume, LabelVolume> selective_elastic_deform(const ConditionVolume& cond,
                                                                        const LabelVolume& labels,
                                                                        const RemodelConfig& cfg, Rng& rng) {
  if (!(cond.shape() == labels.shape()))
    throw DataError("condition " + cond.shape().str() + " and labels " + labels.shape().str() + " differ in shape");
  const auto field = make_elastic_field(labels.shape(), cfg.elastic_alpha, cfg.elastic_sigma, rng);
  auto boundary = warp_by_field(cond.boundary, field, Interp::Nearest);
  auto warped = warp_by_field(labels, field, Interp::Nearest);
  return {ConditionVolume(std::move(boundary), cond.mito), std::move(warped)};
}

// ---------------------------------------------------------------------------
// Placement

inline std::map<std::uint32_t, std::size_t> instance_volumes(const LabelVolume& labels) {
  std::map<std::uint32_t, std::size_t> v;
  for (auto id : labels.data())
    if (id) ++v[id];
  return v;
}

/// IDs in the top `top_volume_fraction` by voxel count: the threshold is the
/// k-th largest volume with k = max(1, ceil(f n)), and every instance at or
/// above it is returned (ascending ID order).
inline std::vector<std::uint32_t> select_candidates(const LabelVolume& labels, const RemodelConfig& cfg) {
  const auto vols = instance_volumes(labels);
  if (vols.empty()) throw DataError("label volume has no nonzero instances");
  std::vector<std::size_t> sorted;
  for (const auto& [id, n] : vols) sorted.push_back(n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto n = static_cast<double>(sorted.size());
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(cfg.top_volume_fraction * n - 1e-9)),
                                         1, sorted.size());
  const auto threshold = sorted[k - 1];
  std::vector<std::uint32_t> ids;
  for (const auto& [id, vol] : vols)
    if (vol >= threshold) ids.push_back(id);
  return ids;
}

/// Rotates every lateral slice of a stamp by `dtheta` (same sense as
/// EllipseFit::theta) about the stamp centre with nearest resampling, on a
/// canvas large enough to hold the result.
inline BinaryGrid rotate_stamp(const BinaryGrid& stamp, double dtheta) {
  const auto s = stamp.shape();
  const int side = static_cast<int>(std::ceil(std::hypot(s.h, s.w))) + 2;
  BinaryGrid out({s.d, side, side}, 0, stamp.resolution());
  const double sc_y = (s.h - 1) / 2.0, sc_x = (s.w - 1) / 2.0, cc = (side - 1) / 2.0;
  const double c = std::cos(dtheta), sn = std::sin(dtheta);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double ox = x - cc, oy = y - cc;
        const auto sx = std::lround(sc_x + ox * c + oy * sn);
        const auto sy = std::lround(sc_y - ox * sn + oy * c);
        if (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w) out(z, y, x) = stamp(z, static_cast<int>(sy), static_cast<int>(sx));
      }
  return out;
}

/// Closing (3x3 lateral cross, one iteration) then hole filling, cropped to
/// content.
inline BinaryGrid refine_stamp(const BinaryGrid& stamp) {
  return crop_to_content(fill_holes_lateral(close_lateral(pad(stamp, 0, 2, 2))));
}

namespace detail {

struct NeuronFit {
  bool ok = false;
  EllipseFit fit;
};

/// True if every stamp voxel, placed at offset o, has its whole Chebyshev
/// neighbourhood of radius m inside the volume, inside neuron `id`, and off
/// the membrane, and does not overlap existing mitochondria.
inline bool placement_valid(const BinaryGrid& stamp, std::array<int, 3> o, const LabelVolume& labels,
                            const ConditionVolume& cond, const BinaryGrid& mito, std::uint32_t id, int m) {
  const auto s = stamp.shape();
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!stamp(z, y, x)) continue;
        const int gz = z + o[0], gy = y + o[1], gx = x + o[2];
        if (!labels.contains(gz, gy, gx) || mito(gz, gy, gx)) return false;
        for (int dz = -m; dz <= m; ++dz)
          for (int dy = -m; dy <= m; ++dy)
            for (int dx = -m; dx <= m; ++dx) {
              const int a = gz + dz, b = gy + dy, c = gx + dx;
              if (!labels.contains(a, b, c) || labels(a, b, c) != id || cond.boundary(a, b, c)) return false;
            }
      }
  return true;
}

}  // namespace detail

struct PlacementResult {
  ConditionVolume cond;
  PlacementReport report;
};

/// Places up to cfg.mito_target library mitochondria into large neurons,
/// spending at most cfg.max_attempts attempts on each.
inline PlacementResult place_mitochondria(const ConditionVolume& cond, const LabelVolume& labels,
                                          const std::vector<MitoSignature>& library, const RemodelConfig& cfg,
                                          Rng& rng) {
  cfg.validate();
  if (!(cond.shape() == labels.shape()))
    throw DataError("condition " + cond.shape().str() + " and labels " + labels.shape().str() + " differ in shape");
  PlacementResult res{cond, {}};
  res.report.requested = cfg.mito_target;
  if (library.empty() || cfg.mito_target == 0) return res;
  const auto s = labels.shape();
  const auto candidates = select_candidates(labels, cfg);
  std::map<std::uint32_t, detail::NeuronFit> fits;
  auto neuron_fit = [&](std::uint32_t id) -> const detail::NeuronFit& {
    auto [it, fresh] = fits.try_emplace(id);
    if (fresh) {
      auto in = [&](int z, int y, int x) { return labels(z, y, x) == id; };
      try {
        it->second.fit = fit_ellipse_slice(s, max_area_slice(s, in).first, in);
        it->second.ok = true;
      } catch (const DataError&) {
      }
    }
    return it->second;
  };
  BinaryGrid mito = cond.mito;
  for (int req = 0; req < cfg.mito_target; ++req) {
    int used = 0;
    bool placed = false;
    while (!placed && used < cfg.max_attempts) {
      ++used;
      const auto id = candidates[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
      const auto& nf = neuron_fit(id);
      if (!nf.ok) continue;
      std::vector<std::size_t> fitting;
      for (std::size_t i = 0; i < library.size(); ++i) {
        const double r = library[i].major_axis_len / nf.fit.major_len;
        if (r >= cfg.axis_ratio_range[0] && r <= cfg.axis_ratio_range[1]) fitting.push_back(i);
      }
      if (fitting.empty()) continue;
      const auto& sig = library[fitting[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(fitting.size()) - 1))]];
      const auto stamp = refine_stamp(rotate_stamp(sig.stamp, nf.fit.theta - sig.orientation));
      if (stamp.size() == 0 || stamp.shape().d > s.d) continue;
      const auto ss = stamp.shape();
      const int z0 = static_cast<int>(rng.uniform_int(0, s.d - ss.d));
      const std::array<int, 3> o{z0, static_cast<int>(std::lround(nf.fit.cy - (ss.h - 1) / 2.0)),
                                 static_cast<int>(std::lround(nf.fit.cx - (ss.w - 1) / 2.0))};
      if (!detail::placement_valid(stamp, o, labels, cond, mito, id, cfg.margin)) continue;
      for (int z = 0; z < ss.d; ++z)
        for (int y = 0; y < ss.h; ++y)
          for (int x = 0; x < ss.w; ++x)
            if (stamp(z, y, x)) mito(z + o[0], y + o[1], x + o[2]) = 1;
      placed = true;
    }
    res.report.attempts += used;
    res.report.attempts_per_request.push_back(used);
    if (placed) ++res.report.placed;
  }
  res.cond = ConditionVolume(cond.boundary, std::move(mito));
  return res;
}

struct RemodelResult {
  ConditionVolume cond;
  LabelVolume labels;
  PlacementReport report;
};

/// Selective elastic deformation followed by mitochondrion placement.
inline RemodelResult remodel(const ConditionVolume& cond, const LabelVolume& labels,
                             const std::vector<MitoSignature>& library, const RemodelConfig& cfg, Rng& rng) {
  cfg.validate();
  auto [dcond, dlabels] = selective_elastic_deform(cond, labels, cfg, rng);
  auto placed = place_mitochondria(dcond, dlabels, library, cfg, rng);
  return {std::move(placed.cond), std::move(dlabels), std::move(placed.report)};
}

}  // namespace neuroforge
