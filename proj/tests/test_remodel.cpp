#include <algorithm>
#include <filesystem>
#include <map>
#include <numbers>

#include <gtest/gtest.h>

#include "neuroforge/io.hpp"
#include "neuroforge/morphology.hpp"
#include "neuroforge/phantom.hpp"
#include "neuroforge/remodel.hpp"
#include "support/moment_oracle.hpp"
#include "support/remodel_checks.hpp"

namespace nf = neuroforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / "neuroforge_test_remodel" / name;
  fs::create_directories(p.parent_path());
  return p;
}

nf::LabelVolume ellipsoid_labels(nf::Shape3 s, std::uint32_t id, int zc, double cy, double cx, double a, double b,
                                 double c, double theta, nf::LabelVolume into = {}) {
  if (into.size() == 0) into = nf::LabelVolume(s, 0u);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double dx = x - cx, dy = y - cy, dz = (z - zc) / c;
        const double u = dx * std::cos(theta) + dy * std::sin(theta);
        const double v = -dx * std::sin(theta) + dy * std::cos(theta);
        if (u * u / (a * a) + v * v / (b * b) + dz * dz <= 1.0) into(z, y, x) = id;
      }
  return into;
}

std::size_t count_id(const nf::LabelVolume& l, std::uint32_t id) {
  return static_cast<std::size_t>(std::count(l.data().begin(), l.data().end(), id));
}

nf::RemodelConfig no_deform() {
  nf::RemodelConfig c;
  c.elastic_alpha = 0.0;
  return c;
}

}  // namespace

TEST(SignatureLibrary, SingleInstance) {
  const auto l = ellipsoid_labels({5, 32, 32}, 7, 2, 16, 16, 8, 4, 1.5, 0.3);
  const auto lib = nf::build_signature_library(l, "vol");
  ASSERT_EQ(lib.size(), 1u);
  EXPECT_EQ(lib[0].volume, count_id(l, 7));
  EXPECT_EQ(lib[0].source_id, "vol:7");
  EXPECT_EQ(static_cast<std::size_t>(std::count(lib[0].stamp.data().begin(), lib[0].stamp.data().end(), 1)),
            lib[0].volume);
}

TEST(SignatureLibrary, TwoInstancesAndDescriptorsMatchSliceFit) {
  const nf::Shape3 s{5, 48, 48};
  auto l = ellipsoid_labels(s, 1, 2, 12, 12, 8, 4, 1.5, 0.3);
  l = ellipsoid_labels(s, 2, 2, 34, 34, 9, 3, 1.0, -0.9, l);
  const auto lib = nf::build_signature_library(l);
  ASSERT_EQ(lib.size(), 2u);
  EXPECT_EQ(lib[0].source_id, "mito:1");
  EXPECT_EQ(lib[1].source_id, "mito:2");
  for (std::uint32_t id : {1u, 2u}) {
    auto in = [&](int z, int y, int x) { return l(z, y, x) == id; };
    const auto f = nf::fit_ellipse_slice(s, nf::max_area_slice(s, in).first, in);
    EXPECT_EQ(lib[id - 1].major_axis_len, f.major_len);
    EXPECT_EQ(lib[id - 1].orientation, f.theta);
    EXPECT_EQ(lib[id - 1].volume, count_id(l, id));
  }
}

TEST(SignatureLibrary, EmptyInputIsAnError) {
  EXPECT_THROW(nf::build_signature_library(nf::LabelVolume({2, 8, 8}, 0u)), nf::DataError);
}

TEST(SignatureLibrary, FileRoundTripIsByteStable) {
  const auto ph = nf::make_phantom(3, {8, 64, 64});
  const auto lib = nf::build_signature_library(ph.mito);
  nf::save_signature_library(scratch("a.siglib"), lib);
  nf::save_signature_library(scratch("b.siglib"), nf::build_signature_library(ph.mito));
  EXPECT_EQ(nf::io::read_file(scratch("a.siglib")), nf::io::read_file(scratch("b.siglib")));
  const auto back = nf::load_signature_library(scratch("a.siglib"));
  ASSERT_EQ(back.size(), lib.size());
  for (std::size_t i = 0; i < lib.size(); ++i) {
    EXPECT_EQ(back[i].stamp, lib[i].stamp);
    EXPECT_EQ(back[i].major_axis_len, lib[i].major_axis_len);
    EXPECT_EQ(back[i].orientation, lib[i].orientation);
    EXPECT_EQ(back[i].source_id, lib[i].source_id);
  }
  nf::io::write_text(scratch("bad.siglib"), "NEUROFORGE-CKPT-1\n");
  EXPECT_THROW(nf::load_signature_library(scratch("bad.siglib")), nf::DataError);
}

TEST(ElasticDeform, ZeroAlphaIsIdentity) {
  const auto ph = nf::make_phantom(4, {8, 64, 64});
  const auto cond = nf::make_condition(ph.neurons, ph.mito);
  nf::Rng rng(1);
  const auto [c, l] = nf::selective_elastic_deform(cond, ph.neurons, no_deform(), rng);
  EXPECT_EQ(c.boundary, cond.boundary);
  EXPECT_EQ(c.mito, cond.mito);
  EXPECT_EQ(l, ph.neurons);
}

TEST(ElasticDeform, FieldIsBoundedAndLateral) {
  nf::Rng rng(2);
  const auto f = nf::make_elastic_field({4, 64, 64}, 8.0, 16.0, rng);
  float peak = 0;
  for (const auto& d : f.d) {
    EXPECT_EQ(d[0], 0.f);
    peak = std::max({peak, std::abs(d[1]), std::abs(d[2])});
  }
  EXPECT_LE(peak, 8.f);
  EXPECT_GT(peak, 7.9f);
}

TEST(ElasticDeform, ContractsHoldOnPhantoms) {
  nf::RemodelConfig cfg;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    const auto r = nf::testing::check_remodel_on_phantom(seed, cfg);
    for (const auto& v : r.violations) ADD_FAILURE() << v;
  }
}

TEST(SelectCandidates, OrderStatistic) {
  nf::LabelVolume l({1, 1, 55}, 0u);
  int k = 0;
  for (std::uint32_t id = 1; id <= 10; ++id)
    for (std::uint32_t j = 0; j < id; ++j) l[k++] = id;
  EXPECT_EQ(nf::select_candidates(l, {}), (std::vector<std::uint32_t>{10}));
}

TEST(SelectCandidates, TiesAreIncluded) {
  nf::LabelVolume all({1, 1, 12}, 0u);
  for (int i = 0; i < 12; ++i) all[i] = static_cast<std::uint32_t>(i / 3 + 1);
  EXPECT_EQ(nf::select_candidates(all, {}), (std::vector<std::uint32_t>{1, 2, 3, 4}));

  nf::LabelVolume l({1, 1, 210}, 0u);
  std::fill_n(l.vec().begin(), 5, 1u);
  std::fill_n(l.vec().begin() + 5, 5, 2u);
  std::fill_n(l.vec().begin() + 10, 100, 3u);
  std::fill_n(l.vec().begin() + 110, 100, 4u);
  nf::RemodelConfig cfg;
  cfg.top_volume_fraction = 0.5;
  EXPECT_EQ(nf::select_candidates(l, cfg), (std::vector<std::uint32_t>{3, 4}));
}

TEST(SelectCandidates, RelabelingPermutesOutput) {
  const auto ph = nf::make_phantom(5, {4, 32, 32});
  std::map<std::uint32_t, std::uint32_t> perm;
  std::uint32_t next = 1000;
  for (auto v : ph.neurons.data())
    if (!perm.count(v)) perm[v] = next -= 7;
  auto relabeled = ph.neurons;
  for (auto& v : relabeled.vec()) v = perm[v];
  nf::RemodelConfig cfg;
  cfg.top_volume_fraction = 0.3;
  std::vector<std::uint32_t> mapped;
  for (auto id : nf::select_candidates(ph.neurons, cfg)) mapped.push_back(perm[id]);
  std::sort(mapped.begin(), mapped.end());
  EXPECT_EQ(nf::select_candidates(relabeled, cfg), mapped);
}

TEST(SelectCandidates, NoInstancesIsAnError) {
  EXPECT_THROW(nf::select_candidates(nf::LabelVolume({1, 4, 4}, 0u), {}), nf::DataError);
}

TEST(Placement, RotatedStampFollowsTargetOrientation) {
  const auto l = ellipsoid_labels({1, 32, 32}, 1, 0, 16, 16, 10, 4, 1.0, 0.2);
  const auto lib = nf::build_signature_library(l);
  const auto rotated = nf::refine_stamp(nf::rotate_stamp(lib[0].stamp, 0.9));
  const auto o = nf::testing::moment_oracle(rotated);
  EXPECT_LT(nf::testing::axis_angle_diff(o.theta, lib[0].orientation + 0.9), 0.05);
}

TEST(Placement, RefinementClosesGapsAndFillsHoles) {
  // The four lateral neighbours of a missing voxel: closing restores it.
  nf::BinaryGrid plus({1, 3, 3}, 0);
  plus(0, 0, 1) = plus(0, 1, 0) = plus(0, 1, 2) = plus(0, 2, 1) = 1;
  EXPECT_EQ(nf::close_lateral(nf::pad(plus, 0, 2, 2))(0, 3, 3), 1);
  // A closed square ring: hole filling makes it solid.
  nf::BinaryGrid ring({1, 7, 7}, 0);
  for (int y = 1; y <= 5; ++y)
    for (int x = 1; x <= 5; ++x)
      if (y == 1 || y == 5 || x == 1 || x == 5) ring(0, y, x) = 1;
  const auto r = nf::refine_stamp(ring);
  EXPECT_EQ(r.shape(), (nf::Shape3{1, 5, 5}));
  for (auto v : r.data()) EXPECT_EQ(v, 1);
}

TEST(Placement, EmptyFilterLeavesMitoUnchanged) {
  const auto ph = nf::make_phantom(6, {8, 64, 64});
  const auto cond = nf::make_condition(ph.neurons, ph.mito);
  const auto lib = nf::build_signature_library(ph.mito);
  auto cfg = no_deform();
  cfg.axis_ratio_range = {50.0, 60.0};
  nf::Rng rng(1);
  const auto r = nf::place_mitochondria(cond, ph.neurons, lib, cfg, rng);
  EXPECT_EQ(r.cond.mito, cond.mito);
  EXPECT_EQ(r.report.placed, 0);
  EXPECT_EQ(r.report.requested, cfg.mito_target);
  EXPECT_EQ(r.report.attempts, static_cast<long>(cfg.mito_target) * cfg.max_attempts);
}

TEST(Placement, SingleHugeNeuronGetsOneComponent) {
  const nf::Shape3 s{8, 48, 48};
  const nf::LabelVolume neuron(s, 5u);
  const nf::ConditionVolume cond(nf::extract_boundaries(neuron), nf::BinaryGrid(s, 0));
  // Host neuron major axis equals its slice diagonal extent; a small disk keeps
  // the ratio inside the default range.
  const auto disk = ellipsoid_labels({3, 32, 32}, 1, 1, 16, 16, 6, 5, 1.0, 0.0);
  auto lib = nf::build_signature_library(disk);
  auto cfg = no_deform();
  cfg.mito_target = 1;
  nf::Rng rng(9);
  const auto r = nf::place_mitochondria(cond, neuron, lib, cfg, rng);
  ASSERT_EQ(r.report.placed, 1);
  nf::LabelVolume comp;
  EXPECT_EQ(nf::connected_components(r.cond.mito, comp, nf::Connectivity::Full26), 1u);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (r.cond.mito(z, y, x)) {
          EXPECT_GE(z, 1);
          EXPECT_LE(z, s.d - 2);
          EXPECT_GE(std::min({y, x, s.h - 1 - y, s.w - 1 - x}), 1);
        }
}

TEST(Placement, AcceptedStampsAvoidMembranesAndStayInOneNeuron) {
  nf::RemodelConfig cfg;
  cfg.margin = 2;
  cfg.mito_target = 6;
  int placed = 0;
  for (std::uint64_t seed = 200; seed < 206; ++seed) {
    const auto r = nf::testing::check_remodel_on_phantom(seed, cfg);
    for (const auto& v : r.violations) ADD_FAILURE() << v;
    placed += r.placed;
  }
  EXPECT_GT(placed, 0);
}

TEST(Remodel, ZeroAlphaEmptyLibraryIsIdentity) {
  const auto ph = nf::make_phantom(7, {8, 64, 64});
  const auto cond = nf::make_condition(ph.neurons, ph.mito);
  nf::Rng rng(3);
  const auto r = nf::remodel(cond, ph.neurons, {}, no_deform(), rng);
  EXPECT_EQ(r.cond.boundary, cond.boundary);
  EXPECT_EQ(r.cond.mito, cond.mito);
  EXPECT_EQ(r.labels, ph.neurons);
}

TEST(Remodel, DefaultConfigPlacesOnPhantom) {
  const auto ph = nf::make_phantom(8, {8, 64, 64});
  const auto cond = nf::make_condition(ph.neurons, ph.mito);
  const auto lib = nf::build_signature_library(ph.mito);
  nf::Rng rng(4);
  const auto r = nf::remodel(cond, ph.neurons, lib, {}, rng);
  EXPECT_GE(r.report.placed, 1);
}

TEST(Morphology, ConnectedComponentsByConnectivity) {
  nf::BinaryGrid g({1, 3, 3}, 0);
  g(0, 0, 0) = g(0, 1, 1) = g(0, 2, 2) = 1;
  nf::LabelVolume out;
  EXPECT_EQ(nf::connected_components(g, out, nf::Connectivity::Face6), 3u);
  EXPECT_EQ(nf::connected_components(g, out, nf::Connectivity::Full26), 1u);
}

TEST(Phantom, DeterministicPerSeed) {
  const auto a = nf::make_phantom(11, {8, 64, 64});
  const auto b = nf::make_phantom(11, {8, 64, 64});
  const auto c = nf::make_phantom(12, {8, 64, 64});
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.neurons, b.neurons);
  EXPECT_EQ(a.mito, b.mito);
  EXPECT_NE(a.neurons, c.neurons);
}

TEST(Phantom, BoundaryCoverageAndMitoContainment) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = nf::make_phantom(seed, {8, 64, 64});
    const auto b = nf::extract_boundaries(p.neurons);
    const auto on = static_cast<double>(std::count(b.data().begin(), b.data().end(), 1));
    EXPECT_GT(on, 0);
    EXPECT_LT(on / b.size(), 0.40);
    std::map<std::uint32_t, std::set<std::uint32_t>> hosts;
    for (std::size_t i = 0; i < p.mito.size(); ++i)
      if (p.mito[i]) hosts[p.mito[i]].insert(p.neurons[i]);
    EXPECT_GE(hosts.size(), 1u);
    for (const auto& [id, h] : hosts) EXPECT_EQ(h.size(), 1u) << "mito " << id;
  }
}

TEST(Phantom, RejectsSmallShapes) {
  EXPECT_THROW(nf::make_phantom(1, {3, 64, 64}), nf::UsageError);
  EXPECT_THROW(nf::make_phantom(1, {8, 16, 64}), nf::UsageError);
}
