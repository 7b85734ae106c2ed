#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "sof/metrics.hpp"

using namespace sof;

TEST_CASE("endpoint error") {
  FlowField gt(10, 8);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> uni(-5.f, 5.f);
  for (size_t i = 0; i < gt.u.size(); ++i) {
    gt.u[i] = uni(rng);
    gt.v[i] = uni(rng);
  }

  SECTION("identical fields give zero") {
    CHECK(endpoint_error(gt, gt) == 0.0);
  }

  SECTION("a constant (3,4) offset gives exactly 5") {
    FlowField est = gt;
    for (size_t i = 0; i < est.u.size(); ++i) {
      est.u[i] += 3.f;
      est.v[i] += 4.f;
    }
    CHECK_THAT(endpoint_error(est, gt), Catch::Matchers::WithinRel(5.0, 1e-7));
  }

  SECTION("random fields match an independent per-pixel loop") {
    FlowField est = gt;
    for (size_t i = 0; i < est.u.size(); ++i) {
      est.u[i] += uni(rng);
      est.v[i] += uni(rng);
    }
    gt.valid_at(3, 3) = 0;
    double sum = 0;
    size_t n = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 10; ++x) {
        if (!gt.valid_at(x, y)) continue;
        const double du = est.u_at(x, y) - gt.u_at(x, y);
        const double dv = est.v_at(x, y) - gt.v_at(x, y);
        sum += std::sqrt(du * du + dv * dv);
        ++n;
      }
    // hypot vs sqrt(du^2+dv^2): identical up to last-digit rounding
    CHECK_THAT(endpoint_error(est, gt),
               Catch::Matchers::WithinRel(sum / n, 1e-7));
  }

  SECTION("no valid pixels is an error") {
    FlowField empty(4, 4);
    std::fill(empty.valid.begin(), empty.valid.end(), 0);
    CHECK_THROWS(endpoint_error(empty, empty));
  }

  SECTION("dimension mismatch is an error") {
    CHECK_THROWS(endpoint_error(FlowField(3, 3), gt));
  }
}

TEST_CASE("kitti outlier rule") {
  // error 4 px with |gt| = 100: 4 > 3 but 4 < 5 -> not an outlier
  CHECK_FALSE(kitti_outlier(4.0, 100.0));
  // error 4 px with |gt| = 10: 4 > 3 and 4 > 0.5 -> outlier
  CHECK(kitti_outlier(4.0, 10.0));
  CHECK_FALSE(kitti_outlier(2.9, 0.0));
  CHECK(kitti_outlier(3.01, 0.0));
}

TEST_CASE("fl outlier breakdown") {
  FlowField gt(8, 6);
  std::fill(gt.u.begin(), gt.u.end(), 10.f);
  FlowField est = gt;

  SECTION("identical fields have zero rates everywhere") {
    Mask fg(8, 6, 0);
    fg.at(2, 2) = 1;
    Mask nocc(8, 6, 1);
    const FlowMetrics m = fl_outlier_rate(est, gt, &fg, &nocc);
    REQUIRE(m.all);
    REQUIRE(m.fg);
    REQUIRE(m.bg);
    REQUIRE(m.nocc);
    CHECK(m.all->fl == 0.0);
    CHECK(m.fg->fl == 0.0);
    CHECK(m.bg->fl == 0.0);
    CHECK(m.nocc->fl == 0.0);
    CHECK(m.all->pixels == 48);
    CHECK(m.fg->pixels == 1);
  }

  SECTION("empty masks yield absent entries") {
    Mask fg(8, 6, 0);  // empty fg -> fg entry absent, bg covers everything
    const FlowMetrics m = fl_outlier_rate(est, gt, &fg, nullptr);
    CHECK_FALSE(m.fg.has_value());
    REQUIRE(m.bg);
    CHECK(m.bg->pixels == 48);
    CHECK_FALSE(m.nocc.has_value());
  }

  SECTION("adding error to one pixel never decreases any rate") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> uni(-8.f, 8.f);
    FlowField noisy = gt;
    for (size_t i = 0; i < noisy.u.size(); ++i) noisy.u[i] += uni(rng);
    Mask fg(8, 6, 0);
    for (int x = 0; x < 4; ++x) fg.at(x, 0) = 1;
    for (int trial = 0; trial < 20; ++trial) {
      const FlowMetrics before = fl_outlier_rate(noisy, gt, &fg, nullptr);
      const int px = trial % 8, py = (trial / 2) % 6;
      // strictly larger error magnitude at one pixel
      const float du = noisy.u_at(px, py) - gt.u_at(px, py);
      noisy.u_at(px, py) = gt.u_at(px, py) + std::fabs(du) + 10.f;
      const FlowMetrics after = fl_outlier_rate(noisy, gt, &fg, nullptr);
      CHECK(after.all->fl >= before.all->fl);
      CHECK(after.fg->fl >= before.fg->fl);
      CHECK(after.bg->fl >= before.bg->fl);
    }
  }

  SECTION("rates are permutation invariant") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> uni(-8.f, 8.f);
    FlowField a = gt;
    for (size_t i = 0; i < a.u.size(); ++i) a.u[i] += uni(rng);
    const FlowMetrics m1 = fl_outlier_rate(a, gt);
    // mirror both fields: same multiset of (est, gt) pairs
    FlowField am(8, 6), gtm(8, 6);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) {
        am.u_at(x, y) = a.u_at(7 - x, 5 - y);
        am.v_at(x, y) = a.v_at(7 - x, 5 - y);
        gtm.u_at(x, y) = gt.u_at(7 - x, 5 - y);
        gtm.v_at(x, y) = gt.v_at(7 - x, 5 - y);
      }
    const FlowMetrics m2 = fl_outlier_rate(am, gtm);
    CHECK(m1.all->fl == m2.all->fl);
    CHECK(m1.all->epe == m2.all->epe);
  }
}

TEST_CASE("segmentation iou") {
  Mask a(10, 10, 0), b(10, 10, 0);
  SECTION("both empty") { CHECK(segmentation_iou(a, b) == 1.0); }
  SECTION("identical nonempty") {
    for (int i = 0; i < 5; ++i) a.at(i, i) = 1;
    CHECK(segmentation_iou(a, a) == 1.0);
  }
  SECTION("disjoint nonempty") {
    a.at(0, 0) = 1;
    b.at(9, 9) = 1;
    CHECK(segmentation_iou(a, b) == 0.0);
  }
  SECTION("half-overlapping squares, counted by hand") {
    // a: x in [0,3], b: x in [2,5], both y in [0,3]: inter 2*4, union 6*4
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) a.at(x, y) = 1;
    for (int y = 0; y < 4; ++y)
      for (int x = 2; x < 6; ++x) b.at(x, y) = 1;
    size_t inter = 0, uni = 0;
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) {
        inter += a.at(x, y) && b.at(x, y);
        uni += a.at(x, y) || b.at(x, y);
      }
    CHECK_THAT(segmentation_iou(a, b),
               Catch::Matchers::WithinRel(double(inter) / uni, 1e-12));
    CHECK(segmentation_iou(a, b) == segmentation_iou(b, a));
  }
  SECTION("dimension mismatch is an error") {
    CHECK_THROWS(segmentation_iou(a, Mask(3, 3, 0)));
  }
}
