#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "sof/planar.hpp"

using namespace sof;

namespace {

Homography random_homography(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> small(-0.08, 0.08);
  std::uniform_real_distribution<double> shift(-4.0, 4.0);
  std::uniform_real_distribution<double> proj(-5e-4, 5e-4);
  Homography h;
  h.h = {1.0 + small(rng), small(rng),       shift(rng),
         small(rng),       1.0 + small(rng), shift(rng),
         proj(rng),        proj(rng),        1.0};
  return h;
}

double rel_frobenius(const Homography& a, const Homography& b) {
  // compare up to scale: normalize both to unit Frobenius norm with a
  // canonical sign
  std::array<double, 9> na = a.h, nb = b.h;
  auto normalize = [](std::array<double, 9>& m) {
    double norm = 0;
    for (double v : m) norm += v * v;
    norm = std::sqrt(norm);
    double sign = m[8] >= 0 ? 1.0 : -1.0;
    for (double& v : m) v = v * sign / norm;
  };
  normalize(na);
  normalize(nb);
  double diff = 0;
  for (int i = 0; i < 9; ++i) diff += (na[i] - nb[i]) * (na[i] - nb[i]);
  return std::sqrt(diff);
}

}  // namespace

TEST_CASE("homography flow synthesis") {
  SECTION("identity gives zero flow") {
    Mask all(8, 6, 1);
    const FlowField f = homography_flow(Homography::identity(), all, 8, 6);
    for (size_t i = 0; i < f.u.size(); ++i) {
      CHECK(f.u[i] == 0.f);
      CHECK(f.v[i] == 0.f);
      CHECK(f.valid[i] == 1);
    }
  }
  SECTION("pure translation gives uniform flow") {
    Mask all(8, 6, 1);
    const FlowField f =
        homography_flow(Homography::translation(2.5, -1.25), all, 8, 6);
    for (size_t i = 0; i < f.u.size(); ++i) {
      CHECK(f.u[i] == 2.5f);
      CHECK(f.v[i] == -1.25f);
    }
  }
  SECTION("unmasked pixels are invalid") {
    Mask m(4, 4, 0);
    m.at(1, 1) = 1;
    const FlowField f = homography_flow(Homography::identity(), m, 4, 4);
    CHECK(f.valid_at(1, 1) == 1);
    CHECK(f.valid_at(0, 0) == 0);
  }
}

TEST_CASE("ransac homography estimation") {
  RansacConfig cfg;

  SECTION("zero flow recovers the identity with every pixel an inlier") {
    Mask all(20, 16, 1);
    const FlowField zero(20, 16);
    const auto fit = fit_homography_ransac(zero, all, cfg, 1);
    REQUIRE(fit.has_value());
    CHECK(rel_frobenius(fit->h, Homography::identity()) < 1e-9);
    CHECK(fit->inlier_count == 20u * 16u);
  }

  SECTION("translation flow recovers the translation to < 1e-6 px") {
    Mask all(24, 18, 1);
    FlowField f(24, 18);
    std::fill(f.u.begin(), f.u.end(), 3.5f);
    std::fill(f.v.begin(), f.v.end(), -2.25f);
    const auto fit = fit_homography_ransac(f, all, cfg, 2);
    REQUIRE(fit.has_value());
    double max_res = 0;
    for (int y = 0; y < 18; ++y)
      for (int x = 0; x < 24; ++x) {
        const auto m = fit->h.apply(x, y);
        REQUIRE(m.has_value());
        max_res = std::max(max_res, std::hypot(m->first - (x + 3.5),
                                               m->second - (y - 2.25)));
      }
    CHECK(max_res < 1e-6);
  }

  SECTION("noiseless round trip recovers the generator up to scale") {
    std::mt19937_64 rng(77);
    Mask all(32, 24, 1);
    for (int trial = 0; trial < 10; ++trial) {
      const Homography h = random_homography(rng);
      const FlowField f = homography_flow(h, all, 32, 24);
      const auto fit = fit_homography_ransac(f, all, cfg, 100 + trial);
      REQUIRE(fit.has_value());
      CHECK(rel_frobenius(fit->h, h) < 1e-6);
    }
  }

  SECTION("20% gross outliers leave the clean pixels accurate") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> junk(-30.0, 30.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    Mask all(32, 24, 1);
    const Homography h = random_homography(rng);
    FlowField f = homography_flow(h, all, 32, 24);
    Mask clean(32, 24, 1);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 32; ++x)
        if (coin(rng) < 0.2) {
          f.u_at(x, y) = static_cast<float>(junk(rng));
          f.v_at(x, y) = static_cast<float>(junk(rng));
          clean.at(x, y) = 0;
        }
    const auto fit = fit_homography_ransac(f, all, cfg, 42);
    REQUIRE(fit.has_value());
    double max_res = 0;
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 32; ++x) {
        if (!clean.at(x, y)) continue;
        const auto m0 = h.apply(x, y);
        const auto m1 = fit->h.apply(x, y);
        REQUIRE(m1.has_value());
        max_res = std::max(max_res, std::hypot(m1->first - m0->first,
                                               m1->second - m0->second));
      }
    CHECK(max_res < 0.1);
  }

  SECTION("deterministic under a fixed seed") {
    std::mt19937_64 rng(5);
    Mask all(16, 16, 1);
    const Homography h = random_homography(rng);
    FlowField f = homography_flow(h, all, 16, 16);
    const auto a = fit_homography_ransac(f, all, cfg, 9);
    const auto b = fit_homography_ransac(f, all, cfg, 9);
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    for (int i = 0; i < 9; ++i) CHECK(a->h.h[i] == b->h.h[i]);
  }

  SECTION("inlier residuals never exceed the threshold") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<float> noise(-6.f, 6.f);
    Mask all(20, 20, 1);
    const Homography h = random_homography(rng);
    FlowField f = homography_flow(h, all, 20, 20);
    for (size_t i = 0; i < f.u.size(); i += 3) {
      f.u[i] += noise(rng);
      f.v[i] += noise(rng);
    }
    const auto fit = fit_homography_ransac(f, all, cfg, 10);
    REQUIRE(fit.has_value());
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x) {
        if (!fit->inliers.at(x, y)) continue;
        const auto m = fit->h.apply(x, y);
        REQUIRE(m.has_value());
        CHECK(std::hypot(m->first - (x + f.u_at(x, y)),
                         m->second - (y + f.v_at(x, y))) <=
              cfg.inlier_threshold + 1e-9);
      }
  }

  SECTION("degenerate regions are rejected") {
    const FlowField f(10, 10);
    Mask three(10, 10, 0);
    three.at(0, 0) = three.at(3, 3) = three.at(7, 2) = 1;
    CHECK_FALSE(fit_homography_ransac(f, three, RansacConfig{}, 1).has_value());

    Mask line(10, 10, 0);
    for (int x = 0; x < 10; ++x) line.at(x, 4) = 1;
    CHECK_FALSE(fit_homography_ransac(f, line, RansacConfig{}, 1).has_value());
  }

  SECTION("points mapping to the plane at infinity are invalid") {
    Homography h = Homography::identity();
    h.h[6] = -0.5;  // w = 1 - x/2, zero at x = 2
    Mask all(5, 1, 1);
    const FlowField f = homography_flow(h, all, 5, 1);
    CHECK(f.valid_at(2, 0) == 0);
    CHECK(f.valid_at(0, 0) == 1);
  }
}
