#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "sof/synth.hpp"

using namespace sof;

namespace {

SceneSpec demo_spec() {
  SceneSpec spec;
  spec.width = 64;
  spec.height = 48;
  spec.fg.cx = 26;
  spec.fg.cy = 22;
  spec.fg.half_w = 8;
  spec.fg.half_h = 8;
  spec.fg.motion = {{1, 0, 2, 0, 1, 1}};
  Homography bg;
  bg.h = {1.0, 0.0, -0.7, 0.0, 1.0, 0.3, 0.0, 0.0, 1.0};
  spec.bg_motion = {bg};
  spec.texture_seed = 5;
  return spec;
}

}  // namespace

TEST_CASE("synthetic scenes") {
  SECTION("identity background and static foreground: zero flow, equal frames") {
    SceneSpec spec = demo_spec();
    spec.bg_motion = {Homography::identity()};
    spec.fg.motion = {{1, 0, 0, 0, 1, 0}};
    const SceneData d = render(spec, 3);
    for (const auto& f : d.gt_flow)
      for (size_t i = 0; i < f.u.size(); ++i) {
        CHECK(f.u[i] == 0.f);
        CHECK(f.v[i] == 0.f);
      }
    for (size_t i = 0; i < d.images[0].data.size(); ++i) {
      CHECK(d.images[0].data[i] == d.images[1].data[i]);
      CHECK(d.images[1].data[i] == d.images[2].data[i]);
    }
  }

  SECTION("pure translation: (2,0) on fg, 0 elsewhere") {
    SceneSpec spec = demo_spec();
    spec.bg_motion = {Homography::identity()};
    spec.fg.motion = {{1, 0, 2, 0, 1, 0}};
    const SceneData d = render(spec, 2);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        if (d.gt_fg[0].at(x, y)) {
          CHECK(d.gt_flow[0].u_at(x, y) == 2.f);
          CHECK(d.gt_flow[0].v_at(x, y) == 0.f);
        } else {
          CHECK(d.gt_flow[0].u_at(x, y) == 0.f);
        }
      }
  }

  SECTION("determinism: identical spec renders identical bytes") {
    const SceneSpec spec = demo_spec();
    const SceneData a = render(spec, 4);
    const SceneData b = render(spec, 4);
    for (int t = 0; t < 4; ++t)
      CHECK(a.images[t].data == b.images[t].data);
    for (int t = 0; t < 3; ++t) {
      CHECK(a.gt_flow[t].u == b.gt_flow[t].u);
      CHECK(a.init_flow[t].u == b.init_flow[t].u);
    }
  }

  SECTION("photometric self-consistency on non-occluded pixels") {
    const SceneSpec spec = demo_spec();
    const SceneData d = render(spec, 4);
    for (int t = 0; t < 3; ++t) {
      const WarpResult w = warp(d.images[t + 1], d.gt_flow[t]);
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          if (!d.nonoccluded[t].at(x, y)) continue;
          REQUIRE(w.valid.at(x, y) == 1);
          CHECK_THAT(w.image.at(x, y),
                     Catch::Matchers::WithinAbs(d.images[t].at(x, y), 1e-6));
        }
    }
  }

  SECTION("corrupted masks contain the truth; noisy flow differs from gt") {
    SceneSpec spec = demo_spec();
    spec.seg_dilation = 3.0;
    spec.flow_noise = 0.5;
    const SceneData d = render(spec, 3);
    for (int t = 0; t < 3; ++t)
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x)
          if (d.gt_fg[t].at(x, y))
            CHECK(d.seg[t].at(x, y) == spec.fg_label);
    size_t diffs = 0;
    for (size_t i = 0; i < d.init_flow[0].u.size(); ++i)
      diffs += d.init_flow[0].u[i] != d.gt_flow[0].u[i];
    CHECK(diffs > d.init_flow[0].u.size() / 2);
  }

  SECTION("a foreground leaving the frame is an error") {
    SceneSpec spec = demo_spec();
    spec.fg.motion = {{1, 0, 30, 0, 1, 0}};  // flies off after one step
    CHECK_THROWS(render(spec, 4));
  }

  SECTION("occlusion flags mark background covered by the moving foreground") {
    SceneSpec spec = demo_spec();
    spec.bg_motion = {Homography::identity()};
    spec.fg.motion = {{1, 0, 4, 0, 1, 0}};
    const SceneData d = render(spec, 2);
    size_t occluded = 0;
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        if (d.gt_fg[0].at(x, y)) continue;
        if (d.gt_fg[1].at(x, y) && !d.nonoccluded[0].at(x, y)) ++occluded;
      }
    CHECK(occluded > 0);  // the strip the square moves onto
  }
}

TEST_CASE("synthetic dataset round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "sof_synth_ds";
  fs::remove_all(dir);

  const SceneSpec spec = demo_spec();
  write_synth_dataset(spec, 3, dir.string());
  CHECK(fs::exists(dir / "manifest.txt"));
  const SequenceManifest m = load_manifest((dir / "manifest.txt").string());
  CHECK(m.frames.size() == 3);
  CHECK(m.window == 3);

  // the written images reproduce the rendered intensities to 16-bit depth
  const SceneData d = render(spec, 3);
  const ImageBuf img = read_image(m.frames[0].image);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK_THAT(img.data[i],
               Catch::Matchers::WithinAbs(d.images[0].data[i], 1.f / 65535));
  const FlowField init = read_flo(m.frames[0].flow);
  CHECK(init.u == d.init_flow[0].u);

  fs::remove_all(dir);
}

TEST_CASE("scene spec files parse") {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "sof_scene.txt";
  {
    std::ofstream out(p);
    out << "size 96 80\n";
    out << "frames 4\n";
    out << "bg_homography 1 0 -0.5 0 1 0.25 0 0 1\n";
    out << "fg_shape ellipse\n";
    out << "fg_center 40 30\n";
    out << "fg_size 24 18\n";
    out << "fg_motion 1 0 1.5 0 1 0\n";
    out << "texture_seed 9\n";
    out << "flow_noise 0.5\n";
    out << "seg_dilation 3\n";
    out << "fg_label person\n";
    out << "bg_label grass\n";
  }
  const auto [spec, T] = parse_scene_spec(p.string());
  CHECK(T == 4);
  CHECK(spec.width == 96);
  CHECK(spec.fg.shape == MoverSpec::Shape::Ellipse);
  CHECK(spec.fg.half_w == 12.0);
  CHECK(spec.fg_label == label::Person);
  CHECK(spec.bg_label == label::Grass);
  CHECK(spec.bg_motion.size() == 1);
  CHECK(spec.bg_motion[0].h[2] == -0.5);
  fs::remove_all(p);
}
