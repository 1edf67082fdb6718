#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dualteacher/augment.hpp"
#include "dualteacher/rng.hpp"

using namespace dualteacher;

TEST_CASE("identity parameters reproduce the input exactly") {
  Rng rng(2, "aug-id");
  Image im(6, 5, 0.0);
  for (auto& v : im.pix) v = rng.uniform();
  LabelMap lab(6, 5, 0);
  for (auto& l : lab.lab) l = static_cast<std::uint8_t>(rng.below(4));

  AffineParams p;  // angle 0, scale 1, no shift
  Image out_im;
  LabelMap out_lab;
  apply_affine(p, im, &lab, out_im, &out_lab);
  CHECK(out_im.pix == im.pix);
  CHECK(out_lab.lab == lab.lab);
}

TEST_CASE("integer shift moves content") {
  Image im(5, 5, 0.0);
  im.at(2, 3) = 1.0;
  AffineParams p;
  p.shift_y = 1.0;  // content moves down one row
  Image out;
  apply_affine(p, im, nullptr, out, nullptr);
  CHECK(out.at(3, 3) == Catch::Approx(1.0));
  CHECK(out.at(2, 3) == Catch::Approx(0.0));
}

TEST_CASE("quarter rotation relocates a delta predictably") {
  Image im(4, 4, 0.0);
  im.at(0, 1) = 1.0;
  LabelMap lab(4, 4, 0);
  lab.lab[0 * 4 + 1] = 3;

  AffineParams p;
  p.angle_rad = M_PI / 2.0;
  Image out;
  LabelMap out_lab;
  apply_affine(p, im, &lab, out, &out_lab);
  CHECK(out.at(2, 0) == Catch::Approx(1.0).margin(1e-9));
  double total = 0.0;
  for (double v : out.pix) total += v;
  CHECK(total == Catch::Approx(1.0).margin(1e-9));
  CHECK(out_lab.lab[2 * 4 + 0] == 3);
}

TEST_CASE("labels keep valid class values under augmentation") {
  Rng rng(9, "aug-classes");
  Image im(16, 16, 0.0);
  LabelMap lab(16, 16, 0);
  for (int i = 0; i < 16 * 16; ++i) {
    im.pix[i] = rng.uniform();
    lab.lab[i] = static_cast<std::uint8_t>(rng.below(5));
  }
  for (int trial = 0; trial < 20; ++trial) {
    auto [aim, alab] = random_affine(im, &lab, rng);
    REQUIRE(alab.has_value());
    for (auto l : alab->lab) CHECK(l < 5);
    for (double v : aim.pix) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("sampled parameters respect the configured ranges") {
  AugmentConfig cfg;
  Rng rng(4, "aug-range");
  for (int i = 0; i < 500; ++i) {
    AffineParams p = sample_affine(cfg, rng);
    CHECK(std::abs(p.angle_rad) <= 15.0 * M_PI / 180.0 + 1e-12);
    CHECK(p.scale >= 0.9);
    CHECK(p.scale <= 1.1);
    CHECK(std::abs(p.shift_y) <= 4.0);
    CHECK(std::abs(p.shift_x) <= 4.0);
  }
}

TEST_CASE("parameter draws are deterministic and ordered") {
  AugmentConfig cfg;
  Rng a(7, "aug-det"), b(7, "aug-det");
  for (int i = 0; i < 10; ++i) {
    AffineParams pa = sample_affine(cfg, a);
    AffineParams pb = sample_affine(cfg, b);
    CHECK(pa.angle_rad == pb.angle_rad);
    CHECK(pa.scale == pb.scale);
    CHECK(pa.shift_y == pb.shift_y);
    CHECK(pa.shift_x == pb.shift_x);
  }
}

TEST_CASE("random_affine without a label returns none") {
  Rng rng(6, "aug-nolabel");
  Image im(8, 8, 0.25);
  auto [out, lab] = random_affine(im, nullptr, rng);
  CHECK_FALSE(lab.has_value());
  CHECK(out.h == 8);
}

TEST_CASE("config validation") {
  AugmentConfig bad;
  bad.scale_lo = 1.2;
  bad.scale_hi = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  AugmentConfig neg;
  neg.max_rotation_deg = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
  AugmentConfig zero_scale;
  zero_scale.scale_lo = 0.0;
  CHECK_THROWS_AS(zero_scale.validate(), ConfigError);
}

TEST_CASE("label shape mismatch is rejected") {
  Image im(4, 4, 0.0);
  LabelMap lab(3, 4, 0);
  AffineParams p;
  Image out;
  LabelMap out_lab;
  CHECK_THROWS_AS(apply_affine(p, im, &lab, out, &out_lab), DimensionError);
}
