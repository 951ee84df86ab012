#include "flowsplat/math.hpp"

#include <gtest/gtest.h>

#include <cstring>

#include "testutil.hpp"

using namespace flowsplat;

TEST(Vec3, Algebra) {
  Vec3 a{1, 2, 3}, b{4, 5, 6};
  EXPECT_DOUBLE_EQ(dot(a, b), 32.0);
  Vec3 c = cross(a, b);
  EXPECT_NEAR(dot(c, a), 0.0, 1e-15);
  EXPECT_NEAR(dot(c, b), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(norm(Vec3{3, 4, 0}), 5.0);
  Vec3 s = a + b * 2.0 - a / 2.0;
  EXPECT_DOUBLE_EQ(s.x, 8.5);
  EXPECT_DOUBLE_EQ(s.y, 11.0);
  EXPECT_DOUBLE_EQ(s.z, 13.5);
}

TEST(Mat3, MultiplyTransposeDet) {
  Mat3 a = Mat3::from_rows({1, 2, 3}, {4, 5, 6}, {7, 8, 10});
  Mat3 i = Mat3::identity();
  Mat3 ai = a * i;
  for (int k = 0; k < 9; ++k) EXPECT_DOUBLE_EQ(ai.m[k], a.m[k]);
  EXPECT_DOUBLE_EQ(a.det(), -3.0);
  Mat3 at = a.transposed();
  EXPECT_DOUBLE_EQ(at(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(at(2, 0), 3.0);
  Vec3 v = a * Vec3{1, 0, 0};
  EXPECT_DOUBLE_EQ(v.y, 4.0);
  EXPECT_DOUBLE_EQ(a.trace(), 16.0);
}

TEST(Quaternion, AxisAngleRotation) {
  Quaternion q = Quaternion::from_axis_angle({0, 0, 1}, kPi / 2);
  Vec3 r = q.rotate({1, 0, 0});
  EXPECT_NEAR(r.x, 0.0, 1e-15);
  EXPECT_NEAR(r.y, 1.0, 1e-15);
  EXPECT_NEAR(r.z, 0.0, 1e-15);
}

TEST(Quaternion, RotateMatchesMatrix) {
  testutil::Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    Quaternion q = testutil::random_unit_quat(rng);
    Vec3 v = testutil::random_vec3(rng, -2, 2);
    Vec3 a = q.rotate(v);
    Vec3 b = q.to_matrix() * v;
    EXPECT_NEAR(norm(a - b), 0.0, 1e-13);
  }
}

TEST(Quaternion, HamiltonComposition) {
  Quaternion qa = Quaternion::from_axis_angle({0, 0, 1}, kPi / 2);
  Quaternion q2 = qa * qa;  // 180 degrees
  Vec3 r = q2.rotate({1, 0, 0});
  EXPECT_NEAR(r.x, -1.0, 1e-15);
  EXPECT_NEAR(r.y, 0.0, 1e-15);
}

TEST(Quaternion, ExpPureMatchesAxisAngle) {
  Vec3 axis = normalized(Vec3{1, 2, -1});
  double angle = 0.73;
  Quaternion a = Quaternion::exp_pure(axis * (angle / 2));
  Quaternion b = Quaternion::from_axis_angle(axis, angle);
  EXPECT_NEAR(a.w, b.w, 1e-15);
  EXPECT_NEAR(a.x, b.x, 1e-15);
  EXPECT_NEAR(a.y, b.y, 1e-15);
  EXPECT_NEAR(a.z, b.z, 1e-15);
  Quaternion id = Quaternion::exp_pure({0, 0, 0});
  EXPECT_DOUBLE_EQ(id.w, 1.0);
  EXPECT_DOUBLE_EQ(id.x, 0.0);
}

TEST(QuatStep, ZeroOmegaIsIdentityOperation) {
  testutil::Rng rng(3);
  Quaternion q = testutil::random_unit_quat(rng);
  Quaternion r = quat_from_angular_velocity_step(q, {0, 0, 0}, 0.25);
  EXPECT_DOUBLE_EQ(r.w, q.w);
  EXPECT_DOUBLE_EQ(r.x, q.x);
  EXPECT_DOUBLE_EQ(r.y, q.y);
  EXPECT_DOUBLE_EQ(r.z, q.z);
}

TEST(QuatStep, HalfTurnAboutZ) {
  // omega = (0,0,pi) integrated over t = 1 in 10000 steps: quarter-angle
  // quaternion (cos(pi/2) is 0, sin(pi/2) is 1 on the z slot).
  Quaternion q = Quaternion::identity();
  int n = 10000;
  double dt = 1.0 / n;
  for (int i = 0; i < n; ++i)
    q = quat_from_angular_velocity_step(q, {0, 0, kPi}, dt);
  EXPECT_NEAR(q.w, 0.0, 1e-9);
  EXPECT_NEAR(q.z, 1.0, 1e-9);
  EXPECT_NEAR(q.norm(), 1.0, 1e-12);
}

TEST(QuatStep, FullTurnReturnsToIdentityUpToSign) {
  Quaternion q = Quaternion::identity();
  int n = 1000;
  for (int i = 0; i < n; ++i)
    q = quat_from_angular_velocity_step(q, {0, 0, 2 * kPi}, 1.0 / n);
  EXPECT_NEAR(std::abs(q.w), 1.0, 1e-3);
}

TEST(QuatFromMatrix, RoundTripsRandomRotations) {
  testutil::Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    Quaternion q = testutil::random_unit_quat(rng);
    if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};  // match the w >= 0 pick
    Quaternion p = quat_from_matrix(q.to_matrix());
    EXPECT_NEAR(p.w, q.w, 1e-12);
    EXPECT_NEAR(p.x, q.x, 1e-12);
    EXPECT_NEAR(p.y, q.y, 1e-12);
    EXPECT_NEAR(p.z, q.z, 1e-12);
  }
}

TEST(QuatFromMatrix, HandlesIdentityAndHalfTurns) {
  Quaternion id = quat_from_matrix(Mat3::identity());
  EXPECT_DOUBLE_EQ(id.w, 1.0);
  EXPECT_DOUBLE_EQ(id.x, 0.0);

  // half turns have w = 0 and exercise every largest-diagonal branch
  for (Vec3 axis : {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}}) {
    Quaternion q = Quaternion::from_axis_angle(axis, kPi);
    Quaternion p = quat_from_matrix(q.to_matrix());
    double align = std::abs(p.w * q.w + p.x * q.x + p.y * q.y + p.z * q.z);
    EXPECT_NEAR(align, 1.0, 1e-12);
  }
}

TEST(Covariance, IdentityRotationGivesDiagonal) {
  Mat3 c = covariance_from(Quaternion::identity(), {1, 2, 3});
  EXPECT_NEAR(c(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(c(1, 1), 4.0, 1e-12);
  EXPECT_NEAR(c(2, 2), 9.0, 1e-12);
  EXPECT_NEAR(c(0, 1), 0.0, 1e-12);
}

TEST(Covariance, AxisSwapUnderQuarterTurn) {
  Quaternion q = Quaternion::from_axis_angle({0, 0, 1}, kPi / 2);
  Mat3 c = covariance_from(q, {1, 2, 1});
  EXPECT_NEAR(c(0, 0), 4.0, 1e-9);
  EXPECT_NEAR(c(1, 1), 1.0, 1e-9);
  EXPECT_NEAR(c(2, 2), 1.0, 1e-9);
}

TEST(Covariance, EigenvaluesAreSquaredScales) {
  testutil::Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    Quaternion q = testutil::random_unit_quat(rng);
    Mat3 c = covariance_from(q, {0.5, 0.7, 0.9});
    auto eig = testutil::sym3_eigenvalues(c);
    EXPECT_NEAR(eig[0], 0.25, 1e-9);
    EXPECT_NEAR(eig[1], 0.49, 1e-9);
    EXPECT_NEAR(eig[2], 0.81, 1e-9);
  }
}

TEST(Covariance, BitwiseSymmetric) {
  testutil::Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    Quaternion q = testutil::random_unit_quat(rng);
    Vec3 s = {rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
    Mat3 c = covariance_from(q, s);
    for (int r = 0; r < 3; ++r)
      for (int k = r + 1; k < 3; ++k) {
        EXPECT_EQ(std::memcmp(&c(r, k), &c(k, r), sizeof(double)), 0);
      }
  }
}

TEST(Covariance, DeterminantIsSquaredScaleProduct) {
  testutil::Rng rng(17);
  for (int i = 0; i < 20; ++i) {
    Quaternion q = testutil::random_unit_quat(rng);
    Vec3 s = {rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2)};
    Mat3 c = covariance_from(q, s);
    double want = s.x * s.x * s.y * s.y * s.z * s.z;
    EXPECT_LT(testutil::rel_err(c.det(), want), 1e-9);
  }
}

TEST(Covariance, RejectsNonUnitQuaternion) {
  Quaternion bad{2, 0, 0, 0};
  EXPECT_THROW(covariance_from(bad, {1, 1, 1}), ContractViolation);
}

TEST(PositionalEncoding, HandValues) {
  auto a = positional_encoding({0.0}, 2);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_DOUBLE_EQ(a[0], 0.0);
  EXPECT_DOUBLE_EQ(a[1], 1.0);
  EXPECT_DOUBLE_EQ(a[2], 0.0);
  EXPECT_DOUBLE_EQ(a[3], 1.0);

  auto b = positional_encoding({0.5}, 1);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_NEAR(b[0], 1.0, 1e-12);
  EXPECT_NEAR(b[1], 0.0, 1e-12);

  auto c = positional_encoding({0.25, 0.0}, 1);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_NEAR(c[0], std::sin(kPi / 4), 1e-15);
  EXPECT_NEAR(c[1], std::cos(kPi / 4), 1e-15);
  EXPECT_NEAR(c[2], 0.0, 1e-15);
  EXPECT_NEAR(c[3], 1.0, 1e-15);
}

TEST(PositionalEncoding, OutputsBoundedAndDeterministic) {
  testutil::Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> v{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    auto e1 = positional_encoding(v, 6);
    auto e2 = positional_encoding(v, 6);
    EXPECT_EQ(e1, e2);
    for (double x : e1) {
      EXPECT_GE(x, -1.0);
      EXPECT_LE(x, 1.0);
    }
    EXPECT_EQ(e1.size(), 2u * 6u * v.size());
  }
}

TEST(Features, LayoutAndSizes) {
  auto s = space_features({0.1, 0.2, 0.3}, 6);
  EXPECT_EQ(s.size(), 3u + 36u);
  EXPECT_DOUBLE_EQ(s[0], 0.1);
  EXPECT_DOUBLE_EQ(s[2], 0.3);
  EXPECT_DOUBLE_EQ(s[3], std::sin(kPi * 0.1));

  auto t = time_features(0.4, 6);
  EXPECT_EQ(t.size(), 1u + 12u);
  EXPECT_DOUBLE_EQ(t[0], 0.4);
  EXPECT_DOUBLE_EQ(t[1], std::sin(kPi * 0.4));
  EXPECT_DOUBLE_EQ(t[2], std::cos(kPi * 0.4));
}

TEST(Expm, DiagonalAndZero) {
  Mat3 z = expm(Mat3::zero());
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(z(i, i), 1.0, 1e-15);
  Mat3 d = expm(Mat3::diag({1, 2, 3}) * 0.5);
  EXPECT_LT(testutil::rel_err(d(0, 0), std::exp(0.5)), 1e-13);
  EXPECT_LT(testutil::rel_err(d(1, 1), std::exp(1.0)), 1e-13);
  EXPECT_LT(testutil::rel_err(d(2, 2), std::exp(1.5)), 1e-13);
}

TEST(Expm, RotationGenerator) {
  double theta = 2.1;
  Mat3 k = Mat3::from_rows({0, -1, 0}, {1, 0, 0}, {0, 0, 0});
  Mat3 r = expm(k * theta);
  EXPECT_NEAR(r(0, 0), std::cos(theta), 1e-12);
  EXPECT_NEAR(r(0, 1), -std::sin(theta), 1e-12);
  EXPECT_NEAR(r(1, 0), std::sin(theta), 1e-12);
  EXPECT_NEAR(r(2, 2), 1.0, 1e-12);
}

TEST(Expm, NilpotentShearIsExact) {
  Mat3 n = Mat3::zero();
  n(0, 1) = 0.7;
  Mat3 e = expm(n);
  EXPECT_NEAR(e(0, 1), 0.7, 1e-14);
  EXPECT_NEAR(e(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(e(1, 0), 0.0, 1e-14);
}

TEST(AffineFlow, PureTranslation) {
  AffineFlow f = affine_flow(Mat3::zero(), {1, 2, 3}, 0.5);
  EXPECT_NEAR(f.offset.x, 0.5, 1e-14);
  EXPECT_NEAR(f.offset.y, 1.0, 1e-14);
  EXPECT_NEAR(f.offset.z, 1.5, 1e-14);
  EXPECT_NEAR(f.phi(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(f.phi(0, 1), 0.0, 1e-14);
}

TEST(AffineFlow, MatchesRk4Reference) {
  // Independent check: integrate xdot = A x + b with fine RK4.
  testutil::Rng rng(23);
  Mat3 a;
  for (int i = 0; i < 9; ++i) a.m[i] = rng.uniform(-1, 1);
  Vec3 b = testutil::random_vec3(rng);
  Vec3 x0 = testutil::random_vec3(rng);
  double t = 0.8;

  AffineFlow f = affine_flow(a, b, t);
  Vec3 closed = f.phi * x0 + f.offset;

  Vec3 x = x0;
  int n = 2000;
  double h = t / n;
  auto vel = [&](const Vec3& p) { return a * p + b; };
  for (int i = 0; i < n; ++i) {
    Vec3 k1 = vel(x);
    Vec3 k2 = vel(x + k1 * (h / 2));
    Vec3 k3 = vel(x + k2 * (h / 2));
    Vec3 k4 = vel(x + k3 * h);
    x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
  }
  EXPECT_NEAR(norm(closed - x), 0.0, 1e-9);
}

TEST(Aabb, ExpandInflateSample) {
  Aabb box;
  box.expand({0, 0, 0});
  box.expand({2, 4, 6});
  EXPECT_TRUE(box.valid());
  EXPECT_NEAR(box.center().y, 2.0, 1e-15);

  Aabb big = box.inflated(0.1);
  EXPECT_NEAR(big.lo.x, -0.1, 1e-15);
  EXPECT_NEAR(big.hi.z, 6.3, 1e-15);
  EXPECT_NEAR(big.center().x, box.center().x, 1e-15);

  testutil::Rng rng(31);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(box.contains(box.sample(rng)));

  Aabb point;
  point.expand({1, 1, 1});
  Vec3 s = point.sample(rng);
  EXPECT_DOUBLE_EQ(s.x, 1.0);
  EXPECT_DOUBLE_EQ(s.y, 1.0);
  EXPECT_DOUBLE_EQ(s.z, 1.0);
}

TEST(RngStream, DeterministicAndUniform) {
  testutil::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());

  testutil::Rng r(7);
  double mean = 0.0;
  int n = 10000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    mean += u;
  }
  mean /= n;
  EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(RngStream, ForkDecorrelates) {
  testutil::Rng base(42);
  testutil::Rng c0 = base.fork(0);
  testutil::Rng c1 = base.fork(1);
  EXPECT_NE(c0.next_u64(), c1.next_u64());
}
