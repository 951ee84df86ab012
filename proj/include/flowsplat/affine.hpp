#pragma once

#include <array>

#include "flowsplat/math.hpp"

namespace flowsplat {

/// 12 basis weights, fixed column order:
///   [0..2]  translation b
///   [3..5]  rotation (equals angular velocity omega)
///   [6..8]  per-axis stretch rates
///   [9..11] shear couplings (xy, yz, xz)
using AffineWeights = std::array<double, 12>;

/// v(x) = A x + b with A assembled from w[3..11], b = w[0..2].
struct AffineField {
  Mat3 a;
  Vec3 b;
};

/// Column j of the 3x12 basis matrix Phi(x).
inline Vec3 basis_column(const Vec3& p, int j) {
  switch (j) {
    case 0:  return {1, 0, 0};
    case 1:  return {0, 1, 0};
    case 2:  return {0, 0, 1};
    case 3:  return {0, -p.z, p.y};   // omega_x x p
    case 4:  return {p.z, 0, -p.x};   // omega_y x p
    case 5:  return {-p.y, p.x, 0};   // omega_z x p
    case 6:  return {p.x, 0, 0};
    case 7:  return {0, p.y, 0};
    case 8:  return {0, 0, p.z};
    case 9:  return {p.y, p.x, 0};
    case 10: return {0, p.z, p.y};
    case 11: return {p.z, 0, p.x};
    default: throw ContractViolation("basis_column: index out of range");
  }
}

/// Phi(x) as a dense row-major 3x12 matrix.
inline std::array<double, 36> basis_eval(const Vec3& p) {
  std::array<double, 36> out{};
  for (int j = 0; j < 12; ++j) {
    Vec3 c = basis_column(p, j);
    out[j] = c.x;
    out[12 + j] = c.y;
    out[24 + j] = c.z;
  }
  return out;
}

/// v = Phi(x) w, summed column by column.
inline Vec3 velocity(const Vec3& p, const AffineWeights& w) {
  Vec3 v{};
  for (int j = 0; j < 12; ++j) v += basis_column(p, j) * w[j];
  return v;
}

inline AffineField assemble(const AffineWeights& w) {
  AffineField f;
  f.b = {w[0], w[1], w[2]};
  f.a = Mat3::from_rows({w[6], w[9] - w[5], w[11] + w[4]},
                        {w[9] + w[5], w[7], w[10] - w[3]},
                        {w[11] - w[4], w[10] + w[3], w[8]});
  return f;
}

/// Inverse of assemble; exact because the nine linear columns span gl(3).
inline AffineWeights weights_from_field(const AffineField& f) {
  const Mat3& a = f.a;
  AffineWeights w{};
  w[0] = f.b.x;
  w[1] = f.b.y;
  w[2] = f.b.z;
  w[3] = 0.5 * (a(2, 1) - a(1, 2));
  w[4] = 0.5 * (a(0, 2) - a(2, 0));
  w[5] = 0.5 * (a(1, 0) - a(0, 1));
  w[6] = a(0, 0);
  w[7] = a(1, 1);
  w[8] = a(2, 2);
  w[9] = 0.5 * (a(0, 1) + a(1, 0));
  w[10] = 0.5 * (a(1, 2) + a(2, 1));
  w[11] = 0.5 * (a(0, 2) + a(2, 0));
  return w;
}

inline Vec3 field_velocity(const Vec3& p, const AffineField& f) {
  return f.a * p + f.b;
}

/// grad(v); spatially constant for an affine field.
inline Mat3 jacobian(const AffineWeights& w) { return assemble(w).a; }

/// div(v) = trace(A); rotation and shear columns are traceless.
inline double divergence(const AffineWeights& w) {
  return w[6] + w[7] + w[8];
}

/// grad(v) . v = A (A x + b).
inline Vec3 convective_term(const Vec3& p, const AffineWeights& w) {
  AffineField f = assemble(w);
  return f.a * (f.a * p + f.b);
}

}  // namespace flowsplat
