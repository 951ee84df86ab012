#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "flowsplat/error.hpp"
#include "flowsplat/rng.hpp"

namespace flowsplat {

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------- Vec3

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3() = default;
  constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(double c) const { return {x * c, y * c, z * c}; }
  Vec3 operator/(double c) const { return {x / c, y / c, z / c}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x; y += o.y; z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x; y -= o.y; z -= o.z;
    return *this;
  }
  Vec3& operator*=(double c) {
    x *= c; y *= c; z *= c;
    return *this;
  }
};

inline Vec3 operator*(double c, const Vec3& v) { return v * c; }

inline double dot(const Vec3& a, const Vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z,
          a.x * b.y - a.y * b.x};
}

inline Vec3 cwise_mul(const Vec3& a, const Vec3& b) {
  return {a.x * b.x, a.y * b.y, a.z * b.z};
}

inline Vec3 cwise_exp(const Vec3& a) {
  return {std::exp(a.x), std::exp(a.y), std::exp(a.z)};
}

inline Vec3 cwise_min(const Vec3& a, const Vec3& b) {
  return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}

inline Vec3 cwise_max(const Vec3& a, const Vec3& b) {
  return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

inline double norm2(const Vec3& v) { return dot(v, v); }
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

inline Vec3 normalized(const Vec3& v) {
  double n = norm(v);
  require(n > 0.0, "Vec3 normalize: zero vector");
  return v / n;
}

inline bool all_finite(const Vec3& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// ---------------------------------------------------------------- Mat3

/// Row-major 3x3.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 zero() { return {}; }

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }

  static Mat3 diag(const Vec3& d) {
    Mat3 r;
    r(0, 0) = d.x;
    r(1, 1) = d.y;
    r(2, 2) = d.z;
    return r;
  }

  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
    Mat3 r;
    r.m = {r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z};
    return r;
  }

  double operator()(int r, int c) const { return m[3 * r + c]; }
  double& operator()(int r, int c) { return m[3 * r + c]; }

  Vec3 row(int r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }
  Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }

  Vec3 operator*(const Vec3& v) const {
    return {dot(row(0), v), dot(row(1), v), dot(row(2), v)};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }

  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }

  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
    return r;
  }

  Mat3 operator*(double c) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] * c;
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  double trace() const { return m[0] + m[4] + m[8]; }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// ---------------------------------------------------------------- Quaternion

/// Scalar-first (w, x, y, z), Hamilton product, right-handed. rotate()
/// applies q v q^{-1} for unit q.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  constexpr Quaternion() = default;
  constexpr Quaternion(double w_, double x_, double y_, double z_)
      : w(w_), x(x_), y(y_), z(z_) {}

  static Quaternion identity() { return {1, 0, 0, 0}; }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    double n = norm();
    require(n > 0.0, "Quaternion normalize: zero norm");
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  Quaternion operator*(const Quaternion& b) const {
    return {w * b.w - x * b.x - y * b.y - z * b.z,
            w * b.x + x * b.w + y * b.z - z * b.y,
            w * b.y - x * b.z + y * b.w + z * b.x,
            w * b.z + x * b.y - y * b.x + z * b.w};
  }

  Vec3 rotate(const Vec3& v) const {
    // q v q* expanded via the cross-product form.
    Vec3 u{x, y, z};
    Vec3 t = cross(u, v) * 2.0;
    return v + t * w + cross(u, t);
  }

  Mat3 to_matrix() const {
    Mat3 r;
    double xx = x * x, yy = y * y, zz = z * z;
    double xy = x * y, xz = x * z, yz = y * z;
    double wx = w * x, wy = w * y, wz = w * z;
    r.m = {1 - 2 * (yy + zz), 2 * (xy - wz),     2 * (xz + wy),
           2 * (xy + wz),     1 - 2 * (xx + zz), 2 * (yz - wx),
           2 * (xz - wy),     2 * (yz + wx),     1 - 2 * (xx + yy)};
    return r;
  }

  static Quaternion from_axis_angle(const Vec3& axis, double angle) {
    Vec3 u = flowsplat::normalized(axis);
    double h = 0.5 * angle;
    double s = std::sin(h);
    return {std::cos(h), u.x * s, u.y * s, u.z * s};
  }

  /// exp of the pure quaternion (0, v): (cos|v|, sinc|v| * v).
  static Quaternion exp_pure(const Vec3& v) {
    double theta = flowsplat::norm(v);
    double s;  // sin(theta)/theta
    if (theta < 1e-8) {
      s = 1.0 - theta * theta / 6.0;
    } else {
      s = std::sin(theta) / theta;
    }
    return {std::cos(theta), s * v.x, s * v.y, s * v.z};
  }
};

/// Rotation matrix back to a unit quaternion (Shepperd's branch on the
/// largest diagonal term). Sign convention: w >= 0.
inline Quaternion quat_from_matrix(const Mat3& r) {
  double t = r.trace();
  Quaternion q;
  if (t > 0.0) {
    double s = std::sqrt(t + 1.0) * 2.0;
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s,
         (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s,
         (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s,
         (r(1, 2) + r(2, 1)) / s};
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s,
         (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
  return q.normalized();
}

/// One rotation step under angular velocity omega over dt:
/// q <- exp((0, omega * dt / 2)) (x) q, renormalized. Exact for constant
/// omega; O(dt^2) local error otherwise.
inline Quaternion quat_from_angular_velocity_step(const Quaternion& q,
                                                  const Vec3& omega,
                                                  double dt) {
  if (omega.x == 0.0 && omega.y == 0.0 && omega.z == 0.0) return q;
  Quaternion step = Quaternion::exp_pure(omega * (0.5 * dt));
  return (step * q).normalized();
}

// ------------------------------------------------------- Gaussian primitive

/// Canonical particle. Scales are stored as log-scale and exponentiated
/// on read, which keeps them positive under unconstrained optimization.
struct GaussianPrimitive {
  Vec3 mu;
  Vec3 log_s;
  Quaternion q = Quaternion::identity();
  double alpha = 1.0;
  Vec3 color{1, 1, 1};

  Vec3 scale() const { return cwise_exp(log_s); }
};

/// Sigma = R S S^T R^T for S = diag(s). The upper triangle is computed
/// once and mirrored, so the result is symmetric bitwise.
inline Mat3 covariance_from(const Quaternion& q, const Vec3& s) {
  require(std::abs(q.norm() - 1.0) < 1e-6, "covariance_from: q not unit");
  require(s.x > 0.0 && s.y > 0.0 && s.z > 0.0, "covariance_from: s not > 0");
  Mat3 r = q.to_matrix();
  Mat3 m;  // R * diag(s)
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = r(i, j) * s[j];
  Mat3 sigma;
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j) {
      double v = dot(m.row(i), m.row(j));
      sigma(i, j) = v;
      sigma(j, i) = v;
    }
  return sigma;
}

// ---------------------------------------------------------------- Aabb

struct Aabb {
  Vec3 lo{std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};

  bool valid() const { return lo.x <= hi.x && lo.y <= hi.y && lo.z <= hi.z; }

  void expand(const Vec3& p) {
    lo = cwise_min(lo, p);
    hi = cwise_max(hi, p);
  }

  Vec3 center() const { return (lo + hi) * 0.5; }
  Vec3 extent() const { return hi - lo; }

  /// Grown by `frac` of the half-extent on every side; center preserved.
  Aabb inflated(double frac) const {
    require(valid(), "Aabb::inflated: empty box");
    Vec3 half = extent() * 0.5 * (1.0 + frac);
    Aabb r;
    r.lo = center() - half;
    r.hi = center() + half;
    return r;
  }

  Vec3 sample(Rng& rng) const {
    require(valid(), "Aabb::sample: empty box");
    return {rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y),
            rng.uniform(lo.z, hi.z)};
  }

  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y &&
           p.z >= lo.z && p.z <= hi.z;
  }
};

// ------------------------------------------------------ positional encoding

/// gamma(v): per component c, per k = 0..freqs-1, append
/// [sin(2^k pi v_c), cos(2^k pi v_c)] (component-major). Length 2*freqs*dim.
inline void positional_encoding_append(const double* v, int dim, int freqs,
                                       std::vector<double>& out) {
  require(freqs >= 0, "positional_encoding: freqs < 0");
  for (int c = 0; c < dim; ++c) {
    double base = kPi * v[c];
    for (int k = 0; k < freqs; ++k) {
      double arg = std::ldexp(base, k);  // 2^k * pi * v_c
      out.push_back(std::sin(arg));
      out.push_back(std::cos(arg));
    }
  }
}

inline std::vector<double> positional_encoding(const std::vector<double>& v,
                                               int freqs) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * freqs) * v.size());
  positional_encoding_append(v.data(), static_cast<int>(v.size()), freqs, out);
  return out;
}

/// Network input features: raw values concatenated with their encoding.
/// Raw coordinates disambiguate points that alias under gamma alone
/// (every gamma component has period 2) and give the nets an exact
/// linear-in-input path.
inline std::vector<double> space_features(const Vec3& p, int freqs) {
  std::vector<double> out{p.x, p.y, p.z};
  out.reserve(3 + static_cast<std::size_t>(6 * freqs));
  const double v[3] = {p.x, p.y, p.z};
  positional_encoding_append(v, 3, freqs, out);
  return out;
}

inline std::vector<double> time_features(double t, int freqs) {
  std::vector<double> out{t};
  out.reserve(1 + static_cast<std::size_t>(2 * freqs));
  positional_encoding_append(&t, 1, freqs, out);
  return out;
}

// ------------------------------------------------------- matrix exponential

/// e^A by scaling-and-squaring over a truncated Taylor series. Plenty for
/// the generator magnitudes used here (||A|| up to ~10).
inline Mat3 expm(const Mat3& a) {
  double nrm = 0.0;
  for (int i = 0; i < 3; ++i) {
    double row = std::abs(a(i, 0)) + std::abs(a(i, 1)) + std::abs(a(i, 2));
    nrm = std::max(nrm, row);
  }
  int squarings = 0;
  double scale = 1.0;
  while (nrm * scale > 0.5) {
    scale *= 0.5;
    ++squarings;
  }
  Mat3 x = a * scale;
  Mat3 sum = Mat3::identity();
  Mat3 term = Mat3::identity();
  for (int k = 1; k <= 20; ++k) {
    term = term * x * (1.0 / k);
    sum = sum + term;
  }
  for (int i = 0; i < squarings; ++i) sum = sum * sum;
  return sum;
}

/// Flow map of xdot = A x + b over time t: x(t) = phi * x0 + offset.
/// Computed from the exponential of the augmented 4x4 generator.
struct AffineFlow {
  Mat3 phi;
  Vec3 offset;
};

inline AffineFlow affine_flow(const Mat3& a, const Vec3& b, double t) {
  std::array<double, 16> g{};  // row-major 4x4, last row zero
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) g[4 * i + j] = a(i, j) * t;
    g[4 * i + 3] = b[i] * t;
  }
  double nrm = 0.0;
  for (int i = 0; i < 4; ++i) {
    double row = 0.0;
    for (int j = 0; j < 4; ++j) row += std::abs(g[4 * i + j]);
    nrm = std::max(nrm, row);
  }
  int squarings = 0;
  double scale = 1.0;
  while (nrm * scale > 0.5) {
    scale *= 0.5;
    ++squarings;
  }
  for (double& v : g) v *= scale;

  auto mul4 = [](const std::array<double, 16>& p,
                 const std::array<double, 16>& q) {
    std::array<double, 16> r{};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += p[4 * i + k] * q[4 * k + j];
        r[4 * i + j] = s;
      }
    return r;
  };

  std::array<double, 16> sum{}, term{};
  for (int i = 0; i < 4; ++i) sum[5 * i] = term[5 * i] = 1.0;
  for (int k = 1; k <= 20; ++k) {
    term = mul4(term, g);
    for (double& v : term) v *= 1.0 / k;
    for (int i = 0; i < 16; ++i) sum[i] += term[i];
  }
  for (int i = 0; i < squarings; ++i) sum = mul4(sum, sum);

  AffineFlow f;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) f.phi(i, j) = sum[4 * i + j];
    f.offset[i] = sum[4 * i + 3];
  }
  return f;
}

}  // namespace flowsplat
