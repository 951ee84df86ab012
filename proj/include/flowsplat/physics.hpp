#pragma once

#include <array>
#include <span>
#include <vector>

#include "flowsplat/affine.hpp"
#include "flowsplat/dynamics.hpp"

namespace flowsplat {

/// One spacetime probe with every field quantity the constraint losses
/// need, evaluated at sample time.
struct CollocationPoint {
  Vec3 x;
  double t = 0.0;
  PhysicsCode code;
  AffineWeights w{};
  std::array<double, 12> dwdt{};
  Vec3 a_pred;
};

/// Draws n iid samples uniform over bbox x [t0, t1] and evaluates the code,
/// coefficients, their time derivative (central FD, half-width fd_h) and
/// the predicted acceleration at each.
inline std::vector<CollocationPoint> sample_collocation(
    const DynamicsModel& model, const ParamStore& store, int n,
    const Aabb& bbox, double t0, double t1, double fd_h, Rng& rng) {
  require(n >= 1, "sample_collocation: n must be >= 1");
  require(bbox.valid(), "sample_collocation: invalid bounding box");
  require(t1 >= t0, "sample_collocation: bad time range");
  require(fd_h > 0.0, "sample_collocation: fd_h must be positive");
  std::vector<CollocationPoint> pts;
  pts.reserve(n);
  for (int i = 0; i < n; ++i) {
    CollocationPoint p;
    p.x = bbox.sample(rng);
    p.t = rng.uniform(t0, t1);
    p.code = model.encode(store, p.x);
    p.w = model.coefficients(store, p.t, p.code);
    p.dwdt = model.coefficients_time_derivative(store, p.t, p.code, fd_h);
    p.a_pred = velocity(p.x, model.acceleration_weights(store, p.t, p.code));
    pts.push_back(std::move(p));
  }
  return pts;
}

/// Transport mismatch dv/dt + (v . grad) v - a at the probe, expressed
/// through the affine basis: Phi(x) dw/dt + A(w)(A(w) x + b) - a_pred.
inline Vec3 transport_residual(const CollocationPoint& p) {
  Vec3 local = velocity(p.x, p.dwdt);
  Vec3 conv = convective_term(p.x, p.w);
  return local + conv - p.a_pred;
}

/// div v; exactly the sum of the three stretch coefficients.
inline double divergence_residual(const CollocationPoint& p) {
  return divergence(p.w);
}

struct ConstraintLosses {
  double transport = 0.0;   // mean squared transport residual norm
  double divergence = 0.0;  // mean squared divergence
  double lambda_transport = 0.0;
  double lambda_div = 0.0;

  double weighted() const {
    return lambda_transport * transport + lambda_div * divergence;
  }
};

inline ConstraintLosses constraint_loss(std::span<const CollocationPoint> pts,
                                        double lambda_transport,
                                        double lambda_div) {
  require(!pts.empty(), "constraint_loss: empty batch");
  require(lambda_transport >= 0.0 && lambda_div >= 0.0,
          "constraint_loss: weights must be nonnegative");
  ConstraintLosses out;
  out.lambda_transport = lambda_transport;
  out.lambda_div = lambda_div;
  for (const CollocationPoint& p : pts) {
    out.transport += norm2(transport_residual(p));
    double d = divergence_residual(p);
    out.divergence += d * d;
  }
  double inv = 1.0 / static_cast<double>(pts.size());
  out.transport *= inv;
  out.divergence *= inv;
  return out;
}

/// Tape twins of the residuals for one probe; transport is 3-dim, the
/// divergence node is scalar.
struct CollocationNodes {
  int transport = -1;
  int divergence = -1;
};

inline CollocationNodes build_collocation_residuals(DynamicsGraph& graph,
                                                    const Vec3& x, double t,
                                                    double fd_h) {
  require(fd_h > 0.0, "build_collocation_residuals: fd_h must be positive");
  Tape& tape = graph.tape();
  const DynamicsModel& model = graph.model();
  auto code = model.build_code(tape, x);
  int w = graph.coefficients(t, code.weights);
  int whi = graph.coefficients(t + fd_h, code.weights);
  int wlo = graph.coefficients(t - fd_h, code.weights);
  int dwdt = tape.scale(tape.sub(whi, wlo), 1.0 / (2.0 * fd_h));
  int xn = tape.constant_vec3(x);
  int local = tape.affine_velocity(xn, dwdt);
  int conv = tape.affine_jac_apply(w, tape.affine_velocity(xn, w));
  int a = tape.affine_velocity(
      xn, model.build_accel_weights(tape, t, code.z));
  CollocationNodes out;
  out.transport = tape.sub(tape.add(local, conv), a);
  out.divergence = tape.sum(tape.slice(w, 6, 3));
  return out;
}

}  // namespace flowsplat
