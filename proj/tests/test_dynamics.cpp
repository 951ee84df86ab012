#include "flowsplat/dynamics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "testutil.hpp"

using namespace flowsplat;

namespace {

DynamicsSpec tiny_spec() {
  DynamicsSpec spec;
  spec.K = 2;
  spec.L = 3;
  spec.space_freqs = 1;
  spec.time_freqs = 1;
  spec.encoder_hidden = {5};
  spec.pattern_hidden = {5};
  spec.accel_hidden = {5};
  spec.residual_hidden = {6};
  return spec;
}

// Random nonzero field outputs, for tests that need motion.
DynamicsSpec tiny_spec_random() {
  DynamicsSpec spec = tiny_spec();
  spec.zero_init_outputs = false;
  return spec;
}

void zero_param(ParamStore& store, const std::string& name) {
  for (double& v : store.values(name)) v = 0.0;
}

/// Forces coefficients(t) == w for every t by zeroing the lone pattern
/// net and writing w into its output bias.
void pin_constant_field(ParamStore& store, const DynamicsModel& model,
                        const AffineWeights& w) {
  ASSERT_EQ(model.spec().K, 1);
  const Mlp& net = model.pattern(0);
  for (int l = 0; l < net.layer_count(); ++l) {
    zero_param(store, net.wname(l));
    zero_param(store, net.bname(l));
  }
  auto bias = store.values(net.bname(net.layer_count() - 1));
  for (int j = 0; j < 12; ++j) bias[j] = w[j];
}

struct ConstantFieldModel {
  ParamStore store;
  Rng rng{7};
  DynamicsModel model;
  PhysicsCode code;

  explicit ConstantFieldModel(const AffineWeights& w)
      : model(store, single_pattern_spec(), rng) {
    pin_constant_field(store, model, w);
    code = model.encode(store, {0.0, 0.0, 0.0});
  }

  static DynamicsSpec single_pattern_spec() {
    DynamicsSpec spec = tiny_spec();
    spec.K = 1;
    return spec;
  }
};

}  // namespace

TEST(Softmax, PlainMatchesHandValues) {
  std::vector<double> logits{std::log(3.0), 0.0};
  auto w = softmax_plain(logits);
  EXPECT_NEAR(w[0], 0.75, 1e-15);
  EXPECT_NEAR(w[1], 0.25, 1e-15);
}

TEST(Encode, ShapesAndNormalization) {
  ParamStore store;
  Rng rng(11);
  DynamicsModel model(store, tiny_spec(), rng);
  PhysicsCode code = model.encode(store, {0.3, -0.2, 0.5});
  EXPECT_EQ(code.z.size(), 3u);
  EXPECT_EQ(code.pattern_logits.size(), 2u);
  EXPECT_EQ(code.pattern_weights.size(), 2u);
  double total = 0.0;
  for (double w : code.pattern_weights) {
    EXPECT_GT(w, 0.0);
    total += w;
  }
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(Encode, DistinctPointsGetDistinctCodes) {
  ParamStore store;
  Rng rng(12);
  DynamicsModel model(store, tiny_spec(), rng);
  PhysicsCode a = model.encode(store, {-1.0, -0.8, 0.2});
  PhysicsCode b = model.encode(store, {0.9, 1.1, -0.4});
  double dz = 0.0;
  for (std::size_t i = 0; i < a.z.size(); ++i)
    dz = std::max(dz, std::abs(a.z[i] - b.z[i]));
  EXPECT_GT(dz, 1e-6);
}

TEST(Coefficients, SinglePatternPassesThrough) {
  AffineWeights w{};
  ConstantFieldModel cf(w);
  // K = 1 makes the softmax weight exactly 1, so the mixture equals the
  // lone pattern output.
  auto tf = time_features(0.37, cf.model.spec().time_freqs);
  auto direct = cf.model.pattern(0).forward_plain(cf.store, tf);
  AffineWeights mixed = cf.model.coefficients(cf.store, 0.37, cf.code);
  for (int j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(mixed[j], direct[j]);
}

TEST(Coefficients, MixtureFollowsPatternWeights) {
  ParamStore store;
  Rng rng(13);
  DynamicsModel model(store, tiny_spec_random(), rng);
  // Zeroed head weights leave only the bias, making the mixture exactly
  // softmax(bias) regardless of z.
  zero_param(store, model.head().wname());
  auto hb = store.values(model.head().bname());
  hb[0] = std::log(3.0);
  hb[1] = 0.0;

  PhysicsCode code = model.encode(store, {0.1, 0.2, -0.1});
  ASSERT_NEAR(code.pattern_weights[0], 0.75, 1e-15);

  double t = -0.4;
  auto tf = time_features(t, model.spec().time_freqs);
  auto p0 = model.pattern(0).forward_plain(store, tf);
  auto p1 = model.pattern(1).forward_plain(store, tf);
  AffineWeights w = model.coefficients(store, t, code);
  for (int j = 0; j < 12; ++j)
    EXPECT_NEAR(w[j], 0.75 * p0[j] + 0.25 * p1[j], 1e-14);
}

TEST(TimeDerivative, LinearBypassIsExact) {
  DynamicsSpec spec = tiny_spec();
  spec.K = 1;
  spec.activation = Activation::kRelu;
  ParamStore store;
  Rng rng(17);
  DynamicsModel model(store, spec, rng);

  // Hand-built pattern net computing w(t) = (t, 0, ..., 0) exactly on
  // t in (-10, 10): relu(t + 10) - 10 = t there.
  const Mlp& net = model.pattern(0);
  zero_param(store, net.wname(0));
  zero_param(store, net.bname(0));
  zero_param(store, net.wname(1));
  zero_param(store, net.bname(1));
  store.values(net.wname(0))[0] = 1.0;  // first hidden unit reads raw t
  store.values(net.bname(0))[0] = 10.0;
  store.values(net.wname(1))[0] = 1.0;  // w0 reads that unit back
  store.values(net.bname(1))[0] = -10.0;

  PhysicsCode code = model.encode(store, {0.0, 0.0, 0.0});
  AffineWeights w = model.coefficients(store, 0.6, code);
  EXPECT_NEAR(w[0], 0.6, 1e-12);

  auto d = model.coefficients_time_derivative(store, 0.25, code, 1e-3);
  EXPECT_NEAR(d[0], 1.0, 1e-9);
  for (int j = 1; j < 12; ++j) EXPECT_NEAR(d[j], 0.0, 1e-12);

  EXPECT_THROW(model.coefficients_time_derivative(store, 0.25, code, 0.0),
               ContractViolation);
}

TEST(Integrate, SingleMidpointStepHandValues) {
  // Rigid rotation about z at unit rate. One step of h = 0.1 from (1,0,0):
  //   v0 = (0,1,0), x_mid = (1,0.05,0), v_mid = (-0.05,1,0),
  //   x1 = (0.995, 0.1, 0).
  AffineWeights w{};
  w[5] = 1.0;
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  g.mu = {1.0, 0.0, 0.0};
  ParticleState st = cf.model.integrate_base_state(cf.store, g, cf.code,
                                                   0.1, 1);
  EXPECT_NEAR(st.x_base.x, 0.995, 1e-15);
  EXPECT_NEAR(st.x_base.y, 0.1, 1e-15);
  EXPECT_NEAR(st.x_base.z, 0.0, 1e-15);
}

TEST(Integrate, RotationMatchesClosedForm) {
  AffineWeights w{};
  w[5] = 1.0;  // omega = (0, 0, 1)
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  g.mu = {1.0, 0.0, 0.0};
  ParticleState st = cf.model.integrate_base_state(cf.store, g, cf.code,
                                                   1.0, 1000);
  EXPECT_NEAR(st.x_base.x, std::cos(1.0), 1e-5);
  EXPECT_NEAR(st.x_base.y, std::sin(1.0), 1e-5);
  EXPECT_NEAR(st.x_base.z, 0.0, 1e-12);
  // Constant angular velocity integrates the orientation exactly.
  EXPECT_NEAR(st.q_base.w, std::cos(0.5), 1e-9);
  EXPECT_NEAR(st.q_base.z, std::sin(0.5), 1e-9);
  EXPECT_NEAR(st.q_base.x, 0.0, 1e-12);
  EXPECT_NEAR(st.q_base.y, 0.0, 1e-12);
}

TEST(Integrate, SecondOrderConvergenceOnRotation) {
  AffineWeights w{};
  w[5] = 1.0;
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  g.mu = {1.0, 0.0, 0.0};
  Vec3 exact{std::cos(1.0), std::sin(1.0), 0.0};

  std::vector<double> errs;
  for (int n : {8, 16, 32, 64}) {
    ParticleState st =
        cf.model.integrate_base_state(cf.store, g, cf.code, 1.0, n);
    errs.push_back(norm(st.x_base - exact));
  }
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
    double ratio = errs[i] / errs[i + 1];
    EXPECT_GE(ratio, 3.6) << "halving step " << i;
    EXPECT_LE(ratio, 4.4) << "halving step " << i;
  }
}

TEST(Integrate, StretchGrowsExponentially) {
  AffineWeights w{};
  w[6] = 1.0;  // v = (x, 0, 0)
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  g.mu = {1.0, 0.5, 0.0};
  g.log_s = {0.2, 0.0, 0.0};
  ParticleState st = cf.model.integrate_base_state(cf.store, g, cf.code,
                                                   1.0, 1000);
  EXPECT_NEAR(st.x_base.x, std::exp(1.0), 1e-3);
  EXPECT_DOUBLE_EQ(st.x_base.y, 0.5);
  // log-scale accumulates h * w6 per step, summing to exactly t.
  EXPECT_NEAR(st.s_base.x, std::exp(1.2), 1e-12);
  EXPECT_NEAR(st.s_base.y, 1.0, 1e-15);
}

TEST(Integrate, RejectsBadArguments) {
  AffineWeights w{};
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  EXPECT_THROW(cf.model.integrate_base_state(cf.store, g, cf.code, 1.0, 0),
               ContractViolation);
  std::vector<double> bad{0.5, 0.25};
  EXPECT_THROW(
      cf.model.integrate_base_path(cf.store, g, cf.code, bad, 8),
      ContractViolation);
  std::vector<double> negative{-0.5};
  EXPECT_THROW(
      cf.model.integrate_base_path(cf.store, g, cf.code, negative, 8),
      ContractViolation);
}

TEST(Integrate, PathVisitsRequestedTimes) {
  AffineWeights w{};
  w[5] = 1.0;
  ConstantFieldModel cf(w);
  GaussianPrimitive g;
  g.mu = {1.0, 0.0, 0.0};
  std::vector<double> times{0.0, 0.25, 0.5, 1.0};
  auto path = cf.model.integrate_base_path(cf.store, g, cf.code, times, 64);
  ASSERT_EQ(path.size(), times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    EXPECT_DOUBLE_EQ(path[i].t, times[i]);
    EXPECT_NEAR(path[i].x_base.x, std::cos(times[i]), 1e-4);
    EXPECT_NEAR(path[i].x_base.y, std::sin(times[i]), 1e-4);
  }
  EXPECT_DOUBLE_EQ(path[0].x_base.x, 1.0);
  EXPECT_DOUBLE_EQ(path[0].x_base.y, 0.0);
}

TEST(Substeps, CeilOfDensityTimesInterval) {
  EXPECT_EQ(substeps_for(0.0, 32), 1);
  EXPECT_EQ(substeps_for(0.01, 32), 1);
  EXPECT_EQ(substeps_for(0.1, 32), 4);
  EXPECT_EQ(substeps_for(1.0, 32), 32);
  EXPECT_THROW(substeps_for(0.1, 0), ContractViolation);
}

TEST(FreshModel, PredictsZeroMotion) {
  ParamStore store;
  Rng rng(41);
  DynamicsModel model(store, tiny_spec(), rng);
  PhysicsCode code = model.encode(store, {0.3, 0.1, -0.2});
  AffineWeights w = model.coefficients(store, 0.66, code);
  AffineWeights a = model.acceleration_weights(store, 0.66, code);
  for (int j = 0; j < 12; ++j) {
    EXPECT_EQ(w[j], 0.0);
    EXPECT_EQ(a[j], 0.0);
  }
  GaussianPrimitive g;
  g.mu = {0.3, 0.1, -0.2};
  ParticleState st = model.integrate_base_state(store, g, code, 1.0, 16);
  EXPECT_DOUBLE_EQ(st.x_base.x, 0.3);
  EXPECT_DOUBLE_EQ(st.x_base.y, 0.1);
  EXPECT_DOUBLE_EQ(st.x_base.z, -0.2);
}

TEST(Residual, FreshModelIsExactIdentity) {
  ParamStore store;
  Rng rng(19);
  DynamicsModel model(store, tiny_spec(), rng);
  PhysicsCode code = model.encode(store, {0.4, -0.3, 0.2});
  ResidualDeformation r =
      model.residual_deformation(store, {0.4, -0.3, 0.2}, 0.7, code);
  EXPECT_EQ(r.dx.x, 0.0);
  EXPECT_EQ(r.dx.y, 0.0);
  EXPECT_EQ(r.dx.z, 0.0);
  EXPECT_EQ(r.dq.w, 1.0);
  EXPECT_EQ(r.dq.x, 0.0);
  EXPECT_EQ(r.ds.x, 0.0);
}

TEST(Residual, RawDecoding) {
  std::vector<double> raw{0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 0.5, 0.7, 0.0, -0.7};
  ResidualDeformation r = DynamicsModel::residual_from_raw(raw);
  EXPECT_DOUBLE_EQ(r.dx.y, -0.2);
  // dq = normalize((1,0,0,0) + (0,0,0,0.5)) = (2, 0, 0, 1)/sqrt(5)
  EXPECT_NEAR(r.dq.w, 2.0 / std::sqrt(5.0), 1e-15);
  EXPECT_NEAR(r.dq.z, 1.0 / std::sqrt(5.0), 1e-15);
  EXPECT_DOUBLE_EQ(r.ds.z, -0.7);
}

TEST(Compose, AppliesResidualOnTopOfBase) {
  ParticleState base;
  base.t = 0.3;
  base.x_base = {1.0, 2.0, 3.0};
  base.q_base = Quaternion::from_axis_angle({0.0, 0.0, 1.0}, 0.5);
  base.s_base = {1.0, 2.0, 0.5};

  ResidualDeformation r;
  r.dx = {0.1, 0.0, -0.2};
  r.dq = Quaternion::from_axis_angle({1.0, 0.0, 0.0}, 0.25);
  r.ds = {std::log(2.0), 0.0, 0.0};

  ParticleState out = DynamicsModel::compose_state(base, r);
  EXPECT_DOUBLE_EQ(out.x.x, 1.1);
  EXPECT_DOUBLE_EQ(out.x.z, 2.8);
  EXPECT_NEAR(out.s.x, 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(out.s.y, 2.0);
  Quaternion expect = (base.q_base * r.dq).normalized();
  EXPECT_NEAR(out.q.w, expect.w, 1e-15);
  EXPECT_NEAR(out.q.x, expect.x, 1e-15);
  // base fields stay untouched
  EXPECT_DOUBLE_EQ(out.x_base.x, 1.0);
  EXPECT_DOUBLE_EQ(out.s_base.y, 2.0);
}

TEST(Compose, IdentityResidualKeepsBase) {
  ParticleState base;
  base.x_base = {0.5, -0.5, 0.25};
  base.q_base = {1.0, 0.0, 0.0, 0.0};
  base.s_base = {0.1, 0.2, 0.3};
  ParticleState out = DynamicsModel::compose_state(base, {});
  EXPECT_DOUBLE_EQ(out.x.x, 0.5);
  EXPECT_DOUBLE_EQ(out.q.w, 1.0);
  EXPECT_DOUBLE_EQ(out.s.z, 0.3);
}

TEST(StatePrimitive, RoundTripsScalesThroughLog) {
  ParticleState st;
  st.x = {1.0, 2.0, 3.0};
  st.q = Quaternion::from_axis_angle({0.0, 1.0, 0.0}, 0.3);
  st.s = {0.5, 2.0, 1.0};
  GaussianPrimitive g0;
  g0.alpha = 0.7;
  g0.color = {0.2, 0.4, 0.6};
  GaussianPrimitive g = state_primitive(st, g0);
  EXPECT_DOUBLE_EQ(g.mu.y, 2.0);
  EXPECT_NEAR(g.scale().x, 0.5, 1e-15);
  EXPECT_NEAR(g.scale().y, 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(g.alpha, 0.7);
}

TEST(Graph, CoefficientsMatchPlainEvaluation) {
  ParamStore store;
  Rng rng(23);
  DynamicsSpec spec = tiny_spec_random();
  spec.K = 3;
  DynamicsModel model(store, spec, rng);
  Vec3 x0{0.2, -0.6, 0.4};
  PhysicsCode code = model.encode(store, x0);

  Tape tape(store);
  DynamicsGraph graph(model, tape);
  auto nodes = model.build_code(tape, x0);
  int w = graph.coefficients(0.55, nodes.weights);

  auto wz = tape.value(nodes.z);
  for (std::size_t i = 0; i < code.z.size(); ++i)
    EXPECT_DOUBLE_EQ(wz[i], code.z[i]);
  auto ww = tape.value(nodes.weights);
  for (std::size_t i = 0; i < code.pattern_weights.size(); ++i)
    EXPECT_DOUBLE_EQ(ww[i], code.pattern_weights[i]);

  AffineWeights plain = model.coefficients(store, 0.55, code);
  auto wv = tape.value(w);
  for (int j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(wv[j], plain[j]);
}

TEST(Graph, PatternStacksAreSharedAcrossParticles) {
  ParamStore store;
  Rng rng(29);
  DynamicsModel model(store, tiny_spec(), rng);
  Tape tape(store);
  DynamicsGraph graph(model, tape);
  int a = graph.pattern_stack(0.5);
  int before = tape.node_count();
  int b = graph.pattern_stack(0.5);
  EXPECT_EQ(a, b);
  EXPECT_EQ(tape.node_count(), before);
  EXPECT_NE(graph.pattern_stack(0.25), a);
}

TEST(Graph, IntegratedPathMatchesPlainPath) {
  ParamStore store;
  Rng rng(31);
  DynamicsModel model(store, tiny_spec_random(), rng);
  GaussianPrimitive g;
  g.mu = {0.3, -0.2, 0.1};
  Rng qrng(5);
  g.q = testutil::random_unit_quat(qrng);
  std::vector<double> times{0.1, 0.37, 0.9};
  PhysicsCode code = model.encode(store, g.mu);
  auto plain = model.integrate_base_path(store, g, code, times, 16);

  Tape tape(store);
  DynamicsGraph graph(model, tape);
  auto nodes = model.build_code(tape, g.mu);
  auto path = graph.integrate_path(g, nodes.weights, times, 16, true, true);

  ASSERT_EQ(path.x.size(), times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    Vec3 xp = tape.value_vec3(path.x[i]);
    EXPECT_DOUBLE_EQ(xp.x, plain[i].x_base.x);
    EXPECT_DOUBLE_EQ(xp.y, plain[i].x_base.y);
    EXPECT_DOUBLE_EQ(xp.z, plain[i].x_base.z);
    auto qv = tape.value(path.q[i]);
    EXPECT_DOUBLE_EQ(qv[0], plain[i].q_base.w);
    EXPECT_DOUBLE_EQ(qv[3], plain[i].q_base.z);
    Vec3 ls = tape.value_vec3(path.log_s[i]);
    EXPECT_DOUBLE_EQ(std::exp(ls.x), plain[i].s_base.x);
    EXPECT_DOUBLE_EQ(std::exp(ls.z), plain[i].s_base.z);
  }
}

TEST(Graph, EndToEndGradientsMatchFiniteDifferences) {
  ParamStore store;
  Rng rng(37);
  DynamicsModel model(store, tiny_spec_random(), rng);
  GaussianPrimitive g;
  g.mu = {0.25, -0.1, 0.3};
  std::vector<double> times{0.2, 0.6};
  Vec3 obs0{0.3, -0.05, 0.28};
  Vec3 obs1{0.5, 0.1, 0.2};

  auto build = [&](Tape& tape) {
    DynamicsGraph graph(model, tape);
    auto code = model.build_code(tape, g.mu);
    auto path = graph.integrate_path(g, code.weights, times, 8, true, false);
    std::vector<int> losses;
    const Vec3 obs[2] = {obs0, obs1};
    for (int i = 0; i < 2; ++i) {
      int raw = model.build_residual_raw(tape, g.mu, times[i], code.z);
      int dx = tape.slice(raw, 0, 3);
      int xp = tape.add(path.x[i], dx);
      losses.push_back(tape.sum_sq(tape.sub(xp, tape.constant_vec3(obs[i]))));
      losses.push_back(tape.scale(tape.sum_sq(raw), 0.01));
      // rotation chain: squared geodesic angle to a fixed target
      int dq = tape.normalize(
          tape.add(tape.constant({1.0, 0.0, 0.0, 0.0}),
                   tape.slice(raw, 3, 4)));
      int qp = tape.quat_mul(path.q[i], dq);
      losses.push_back(tape.scale(tape.quat_log_norm2(qp), 0.1));
    }
    int total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i)
      total = tape.add(total, losses[i]);
    return total;
  };

  Tape tape(store);
  int loss = build(tape);
  tape.backward(loss);
  std::vector<double> got(tape.param_grads().begin(),
                          tape.param_grads().end());

  auto eval = [&](void) {
    Tape t2(store);
    return t2.scalar(build(t2));
  };
  const double h = 1e-5;
  std::span<double> flat = store.raw();
  int checked = 0;
  for (std::size_t i = 0; i < flat.size(); i += 7) {  // every 7th weight
    double keep = flat[i];
    flat[i] = keep + h;
    double up = eval();
    flat[i] = keep - h;
    double dn = eval();
    flat[i] = keep;
    double fd = (up - dn) / (2.0 * h);
    double tol = 1e-4 * std::max({std::abs(fd), std::abs(got[i]), 1e-3});
    EXPECT_NEAR(got[i], fd, tol) << "param index " << i;
    ++checked;
  }
  EXPECT_GT(checked, 50);
}
