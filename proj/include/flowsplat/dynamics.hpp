#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowsplat/affine.hpp"
#include "flowsplat/autodiff.hpp"
#include "flowsplat/math.hpp"
#include "flowsplat/nn.hpp"
#include "flowsplat/rng.hpp"

namespace flowsplat {

struct DynamicsSpec {
  int K = 32;  // motion patterns
  int L = 16;  // code width
  int space_freqs = 6;
  int time_freqs = 6;
  std::vector<int> encoder_hidden{64, 64, 64};
  std::vector<int> pattern_hidden{64, 64, 64};
  std::vector<int> accel_hidden{64, 64, 64};
  std::vector<int> residual_hidden{128, 128, 128, 128};
  Activation activation = Activation::kTanh;
  // A fresh model predicts zero velocity and zero acceleration, so the
  // untrained baseline holds every particle at its canonical pose.
  bool zero_init_outputs = true;

  int space_dim() const { return 3 + 6 * space_freqs; }
  int time_dim() const { return 1 + 2 * time_freqs; }

  void validate() const {
    require(K >= 1, "DynamicsSpec: K must be >= 1");
    require(L >= 1, "DynamicsSpec: L must be >= 1");
    require(space_freqs >= 1 && time_freqs >= 1,
            "DynamicsSpec: encodings need at least one frequency");
  }
};

/// Per-particle latent emitted by the encoder, plus its pattern mixture.
struct PhysicsCode {
  std::vector<double> z;
  std::vector<double> pattern_logits;
  std::vector<double> pattern_weights;  // softmax of the logits
};

/// Local correction applied on top of the integrated base state.
struct ResidualDeformation {
  Vec3 dx{0.0, 0.0, 0.0};
  Quaternion dq{1.0, 0.0, 0.0, 0.0};
  Vec3 ds{0.0, 0.0, 0.0};  // log-scale offset
};

struct ParticleState {
  double t = 0.0;
  Vec3 x;
  Quaternion q;
  Vec3 s;  // linear scale, not log
  Vec3 x_base;
  Quaternion q_base;
  Vec3 s_base;
  ResidualDeformation residual;
};

/// Same max-shifted algorithm as the tape op so both paths agree bitwise.
inline std::vector<double> softmax_plain(std::span<const double> x) {
  require(!x.empty(), "softmax_plain: empty input");
  std::vector<double> y(x.size());
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    total += y[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] /= total;
  return y;
}

/// Substeps used when integrating one grid interval of length dt at a
/// density of n_per_unit steps per unit time.
inline int substeps_for(double dt, int n_per_unit) {
  require(dt >= 0.0 && std::isfinite(dt), "substeps_for: bad interval");
  require(n_per_unit >= 1, "substeps_for: n_per_unit must be >= 1");
  return std::max(1, static_cast<int>(std::ceil(n_per_unit * dt)));
}

/// Velocity-field particle model: an encoder maps canonical position to a
/// code z, a linear head mixes K time-conditioned pattern nets into the 12
/// affine field coefficients, an acceleration head predicts the material
/// derivative in the same basis, and a residual net adds a small local
/// deformation on top of the integrated base state.
class DynamicsModel {
 public:
  DynamicsModel(ParamStore& store, DynamicsSpec spec, Rng& rng)
      : spec_(std::move(spec)) {
    spec_.validate();
    encoder_ = Mlp(store, "encoder",
                   MlpSpec{spec_.space_dim(), spec_.encoder_hidden, spec_.L,
                           spec_.activation, false},
                   rng);
    head_ = Linear(store, "head", spec_.L, spec_.K, rng);
    patterns_.reserve(spec_.K);
    for (int k = 0; k < spec_.K; ++k)
      patterns_.emplace_back(store, "pattern" + std::to_string(k),
                             MlpSpec{spec_.time_dim(), spec_.pattern_hidden,
                                     12, spec_.activation,
                                     spec_.zero_init_outputs},
                             rng);
    accel_ = Mlp(store, "accel",
                 MlpSpec{spec_.time_dim() + spec_.L, spec_.accel_hidden, 12,
                         spec_.activation, spec_.zero_init_outputs},
                 rng);
    residual_ = Mlp(store, "residual",
                    MlpSpec{spec_.space_dim() + spec_.time_dim() + spec_.L,
                            spec_.residual_hidden, 10, spec_.activation, true},
                    rng);
  }

  const DynamicsSpec& spec() const { return spec_; }
  const Mlp& encoder() const { return encoder_; }
  const Linear& head() const { return head_; }
  const Mlp& pattern(int k) const { return patterns_.at(k); }
  const Mlp& accel() const { return accel_; }
  const Mlp& residual() const { return residual_; }

  // --- plain evaluation ---

  PhysicsCode encode(const ParamStore& store, const Vec3& x0) const {
    PhysicsCode code;
    code.z = encoder_.forward_plain(store,
                                    space_features(x0, spec_.space_freqs));
    code.pattern_logits = head_.forward_plain(store, code.z);
    code.pattern_weights = softmax_plain(code.pattern_logits);
    return code;
  }

  AffineWeights coefficients(const ParamStore& store, double t,
                             const PhysicsCode& code) const {
    auto tf = time_features(t, spec_.time_freqs);
    AffineWeights w{};
    for (int k = 0; k < spec_.K; ++k) {
      auto out = patterns_[k].forward_plain(store, tf);
      double ck = code.pattern_weights[k];
      for (int j = 0; j < 12; ++j) w[j] += ck * out[j];
    }
    return w;
  }

  std::array<double, 12> coefficients_time_derivative(
      const ParamStore& store, double t, const PhysicsCode& code,
      double h) const {
    require(h > 0.0, "coefficients_time_derivative: h must be positive");
    AffineWeights hi = coefficients(store, t + h, code);
    AffineWeights lo = coefficients(store, t - h, code);
    double inv = 1.0 / (2.0 * h);
    std::array<double, 12> d{};
    for (int j = 0; j < 12; ++j) d[j] = (hi[j] - lo[j]) * inv;
    return d;
  }

  AffineWeights acceleration_weights(const ParamStore& store, double t,
                                     const PhysicsCode& code) const {
    auto in = time_features(t, spec_.time_freqs);
    in.insert(in.end(), code.z.begin(), code.z.end());
    auto out = accel_.forward_plain(store, in);
    AffineWeights w{};
    std::copy(out.begin(), out.end(), w.begin());
    return w;
  }

  ResidualDeformation residual_deformation(const ParamStore& store,
                                           const Vec3& x0, double t,
                                           const PhysicsCode& code) const {
    auto in = space_features(x0, spec_.space_freqs);
    auto tf = time_features(t, spec_.time_freqs);
    in.insert(in.end(), tf.begin(), tf.end());
    in.insert(in.end(), code.z.begin(), code.z.end());
    auto raw = residual_.forward_plain(store, in);
    return residual_from_raw(raw);
  }

  static ResidualDeformation residual_from_raw(std::span<const double> raw) {
    require(raw.size() == 10, "residual_from_raw: need 10 values");
    ResidualDeformation r;
    r.dx = {raw[0], raw[1], raw[2]};
    r.dq = Quaternion{1.0 + raw[3], raw[4], raw[5], raw[6]}.normalized();
    r.ds = {raw[7], raw[8], raw[9]};
    return r;
  }

  /// One midpoint step of the coupled kinematic system at time t0.
  void rk2_step(const ParamStore& store, const PhysicsCode& code, double t0,
                double h, Vec3& x, Quaternion& q, Vec3& log_s) const {
    AffineWeights w0 = coefficients(store, t0, code);
    Vec3 v0 = velocity(x, w0);
    Vec3 xm = x + v0 * (0.5 * h);
    AffineWeights wm = coefficients(store, t0 + 0.5 * h, code);
    Vec3 vm = velocity(xm, wm);
    x = x + vm * h;
    q = quat_from_angular_velocity_step(q, {wm[3], wm[4], wm[5]}, h);
    log_s = log_s + Vec3{wm[6], wm[7], wm[8]} * h;
  }

  /// Integrates the base state from t = 0 to t_target with n_steps RK2
  /// midpoint steps of equal length.
  ParticleState integrate_base_state(const ParamStore& store,
                                     const GaussianPrimitive& g,
                                     const PhysicsCode& code, double t_target,
                                     int n_steps) const {
    require(n_steps >= 1, "integrate_base_state: n_steps must be >= 1");
    require(std::isfinite(t_target), "integrate_base_state: bad t_target");
    Vec3 x = g.mu;
    Quaternion q = g.q;
    Vec3 log_s = g.log_s;
    double h = t_target / n_steps;
    for (int k = 0; k < n_steps; ++k)
      rk2_step(store, code, k * h, h, x, q, log_s);
    return make_base_state(t_target, x, q, log_s);
  }

  /// Integrates once from t = 0 through an ascending list of times and
  /// returns the base state at each of them. Per-interval substep counts
  /// come from substeps_for(dt, n_per_unit), so a later time reuses the
  /// identical step sequence a shorter list would have produced.
  std::vector<ParticleState> integrate_base_path(
      const ParamStore& store, const GaussianPrimitive& g,
      const PhysicsCode& code, std::span<const double> times,
      int n_per_unit) const {
    std::vector<ParticleState> out;
    out.reserve(times.size());
    Vec3 x = g.mu;
    Quaternion q = g.q;
    Vec3 log_s = g.log_s;
    double cur = 0.0;
    for (double target : times) {
      require(std::isfinite(target) && target >= 0.0,
              "integrate_base_path: times must be finite and nonnegative");
      require(target >= cur, "integrate_base_path: times must be ascending");
      if (target > cur) {
        int nsub = substeps_for(target - cur, n_per_unit);
        double h = (target - cur) / nsub;
        for (int k = 0; k < nsub; ++k)
          rk2_step(store, code, cur + k * h, h, x, q, log_s);
        cur = target;
      }
      out.push_back(make_base_state(cur, x, q, log_s));
    }
    return out;
  }

  /// Applies the residual on top of a base state (base fields untouched).
  static ParticleState compose_state(const ParticleState& base,
                                     const ResidualDeformation& r) {
    ParticleState out = base;
    out.residual = r;
    out.x = base.x_base + r.dx;
    out.q = (base.q_base * r.dq).normalized();
    out.s = cwise_mul(base.s_base, cwise_exp(r.ds));
    return out;
  }

  // --- tape builders (training path) ---

  struct CodeNodes {
    int z = -1;
    int logits = -1;
    int weights = -1;
  };

  CodeNodes build_code(Tape& tape, const Vec3& x0) const {
    int in = tape.constant(space_features(x0, spec_.space_freqs));
    CodeNodes c;
    c.z = encoder_.build(tape, in);
    c.logits = head_.build(tape, c.z);
    c.weights = tape.softmax(c.logits);
    return c;
  }

  /// All K pattern outputs at time t as one K x 12 row-major node.
  int build_pattern_stack(Tape& tape, double t) const {
    int tf = tape.constant(time_features(t, spec_.time_freqs));
    std::vector<int> rows(spec_.K);
    for (int k = 0; k < spec_.K; ++k) rows[k] = patterns_[k].build(tape, tf);
    return spec_.K == 1 ? rows[0] : tape.concat(rows);
  }

  /// Mixture of a pattern stack by one particle's softmax weights.
  int mix_coefficients(Tape& tape, int stack, int weights) const {
    return tape.vecmat(weights, stack, spec_.K, 12);
  }

  int build_accel_weights(Tape& tape, double t, int z) const {
    int tf = tape.constant(time_features(t, spec_.time_freqs));
    return accel_.build(tape, tape.concat({tf, z}));
  }

  /// Raw 10-vector [dx, dq_raw, ds]; residual_from_raw decodes it.
  int build_residual_raw(Tape& tape, const Vec3& x0, double t, int z) const {
    auto in = space_features(x0, spec_.space_freqs);
    auto tf = time_features(t, spec_.time_freqs);
    in.insert(in.end(), tf.begin(), tf.end());
    int features = tape.constant(in);
    return residual_.build(tape, tape.concat({features, z}));
  }

 private:
  DynamicsSpec spec_;
  Mlp encoder_;
  Linear head_;
  std::vector<Mlp> patterns_;
  Mlp accel_;
  Mlp residual_;

  static ParticleState make_base_state(double t, const Vec3& x,
                                       const Quaternion& q,
                                       const Vec3& log_s) {
    ParticleState st;
    st.t = t;
    st.x_base = x;
    st.q_base = q;
    st.s_base = cwise_exp(log_s);
    st.x = st.x_base;
    st.q = st.q_base;
    st.s = st.s_base;
    return st;
  }
};

inline GaussianPrimitive state_primitive(const ParticleState& st,
                                         const GaussianPrimitive& g0) {
  GaussianPrimitive g = g0;
  g.mu = st.x;
  g.q = st.q;
  g.log_s = {std::log(st.s.x), std::log(st.s.y), std::log(st.s.z)};
  return g;
}

/// Builds training graphs against one tape, caching the pattern stacks,
/// which depend only on t, across particles.
class DynamicsGraph {
 public:
  DynamicsGraph(const DynamicsModel& model, Tape& tape)
      : model_(&model), tape_(&tape) {}

  Tape& tape() { return *tape_; }
  const DynamicsModel& model() const { return *model_; }

  int pattern_stack(double t) {
    auto key = std::bit_cast<std::uint64_t>(t);
    auto it = stacks_.find(key);
    if (it != stacks_.end()) return it->second;
    int id = model_->build_pattern_stack(*tape_, t);
    stacks_.emplace(key, id);
    return id;
  }

  /// Field coefficients for one particle (weights node) at time t.
  int coefficients(double t, int weights) {
    return model_->mix_coefficients(*tape_, pattern_stack(t), weights);
  }

  struct PathNodes {
    std::vector<int> x;
    std::vector<int> q;      // empty unless rotation requested
    std::vector<int> log_s;  // empty unless scale requested
  };

  /// Tape twin of DynamicsModel::integrate_base_path. Substep times and
  /// arithmetic match the plain path exactly, so a trained model replays
  /// the same trajectory at evaluation time bit for bit.
  PathNodes integrate_path(const GaussianPrimitive& g, int weights,
                           std::span<const double> times, int n_per_unit,
                           bool with_rotation, bool with_scale) {
    PathNodes out;
    int x = tape_->constant_vec3(g.mu);
    int q = with_rotation
                ? tape_->constant({g.q.w, g.q.x, g.q.y, g.q.z})
                : -1;
    int log_s = with_scale ? tape_->constant_vec3(g.log_s) : -1;
    double cur = 0.0;
    for (double target : times) {
      require(std::isfinite(target) && target >= 0.0,
              "integrate_path: times must be finite and nonnegative");
      require(target >= cur, "integrate_path: times must be ascending");
      if (target > cur) {
        int nsub = substeps_for(target - cur, n_per_unit);
        double h = (target - cur) / nsub;
        for (int k = 0; k < nsub; ++k) {
          double t0 = cur + k * h;
          int w0 = coefficients(t0, weights);
          int v0 = tape_->affine_velocity(x, w0);
          int xm = tape_->axpy(x, v0, 0.5 * h);
          int wm = coefficients(t0 + 0.5 * h, weights);
          int vm = tape_->affine_velocity(xm, wm);
          x = tape_->axpy(x, vm, h);
          if (with_rotation) {
            int om = tape_->slice(wm, 3, 3);
            int dq = tape_->quat_exp_omega(om, 0.5 * h);
            q = tape_->normalize(tape_->quat_mul(dq, q));
          }
          if (with_scale)
            log_s = tape_->axpy(log_s, tape_->slice(wm, 6, 3), h);
        }
        cur = target;
      }
      out.x.push_back(x);
      if (with_rotation) out.q.push_back(q);
      if (with_scale) out.log_s.push_back(log_s);
    }
    return out;
  }

 private:
  const DynamicsModel* model_;
  Tape* tape_;
  std::unordered_map<std::uint64_t, int> stacks_;
};

}  // namespace flowsplat
