#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flowsplat/checkpoint.hpp"
#include "flowsplat/dynamics.hpp"
#include "flowsplat/physics.hpp"
#include "flowsplat/render.hpp"
#include "flowsplat/scene.hpp"

namespace flowsplat {

// ---------------------------------------------------------------- config

/// Everything a training run needs. The JSON form mirrors the field names
/// one to one; only "scene" is mandatory in a config file.
struct TrainConfig {
  std::string scene;
  std::string out_checkpoint = "checkpoint.json";
  std::string out_log = "loss_curve.csv";
  int iterations = 5000;
  double learning_rate = 1e-3;
  double lr_decay = 1.0;  // lr fraction reached at the final iteration
  int patterns = 32;   // mixture size of the shared motion patterns
  int code_dim = 16;   // per-particle code width
  int n_steps = 32;    // RK2 substeps per unit of integrated time
  double lambda_transport = 0.01;
  double lambda_div = 0.001;
  double lambda_res = 1e-3;
  int collocation_batch = 256;
  int trajectory_batch = 1024;  // particle-time samples per iteration
  std::uint64_t seed = 1;
  double warmup = 0.2;  // fraction of iterations to ramp the loss weights
  bool disable_pds = false;  // unstructured velocity net instead of patterns
  bool disable_adf = false;  // no residual deformation on top of the base
  bool disable_gpc = false;  // no physics constraint losses
  bool freeze_base = false;  // pin the base motion at canonical (residual only)
  int hidden_width = 64;
  int hidden_depth = 3;
  int residual_width = 128;
  int residual_depth = 4;
  int space_freqs = 6;
  int time_freqs = 6;

  void validate() const {
    require(iterations >= 0, "TrainConfig: iterations must be >= 0");
    require(std::isfinite(learning_rate) && learning_rate > 0.0,
            "TrainConfig: learning_rate must be positive");
    require(std::isfinite(lr_decay) && lr_decay > 0.0 && lr_decay <= 1.0,
            "TrainConfig: lr_decay must lie in (0, 1]");
    require(patterns >= 1, "TrainConfig: patterns must be >= 1");
    require(code_dim >= 1, "TrainConfig: code_dim must be >= 1");
    require(n_steps >= 1, "TrainConfig: n_steps must be >= 1");
    require(std::isfinite(lambda_transport) && lambda_transport >= 0.0 &&
                std::isfinite(lambda_div) && lambda_div >= 0.0 &&
                std::isfinite(lambda_res) && lambda_res >= 0.0,
            "TrainConfig: loss weights must be finite and nonnegative");
    require(collocation_batch >= 1,
            "TrainConfig: collocation_batch must be >= 1");
    require(trajectory_batch >= 1,
            "TrainConfig: trajectory_batch must be >= 1");
    require(std::isfinite(warmup) && warmup >= 0.0 && warmup <= 1.0,
            "TrainConfig: warmup must lie in [0, 1]");
    require(hidden_width >= 1 && hidden_depth >= 1,
            "TrainConfig: hidden layer shape must be positive");
    require(residual_width >= 1 && residual_depth >= 1,
            "TrainConfig: residual layer shape must be positive");
    require(space_freqs >= 1 && time_freqs >= 1,
            "TrainConfig: feature frequencies must be >= 1");
  }
};

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"scene", c.scene},
              {"out_checkpoint", c.out_checkpoint},
              {"out_log", c.out_log},
              {"iterations", c.iterations},
              {"learning_rate", c.learning_rate},
              {"lr_decay", c.lr_decay},
              {"patterns", c.patterns},
              {"code_dim", c.code_dim},
              {"n_steps", c.n_steps},
              {"lambda_transport", c.lambda_transport},
              {"lambda_div", c.lambda_div},
              {"lambda_res", c.lambda_res},
              {"collocation_batch", c.collocation_batch},
              {"trajectory_batch", c.trajectory_batch},
              {"seed", c.seed},
              {"warmup", c.warmup},
              {"disable_pds", c.disable_pds},
              {"disable_adf", c.disable_adf},
              {"disable_gpc", c.disable_gpc},
              {"freeze_base", c.freeze_base},
              {"hidden_width", c.hidden_width},
              {"hidden_depth", c.hidden_depth},
              {"residual_width", c.residual_width},
              {"residual_depth", c.residual_depth},
              {"space_freqs", c.space_freqs},
              {"time_freqs", c.time_freqs}};
}

inline TrainConfig train_config_from_json(const Json& j,
                                          const std::string& where) {
  TrainConfig c;
  c.scene = json_field<std::string>(j, "scene", where);
  c.out_checkpoint =
      json_field_or(j, "out_checkpoint", where, c.out_checkpoint);
  c.out_log = json_field_or(j, "out_log", where, c.out_log);
  c.iterations = json_field_or(j, "iterations", where, c.iterations);
  c.learning_rate = json_field_or(j, "learning_rate", where, c.learning_rate);
  c.lr_decay = json_field_or(j, "lr_decay", where, c.lr_decay);
  c.patterns = json_field_or(j, "patterns", where, c.patterns);
  c.code_dim = json_field_or(j, "code_dim", where, c.code_dim);
  c.n_steps = json_field_or(j, "n_steps", where, c.n_steps);
  c.lambda_transport =
      json_field_or(j, "lambda_transport", where, c.lambda_transport);
  c.lambda_div = json_field_or(j, "lambda_div", where, c.lambda_div);
  c.lambda_res = json_field_or(j, "lambda_res", where, c.lambda_res);
  c.collocation_batch =
      json_field_or(j, "collocation_batch", where, c.collocation_batch);
  c.trajectory_batch =
      json_field_or(j, "trajectory_batch", where, c.trajectory_batch);
  c.seed = json_field_or(j, "seed", where, c.seed);
  c.warmup = json_field_or(j, "warmup", where, c.warmup);
  c.disable_pds = json_field_or(j, "disable_pds", where, c.disable_pds);
  c.disable_adf = json_field_or(j, "disable_adf", where, c.disable_adf);
  c.disable_gpc = json_field_or(j, "disable_gpc", where, c.disable_gpc);
  c.freeze_base = json_field_or(j, "freeze_base", where, c.freeze_base);
  c.hidden_width = json_field_or(j, "hidden_width", where, c.hidden_width);
  c.hidden_depth = json_field_or(j, "hidden_depth", where, c.hidden_depth);
  c.residual_width =
      json_field_or(j, "residual_width", where, c.residual_width);
  c.residual_depth =
      json_field_or(j, "residual_depth", where, c.residual_depth);
  c.space_freqs = json_field_or(j, "space_freqs", where, c.space_freqs);
  c.time_freqs = json_field_or(j, "time_freqs", where, c.time_freqs);
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw ParseError(where + ": " + e.what());
  }
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json(load_json_file(path), path);
}

inline void save_train_config(const std::string& path, const TrainConfig& c) {
  save_json_file(path, train_config_to_json(c));
}

inline DynamicsSpec dynamics_spec(const TrainConfig& c) {
  DynamicsSpec s;
  s.K = c.patterns;
  s.L = c.code_dim;
  s.space_freqs = c.space_freqs;
  s.time_freqs = c.time_freqs;
  std::vector<int> hidden(static_cast<std::size_t>(c.hidden_depth),
                          c.hidden_width);
  s.encoder_hidden = hidden;
  s.pattern_hidden = hidden;
  s.accel_hidden = hidden;
  s.residual_hidden.assign(static_cast<std::size_t>(c.residual_depth),
                           c.residual_width);
  return s;
}

/// Linear ramp of the loss weights: exactly 0 at iteration 0 and exactly 1
/// from the end of the warmup window onwards.
inline double warmup_factor(const TrainConfig& c, int iteration) {
  int warm_iters =
      static_cast<int>(std::ceil(c.warmup * static_cast<double>(c.iterations)));
  if (warm_iters <= 0 || iteration >= warm_iters) return 1.0;
  return static_cast<double>(iteration) / static_cast<double>(warm_iters);
}

/// Exponential schedule from learning_rate down to learning_rate * lr_decay
/// at the last iteration. lr_decay = 1 keeps it constant.
inline double learning_rate_at(const TrainConfig& c, int iteration) {
  if (c.lr_decay == 1.0 || c.iterations <= 1) return c.learning_rate;
  double frac = static_cast<double>(iteration) /
                static_cast<double>(c.iterations - 1);
  return c.learning_rate * std::pow(c.lr_decay, frac);
}

// --------------------------------------------------------------- batches

/// k distinct indices out of [0, n), ascending. Fisher-Yates prefix over a
/// scratch permutation keeps the draw order independent of k.
inline std::vector<int> sample_index_subset(int n, int k, Rng& rng) {
  require(n >= 1, "sample_index_subset: empty range");
  k = std::clamp(k, 1, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.uniform() * static_cast<double>(n - i));
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[std::min(static_cast<std::size_t>(j), idx.size() - 1)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// One supervision batch: every sampled particle is compared at every
/// sampled training timestamp, so the integrator shares one substep grid
/// across the whole batch.
struct TrajectoryBatch {
  std::vector<int> particles;
  std::vector<int> ticks;  // indices into the training part of times

  int pairs() const {
    return static_cast<int>(particles.size() * ticks.size());
  }
};

inline TrajectoryBatch sample_trajectory_batch(const TrajectoryDataset& data,
                                               int n_particles, int target,
                                               Rng& rng) {
  require(n_particles >= 1, "sample_trajectory_batch: no particles");
  require(target >= 1, "sample_trajectory_batch: target must be >= 1");
  int n_train = static_cast<int>(data.train_count());
  int n_ticks = std::min(
      n_train, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(target)))));
  int n_parts = std::min(n_particles, (target + n_ticks - 1) / n_ticks);
  TrajectoryBatch b;
  b.particles = sample_index_subset(n_particles, n_parts, rng);
  b.ticks = sample_index_subset(n_train, n_ticks, rng);
  return b;
}

struct SpaceTimeProbe {
  Vec3 x;
  double t = 0.0;
};

inline std::vector<SpaceTimeProbe> sample_probes(const Aabb& box, double t0,
                                                 double t1, int n, Rng& rng) {
  require(box.valid(), "sample_probes: invalid box");
  require(t1 >= t0, "sample_probes: bad time range");
  require(n >= 1, "sample_probes: n must be >= 1");
  std::vector<SpaceTimeProbe> out(static_cast<std::size_t>(n));
  for (auto& p : out) {
    p.x = box.sample(rng);
    p.t = rng.uniform(t0, t1);
  }
  return out;
}

// ----------------------------------------------------------------- model

/// Central FD half-width for the time derivative of the field coefficients
/// and for the spatial Jacobian of the unstructured variant.
inline constexpr double kConstraintFdH = 1e-4;

/// Scalar term values of one training loss build. Indices are tape nodes;
/// -1 marks a term absent under the active ablation flags.
struct LossNodes {
  int total = -1;
  int reconstruction = -1;
  int transport = -1;
  int divergence = -1;
  int residual = -1;
};

/// The trainable motion representation behind one config: the full
/// pattern-mixture model, the unstructured velocity net (disable_pds), or
/// a canonical-pose base (freeze_base), each with an optional residual
/// deformation head. Parameters live in the caller's store; the object
/// itself only holds wiring.
class MotionModel {
 public:
  MotionModel(ParamStore& store, const TrainConfig& cfg, Rng& rng)
      : spec_(dynamics_spec(cfg)),
        direct_(cfg.disable_pds),
        frozen_(cfg.freeze_base),
        use_residual_(!cfg.disable_adf) {
    cfg.validate();
    if (!direct_) {
      pds_.emplace(store, spec_, rng);
      return;
    }
    int in_dim = spec_.space_dim() + spec_.time_dim() + spec_.L;
    encoder_ = Mlp(store, "encoder",
                   MlpSpec{spec_.space_dim(), spec_.encoder_hidden, spec_.L,
                           spec_.activation, false},
                   rng);
    velocity_ = Mlp(store, "velocity",
                    MlpSpec{in_dim, spec_.pattern_hidden, 3, spec_.activation,
                            spec_.zero_init_outputs},
                    rng);
    accel_ = Mlp(store, "accel",
                 MlpSpec{in_dim, spec_.accel_hidden, 3, spec_.activation,
                         spec_.zero_init_outputs},
                 rng);
    residual_ = Mlp(store, "residual",
                    MlpSpec{in_dim, spec_.residual_hidden, 10,
                            spec_.activation, spec_.zero_init_outputs},
                    rng);
  }

  const DynamicsSpec& spec() const { return spec_; }
  bool direct() const { return direct_; }
  bool frozen_base() const { return frozen_; }
  bool has_residual() const { return use_residual_; }

  /// Pattern-mixture internals, or nullptr for the unstructured variant.
  const DynamicsModel* pds() const { return pds_ ? &*pds_ : nullptr; }

  // --- plain evaluation ---

  PhysicsCode encode(const ParamStore& store, const Vec3& x0) const {
    if (!direct_) return pds_->encode(store, x0);
    PhysicsCode code;
    code.z = encoder_.forward_plain(store,
                                    space_features(x0, spec_.space_freqs));
    return code;
  }

  ResidualDeformation residual_at(const ParamStore& store, const Vec3& x0,
                                  double t, const PhysicsCode& code) const {
    require(use_residual_, "MotionModel::residual_at: residual disabled");
    if (!direct_) return pds_->residual_deformation(store, x0, t, code);
    auto raw = residual_.forward_plain(store, point_features(x0, t, code.z));
    return DynamicsModel::residual_from_raw(raw);
  }

  /// Full particle states at an ascending time list, residual included.
  std::vector<ParticleState> predict_path(const ParamStore& store,
                                          const GaussianPrimitive& g,
                                          std::span<const double> times,
                                          int n_per_unit) const {
    PhysicsCode code = encode(store, g.mu);
    std::vector<ParticleState> base;
    if (frozen_) {
      base.reserve(times.size());
      for (double t : times) base.push_back(canonical_state(g, t));
    } else if (direct_) {
      base = integrate_direct_path(store, g, code, times, n_per_unit);
    } else {
      base = pds_->integrate_base_path(store, g, code, times, n_per_unit);
    }
    if (!use_residual_) return base;
    for (std::size_t i = 0; i < base.size(); ++i)
      base[i] = DynamicsModel::compose_state(
          base[i], residual_at(store, g.mu, times[i], code));
    return base;
  }

  /// Mean squared transport residual and mean squared divergence over n
  /// fresh probes. Both are unweighted.
  std::pair<double, double> constraint_means(const ParamStore& store,
                                             const Aabb& box, double t0,
                                             double t1, int n, Rng& rng) const {
    if (!direct_) {
      auto pts = sample_collocation(*pds_, store, n, box, t0, t1,
                                    kConstraintFdH, rng);
      ConstraintLosses cl = constraint_loss(pts, 0.0, 0.0);
      return {cl.transport, cl.divergence};
    }
    double sum_t = 0.0, sum_d = 0.0;
    double inv = 1.0 / (2.0 * kConstraintFdH);
    for (int i = 0; i < n; ++i) {
      Vec3 x = box.sample(rng);
      double t = rng.uniform(t0, t1);
      PhysicsCode code = encode(store, x);
      Vec3 v = direct_velocity(store, x, t, code.z);
      Vec3 dvdt = (direct_velocity(store, x, t + kConstraintFdH, code.z) -
                   direct_velocity(store, x, t - kConstraintFdH, code.z)) *
                  inv;
      std::array<Vec3, 3> cols;
      for (int a = 0; a < 3; ++a)
        cols[static_cast<std::size_t>(a)] =
            (direct_velocity(store, shifted(x, a, kConstraintFdH), t,
                             code.z) -
             direct_velocity(store, shifted(x, a, -kConstraintFdH), t,
                             code.z)) *
            inv;
      Vec3 conv = cols[0] * v.x + cols[1] * v.y + cols[2] * v.z;
      Vec3 a_pred = direct_acceleration(store, x, t, code.z);
      sum_t += norm2(dvdt + conv - a_pred);
      double div = cols[0].x + cols[1].y + cols[2].z;
      sum_d += div * div;
    }
    double invn = 1.0 / static_cast<double>(n);
    return {sum_t * invn, sum_d * invn};
  }

  // --- tape builders ---

  struct CodeNode {
    int z = -1;
    int weights = -1;  // -1 for the unstructured variant
  };

  CodeNode build_code(Tape& tape, const Vec3& x0) const {
    if (!direct_) {
      auto c = pds_->build_code(tape, x0);
      return {c.z, c.weights};
    }
    int in = tape.constant(space_features(x0, spec_.space_freqs));
    return {encoder_.build(tape, in), -1};
  }

  int build_residual_raw(Tape& tape, const Vec3& x0, double t, int z) const {
    if (!direct_) return pds_->build_residual_raw(tape, x0, t, z);
    auto in = space_features(x0, spec_.space_freqs);
    auto tf = time_features(t, spec_.time_freqs);
    in.insert(in.end(), tf.begin(), tf.end());
    return residual_.build(tape, tape.concat({tape.constant(in), z}));
  }

  /// Base position node at each time; the substep grid matches the plain
  /// integrator exactly.
  std::vector<int> build_position_path(DynamicsGraph* graph, Tape& tape,
                                       const GaussianPrimitive& g,
                                       const CodeNode& code,
                                       std::span<const double> times,
                                       int n_per_unit) const {
    if (frozen_) {
      int x = tape.constant_vec3(g.mu);
      return std::vector<int>(times.size(), x);
    }
    if (!direct_) {
      require(graph != nullptr, "build_position_path: graph required");
      return graph->integrate_path(g, code.weights, times, n_per_unit,
                                   false, false)
          .x;
    }
    std::vector<int> out;
    out.reserve(times.size());
    int x = tape.constant_vec3(g.mu);
    double cur = 0.0;
    for (double target : times) {
      require(std::isfinite(target) && target >= cur,
              "build_position_path: times must be ascending");
      if (target > cur) {
        int nsub = substeps_for(target - cur, n_per_unit);
        double h = (target - cur) / nsub;
        for (int k = 0; k < nsub; ++k) {
          double t0 = cur + k * h;
          int v0 = build_direct_velocity(tape, x, t0, code.z);
          int xm = tape.axpy(x, v0, 0.5 * h);
          int vm = build_direct_velocity(tape, xm, t0 + 0.5 * h, code.z);
          x = tape.axpy(x, vm, h);
        }
        cur = target;
      }
      out.push_back(x);
    }
    return out;
  }

  CollocationNodes build_constraints(DynamicsGraph* graph, Tape& tape,
                                     const SpaceTimeProbe& p) const {
    if (!direct_) {
      require(graph != nullptr, "build_constraints: graph required");
      return build_collocation_residuals(*graph, p.x, p.t, kConstraintFdH);
    }
    CodeNode code = build_code(tape, p.x);
    auto vel_at = [&](const Vec3& xx, double tt) {
      return build_direct_velocity(tape, tape.constant_vec3(xx), tt, code.z);
    };
    double inv = 1.0 / (2.0 * kConstraintFdH);
    int v = vel_at(p.x, p.t);
    int dvdt = tape.scale(tape.sub(vel_at(p.x, p.t + kConstraintFdH),
                                   vel_at(p.x, p.t - kConstraintFdH)),
                          inv);
    std::array<int, 3> cols{};
    for (int a = 0; a < 3; ++a)
      cols[static_cast<std::size_t>(a)] = tape.scale(
          tape.sub(vel_at(shifted(p.x, a, kConstraintFdH), p.t),
                   vel_at(shifted(p.x, a, -kConstraintFdH), p.t)),
          inv);
    // Row a holds dv/dx_a, so v . rows contracts to (v . grad) v.
    int jac = tape.concat({cols[0], cols[1], cols[2]});
    int conv = tape.vecmat(v, jac, 3, 3);
    int a_in = tape.concat(
        {tape.constant(space_features(p.x, spec_.space_freqs)),
         tape.constant(time_features(p.t, spec_.time_freqs)), code.z});
    int a_pred = accel_.build(tape, a_in);
    CollocationNodes out;
    out.transport = tape.sub(tape.add(dvdt, conv), a_pred);
    out.divergence = tape.add(tape.add(tape.slice(cols[0], 0, 1),
                                       tape.slice(cols[1], 1, 1)),
                              tape.slice(cols[2], 2, 1));
    return out;
  }

  /// One full training loss graph. The batch supervises positions, the
  /// probes feed the physics terms and the raw residual output is kept
  /// small by its own penalty. warm scales all three auxiliary weights.
  LossNodes build_training_loss(Tape& tape, const Scene& scene,
                                const TrajectoryBatch& batch,
                                std::span<const SpaceTimeProbe> probes,
                                double warm, const TrainConfig& cfg) const {
    require(batch.pairs() > 0, "build_training_loss: empty batch");
    std::optional<DynamicsGraph> graph;
    if (!direct_) graph.emplace(*pds_, tape);
    DynamicsGraph* gp = graph ? &*graph : nullptr;
    std::vector<double> ts;
    ts.reserve(batch.ticks.size());
    for (int k : batch.ticks)
      ts.push_back(scene.data.times[static_cast<std::size_t>(k)]);
    int recon_acc = -1, res_acc = -1;
    for (int p : batch.particles) {
      const GaussianPrimitive& g =
          scene.particles[static_cast<std::size_t>(p)];
      CodeNode code = build_code(tape, g.mu);
      auto xs = build_position_path(gp, tape, g, code, ts, cfg.n_steps);
      for (std::size_t i = 0; i < ts.size(); ++i) {
        int x = xs[i];
        if (use_residual_) {
          int raw = build_residual_raw(tape, g.mu, ts[i], code.z);
          x = tape.add(x, tape.slice(raw, 0, 3));
          int rs = tape.sum_sq(raw);
          res_acc = res_acc < 0 ? rs : tape.add(res_acc, rs);
        }
        const Vec3& gt =
            scene.data.positions[static_cast<std::size_t>(p)]
                                [static_cast<std::size_t>(batch.ticks[i])];
        int sq = tape.sum_sq(tape.sub(x, tape.constant_vec3(gt)));
        recon_acc = recon_acc < 0 ? sq : tape.add(recon_acc, sq);
      }
    }
    double inv_pairs = 1.0 / static_cast<double>(batch.pairs());
    LossNodes out;
    out.reconstruction = tape.scale(recon_acc, inv_pairs);
    out.total = out.reconstruction;
    if (!probes.empty()) {
      int t_acc = -1, d_acc = -1;
      for (const SpaceTimeProbe& p : probes) {
        CollocationNodes cn = build_constraints(gp, tape, p);
        int tsq = tape.sum_sq(cn.transport);
        t_acc = t_acc < 0 ? tsq : tape.add(t_acc, tsq);
        int dsq = tape.sum_sq(cn.divergence);
        d_acc = d_acc < 0 ? dsq : tape.add(d_acc, dsq);
      }
      double invn = 1.0 / static_cast<double>(probes.size());
      out.transport = tape.scale(t_acc, invn);
      out.divergence = tape.scale(d_acc, invn);
      out.total = tape.add(
          out.total, tape.scale(out.transport, warm * cfg.lambda_transport));
      out.total = tape.add(out.total,
                           tape.scale(out.divergence, warm * cfg.lambda_div));
    }
    if (res_acc >= 0) {
      out.residual = tape.scale(res_acc, inv_pairs);
      out.total = tape.add(out.total,
                           tape.scale(out.residual, warm * cfg.lambda_res));
    }
    return out;
  }

 private:
  DynamicsSpec spec_;
  bool direct_ = false;
  bool frozen_ = false;
  bool use_residual_ = true;
  std::optional<DynamicsModel> pds_;
  Mlp encoder_, velocity_, accel_, residual_;  // unstructured variant only

  static ParticleState canonical_state(const GaussianPrimitive& g, double t) {
    ParticleState st;
    st.t = t;
    st.x_base = g.mu;
    st.q_base = g.q;
    st.s_base = g.scale();
    st.x = st.x_base;
    st.q = st.q_base;
    st.s = st.s_base;
    return st;
  }

  static Vec3 shifted(Vec3 x, int axis, double d) {
    if (axis == 0)
      x.x += d;
    else if (axis == 1)
      x.y += d;
    else
      x.z += d;
    return x;
  }

  std::vector<double> point_features(const Vec3& x, double t,
                                     std::span<const double> z) const {
    auto in = space_features(x, spec_.space_freqs);
    auto tf = time_features(t, spec_.time_freqs);
    in.insert(in.end(), tf.begin(), tf.end());
    in.insert(in.end(), z.begin(), z.end());
    return in;
  }

  Vec3 direct_velocity(const ParamStore& store, const Vec3& x, double t,
                       std::span<const double> z) const {
    auto v = velocity_.forward_plain(store, point_features(x, t, z));
    return {v[0], v[1], v[2]};
  }

  Vec3 direct_acceleration(const ParamStore& store, const Vec3& x, double t,
                           std::span<const double> z) const {
    auto a = accel_.forward_plain(store, point_features(x, t, z));
    return {a[0], a[1], a[2]};
  }

  int build_direct_velocity(Tape& tape, int x, double t, int z) const {
    int sf = tape.pos_enc(x, spec_.space_freqs);
    int tf = tape.constant(time_features(t, spec_.time_freqs));
    return velocity_.build(tape, tape.concat({sf, tf, z}));
  }

  std::vector<ParticleState> integrate_direct_path(
      const ParamStore& store, const GaussianPrimitive& g,
      const PhysicsCode& code, std::span<const double> times,
      int n_per_unit) const {
    std::vector<ParticleState> out;
    out.reserve(times.size());
    Vec3 x = g.mu;
    double cur = 0.0;
    for (double target : times) {
      require(std::isfinite(target) && target >= cur,
              "integrate_direct_path: times must be ascending");
      if (target > cur) {
        int nsub = substeps_for(target - cur, n_per_unit);
        double h = (target - cur) / nsub;
        for (int k = 0; k < nsub; ++k) {
          double t0 = cur + k * h;
          Vec3 v0 = direct_velocity(store, x, t0, code.z);
          Vec3 xm = x + v0 * (0.5 * h);
          Vec3 vm = direct_velocity(store, xm, t0 + 0.5 * h, code.z);
          x = x + vm * h;
        }
        cur = target;
      }
      ParticleState st = canonical_state(g, target);
      st.x_base = x;
      st.x = x;
      out.push_back(st);
    }
    return out;
  }
};

// ----------------------------------------------------------------- train

/// Collocation probes reach this far past the supervised horizon so the
/// physics terms keep shaping the field where extrapolation happens.
inline constexpr double kProbeTimeStretch = 1.4;

inline constexpr double kLossDivergenceLimit = 1e6;

struct LossRow {
  int iteration = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double transport = 0.0;
  double divergence = 0.0;
  double residual = 0.0;
};

struct TrainResult {
  std::vector<LossRow> curve;
  Json checkpoint;
  bool aborted = false;
  int abort_iteration = -1;
  std::string abort_reason;
};

namespace detail {

inline std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline void write_loss_csv(const std::string& path,
                           std::span<const LossRow> curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << "iteration,total,reconstruction,transport,divergence,residual\n";
  for (const LossRow& r : curve)
    out << r.iteration << ',' << detail::csv_double(r.total) << ','
        << detail::csv_double(r.reconstruction) << ','
        << detail::csv_double(r.transport) << ','
        << detail::csv_double(r.divergence) << ','
        << detail::csv_double(r.residual) << '\n';
  if (!out) throw ParseError(path + ": write failed");
}

/// Runs the optimization loop for one config and keeps the trained state
/// around afterwards so callers can evaluate without a reload. A run that
/// goes non-finite or past the divergence limit stops and rolls the store
/// back to the newest parameters that produced an acceptable loss.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Scene& scene)
      : cfg_(cfg), scene_(&scene) {
    cfg_.validate();
    scene.data.validate();
    require(!scene.particles.empty(), "Trainer: scene has no particles");
    require(scene.data.positions.size() == scene.particles.size(),
            "Trainer: trajectory rows do not match the particle count");
    Rng init = Rng(cfg_.seed).fork(1);
    model_.emplace(store_, cfg_, init);
    opt_ = Adam(store_.size(),
                AdamConfig{cfg_.learning_rate, 0.9, 0.999, 1e-8});
    box_ = scene_bounds(scene).inflated(0.1);
    snap_params_ = store_.raw();
    snap_m_ = opt_.m();
    snap_v_ = opt_.v();
    snap_t_ = opt_.t();
  }

  const TrainConfig& config() const { return cfg_; }
  const MotionModel& model() const { return *model_; }
  const ParamStore& store() const { return store_; }
  ParamStore& store() { return store_; }
  const Adam& optimizer() const { return opt_; }

  TrainResult run() {
    TrainResult res;
    Rng rng = Rng(cfg_.seed).fork(2);
    Tape tape(store_);
    int n_train = static_cast<int>(scene_->data.train_count());
    double t_hi =
        scene_->data.times[static_cast<std::size_t>(n_train - 1)] *
        kProbeTimeStretch;
    int n_particles = static_cast<int>(scene_->particles.size());
    for (int it = 0; it < cfg_.iterations; ++it) {
      tape.reset();
      tape.zero_grads();
      TrajectoryBatch batch = sample_trajectory_batch(
          scene_->data, n_particles, cfg_.trajectory_batch, rng);
      std::vector<SpaceTimeProbe> probes;
      if (!cfg_.disable_gpc)
        probes = sample_probes(box_, 0.0, t_hi, cfg_.collocation_batch, rng);
      double warm = warmup_factor(cfg_, it);
      LossNodes ln =
          model_->build_training_loss(tape, *scene_, batch, probes, warm,
                                      cfg_);
      LossRow row;
      row.iteration = it;
      row.total = tape.scalar(ln.total);
      row.reconstruction = tape.scalar(ln.reconstruction);
      row.transport = ln.transport >= 0 ? tape.scalar(ln.transport) : 0.0;
      row.divergence = ln.divergence >= 0 ? tape.scalar(ln.divergence) : 0.0;
      row.residual = ln.residual >= 0 ? tape.scalar(ln.residual) : 0.0;
      res.curve.push_back(row);
      if (const char* term = nan_term(row)) {
        abort_run(res, it,
                  std::string("aborted: ") + term + " loss is NaN at iteration " +
                      std::to_string(it));
        return res;
      }
      if (!(row.total <= kLossDivergenceLimit)) {
        abort_run(res, it,
                  "aborted: loss diverged at iteration " + std::to_string(it) +
                      " (total=" + detail::csv_double(row.total) + ")");
        return res;
      }
      take_snapshot();
      tape.backward(ln.total);
      opt_.set_lr(learning_rate_at(cfg_, it));
      opt_.step(store_.raw(), tape.param_grads());
    }
    res.checkpoint = make_checkpoint();
    return res;
  }

 private:
  TrainConfig cfg_;
  const Scene* scene_;
  ParamStore store_;
  std::optional<MotionModel> model_;
  Adam opt_;
  Aabb box_;
  std::vector<double> snap_params_, snap_m_, snap_v_;
  long long snap_t_ = 0;

  static const char* nan_term(const LossRow& r) {
    if (std::isnan(r.reconstruction)) return "reconstruction";
    if (std::isnan(r.transport)) return "transport";
    if (std::isnan(r.divergence)) return "divergence";
    if (std::isnan(r.residual)) return "residual";
    if (std::isnan(r.total)) return "total";
    return nullptr;
  }

  void take_snapshot() {
    snap_params_ = store_.raw();
    snap_m_ = opt_.m();
    snap_v_ = opt_.v();
    snap_t_ = opt_.t();
  }

  void abort_run(TrainResult& res, int it, std::string reason) {
    store_.raw() = snap_params_;
    opt_.restore(snap_m_, snap_v_, snap_t_);
    res.aborted = true;
    res.abort_iteration = it;
    res.abort_reason = std::move(reason);
    res.checkpoint = make_checkpoint();
  }

  Json make_checkpoint() const {
    Json meta{{"config", train_config_to_json(cfg_)}};
    return checkpoint_to_json(store_, &opt_, meta);
  }
};

inline TrainResult train(const TrainConfig& cfg, const Scene& scene) {
  return Trainer(cfg, scene).run();
}

// -------------------------------------------------------------- evaluate

enum class Phase { kInterp, kExtrap };

inline const char* phase_name(Phase p) {
  return p == Phase::kInterp ? "interp" : "extrap";
}

inline Phase phase_from_name(const std::string& tag,
                             const std::string& where) {
  if (tag == "interp") return Phase::kInterp;
  if (tag == "extrap") return Phase::kExtrap;
  throw ParseError(where + ": unknown phase \"" + tag + "\"");
}

struct EvalConfig {
  int image_size = 96;
  double fov_y_deg = 45.0;
  int collocation = 256;
  std::uint64_t seed = 7;
  int n_workers = 1;
};

struct MetricsRow {
  Phase phase = Phase::kInterp;
  double pos_err = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double l_transport = 0.0;
  double l_div = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsCsvHeader =
    "phase,pos_err,psnr,ssim,l_transport,l_div,seconds";

inline std::string metrics_csv_row(const MetricsRow& r) {
  return std::string(phase_name(r.phase)) + ',' +
         detail::csv_double(r.pos_err) + ',' + detail::csv_double(r.psnr) +
         ',' + detail::csv_double(r.ssim) + ',' +
         detail::csv_double(r.l_transport) + ',' +
         detail::csv_double(r.l_div) + ',' + detail::csv_double(r.seconds);
}

inline void write_metrics_csv(const std::string& path,
                              std::span<const MetricsRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << kMetricsCsvHeader << '\n';
  for (const MetricsRow& r : rows) out << metrics_csv_row(r) << '\n';
  if (!out) throw ParseError(path + ": write failed");
}

/// One fixed vantage point on an orbit around the scene, looking at its
/// center from an oblique above-and-beside direction.
inline Camera orbit_camera(const Aabb& bounds, int width, int height,
                           double fov_y_deg) {
  require(bounds.valid(), "orbit_camera: invalid bounds");
  Vec3 center = (bounds.lo + bounds.hi) * 0.5;
  double radius = std::max(0.5 * norm(bounds.hi - bounds.lo), 0.25);
  Vec3 dir{0.85, -0.95, 0.6};
  Vec3 position = center + dir * (2.6 * radius / norm(dir));
  return look_at_camera(position, center, width, height, fov_y_deg);
}

/// Scores one phase of a scene: mean position error over the phase
/// timestamps, image quality of the predicted states rendered against the
/// ground-truth states from the shared orbit camera, and the two physics
/// residual means over fresh probes. seconds is wall clock and is the one
/// field that is not reproducible bit for bit.
inline MetricsRow evaluate(const MotionModel& model, const ParamStore& store,
                           const Scene& scene, Phase phase, int n_steps,
                           const EvalConfig& ecfg = {}) {
  require(n_steps >= 1, "evaluate: n_steps must be >= 1");
  require(ecfg.image_size >= 11, "evaluate: image_size must be >= 11");
  require(ecfg.collocation >= 1, "evaluate: collocation must be >= 1");
  auto t_start = std::chrono::steady_clock::now();
  const TrajectoryDataset& data = scene.data;
  data.validate();
  require(data.positions.size() == scene.particles.size(),
          "evaluate: trajectory rows do not match the particle count");
  int n_train = static_cast<int>(data.train_count());
  int n_times = static_cast<int>(data.times.size());
  int k0 = phase == Phase::kInterp ? 0 : n_train;
  int k1 = phase == Phase::kInterp ? n_train : n_times;
  std::vector<double> ts(data.times.begin() + k0, data.times.begin() + k1);
  int n_ticks = static_cast<int>(ts.size());
  int n_particles = static_cast<int>(scene.particles.size());

  std::vector<std::vector<ParticleState>> paths;
  paths.reserve(static_cast<std::size_t>(n_particles));
  double err_sum = 0.0;
  for (int i = 0; i < n_particles; ++i) {
    const GaussianPrimitive& g = scene.particles[static_cast<std::size_t>(i)];
    paths.push_back(model.predict_path(store, g, ts, n_steps));
    for (int j = 0; j < n_ticks; ++j)
      err_sum += norm(paths.back()[static_cast<std::size_t>(j)].x -
                      data.positions[static_cast<std::size_t>(i)]
                                    [static_cast<std::size_t>(k0 + j)]);
  }

  Camera cam = orbit_camera(scene_bounds(scene), ecfg.image_size,
                            ecfg.image_size, ecfg.fov_y_deg);
  double psnr_sum = 0.0, ssim_sum = 0.0;
  std::vector<GaussianPrimitive> pred(static_cast<std::size_t>(n_particles));
  std::vector<GaussianPrimitive> truth(static_cast<std::size_t>(n_particles));
  for (int j = 0; j < n_ticks; ++j) {
    for (int i = 0; i < n_particles; ++i) {
      const GaussianPrimitive& g =
          scene.particles[static_cast<std::size_t>(i)];
      pred[static_cast<std::size_t>(i)] = state_primitive(
          paths[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], g);
      GaussianPrimitive gt = g;
      gt.mu = data.positions[static_cast<std::size_t>(i)]
                            [static_cast<std::size_t>(k0 + j)];
      if (!data.rotations.empty())
        gt.q = data.rotations[static_cast<std::size_t>(i)]
                             [static_cast<std::size_t>(k0 + j)];
      if (!data.scales.empty()) {
        const Vec3& s = data.scales[static_cast<std::size_t>(i)]
                                   [static_cast<std::size_t>(k0 + j)];
        gt.log_s = {std::log(s.x), std::log(s.y), std::log(s.z)};
      }
      truth[static_cast<std::size_t>(i)] = gt;
    }
    Image img_pred = render(pred, cam, ecfg.n_workers);
    Image img_true = render(truth, cam, ecfg.n_workers);
    psnr_sum += psnr(img_pred, img_true);
    ssim_sum += ssim(img_pred, img_true);
  }

  Rng rng(ecfg.seed);
  Aabb box = scene_bounds(scene).inflated(0.1);
  auto [l_t, l_d] = model.constraint_means(store, box, ts.front(), ts.back(),
                                           ecfg.collocation, rng);

  MetricsRow row;
  row.phase = phase;
  double inv = 1.0 / static_cast<double>(n_particles * n_ticks);
  row.pos_err = err_sum * inv;
  row.psnr = psnr_sum / static_cast<double>(n_ticks);
  row.ssim = ssim_sum / static_cast<double>(n_ticks);
  row.l_transport = l_t;
  row.l_div = l_d;
  row.seconds = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t_start)
                    .count();
  return row;
}

// ------------------------------------------------------------ checkpoint

/// A model rebuilt from a checkpoint: the config that trained it, a store
/// holding the restored parameters and the wiring around them.
struct LoadedModel {
  TrainConfig cfg;
  ParamStore store;
  MotionModel model;

  explicit LoadedModel(TrainConfig c)
      : cfg(std::move(c)), store(), model([&] {
          Rng rng = Rng(cfg.seed).fork(1);
          return MotionModel(store, cfg, rng);
        }()) {}
};

inline LoadedModel model_from_checkpoint(const Json& ckpt,
                                         const std::string& where) {
  const Json& meta = detail::sub_field(ckpt, "meta", where);
  TrainConfig cfg = train_config_from_json(
      detail::sub_field(meta, "config", where), where + ": meta.config");
  LoadedModel out(std::move(cfg));
  checkpoint_from_json(ckpt, out.store, nullptr, where);
  return out;
}

inline LoadedModel load_model(const std::string& path) {
  return model_from_checkpoint(load_json_file(path), path);
}

inline TrainResult run_training(const TrainConfig& cfg) {
  if (cfg.scene.empty()) throw TrainError("train: config has no scene path");
  Scene scene = load_scene(cfg.scene);
  Trainer trainer(cfg, scene);
  TrainResult res = trainer.run();
  if (!cfg.out_log.empty()) write_loss_csv(cfg.out_log, res.curve);
  if (!cfg.out_checkpoint.empty())
    save_json_file(cfg.out_checkpoint, res.checkpoint);
  return res;
}

// ---------------------------------------------------------------- ablate

inline constexpr std::array<const char*, 5> kAblationVariants{
    "full", "no_pds", "no_adf", "no_gpc", "adf_only"};

/// Maps a variant tag onto the flag combination it stands for. The base
/// config's own ablation flags are cleared first.
inline TrainConfig variant_config(TrainConfig cfg, const std::string& tag) {
  cfg.disable_pds = false;
  cfg.disable_adf = false;
  cfg.disable_gpc = false;
  cfg.freeze_base = false;
  if (tag == "full") return cfg;
  if (tag == "no_pds") {
    cfg.disable_pds = true;
    return cfg;
  }
  if (tag == "no_adf") {
    cfg.disable_adf = true;
    return cfg;
  }
  if (tag == "no_gpc") {
    cfg.disable_gpc = true;
    return cfg;
  }
  if (tag == "adf_only") {
    cfg.freeze_base = true;
    cfg.disable_gpc = true;
    return cfg;
  }
  throw ParseError("variant_config: unknown variant \"" + tag + "\"");
}

struct AblationRun {
  std::string variant;
  MetricsRow extrap;
  bool aborted = false;
};

/// Trains every variant from the same config and seed and scores its
/// extrapolation half. Rows come back in kAblationVariants order.
inline std::vector<AblationRun> ablate(const Scene& scene,
                                       const TrainConfig& base,
                                       const EvalConfig& ecfg = {}) {
  std::vector<AblationRun> out;
  out.reserve(kAblationVariants.size());
  for (const char* tag : kAblationVariants) {
    TrainConfig cfg = variant_config(base, tag);
    Trainer trainer(cfg, scene);
    TrainResult res = trainer.run();
    AblationRun run;
    run.variant = tag;
    run.aborted = res.aborted;
    run.extrap = evaluate(trainer.model(), trainer.store(), scene,
                          Phase::kExtrap, cfg.n_steps, ecfg);
    out.push_back(std::move(run));
  }
  return out;
}

inline void write_ablation_csv(const std::string& path,
                               std::span<const AblationRun> runs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << "variant," << kMetricsCsvHeader << '\n';
  for (const AblationRun& r : runs)
    out << r.variant << ',' << metrics_csv_row(r.extrap) << '\n';
  if (!out) throw ParseError(path + ": write failed");
}

}  // namespace flowsplat
