#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flowsplat/affine.hpp"
#include "flowsplat/checkpoint.hpp"
#include "flowsplat/error.hpp"
#include "flowsplat/math.hpp"
#include "flowsplat/rng.hpp"

namespace flowsplat {

enum class ShapeKind { kBall, kBox, kShell };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kBall:  return "ball";
    case ShapeKind::kBox:   return "box";
    case ShapeKind::kShell: return "shell";
  }
  throw ContractViolation("shape_name: bad enum");
}

inline ShapeKind shape_from_name(const std::string& tag,
                                 const std::string& where) {
  if (tag == "ball") return ShapeKind::kBall;
  if (tag == "box") return ShapeKind::kBox;
  if (tag == "shell") return ShapeKind::kShell;
  throw ParseError(where + ": unknown shape \"" + tag + "\"");
}

/// Closed-form motion laws. The affine family integrates exactly through
/// the flow map of xdot = A x + b; wave laws displace each particle by
/// amplitude * sin(2 pi f t + dot(wave, anchor)). `hybrid` composes a
/// rigid rotation with a wave.
struct MotionLaw {
  enum class Kind {
    kTranslation,
    kRotation,
    kStretch,
    kShear,
    kAffine,
    kSinusoid,
    kHybrid
  };

  Kind kind = Kind::kTranslation;
  Vec3 b;               // translation velocity
  Vec3 omega;           // angular velocity (rotation, hybrid)
  Vec3 pivot;           // fixed point of rotation / stretch / shear
  Vec3 rates;           // stretch per-axis rates, or shear (xy, yz, xz)
  Mat3 matrix;          // affine: full velocity matrix A
  Vec3 amplitude;       // wave displacement amplitude
  double frequency = 0.0;  // wave cycles per unit time
  Vec3 wave;            // phase(x) = dot(wave, x)

  bool has_affine_part() const { return kind != Kind::kSinusoid; }
  bool has_wave_part() const {
    return kind == Kind::kSinusoid || kind == Kind::kHybrid;
  }
};

inline const char* motion_kind_name(MotionLaw::Kind k) {
  switch (k) {
    case MotionLaw::Kind::kTranslation: return "translation";
    case MotionLaw::Kind::kRotation:    return "rotation";
    case MotionLaw::Kind::kStretch:     return "stretch";
    case MotionLaw::Kind::kShear:       return "shear";
    case MotionLaw::Kind::kAffine:      return "affine";
    case MotionLaw::Kind::kSinusoid:    return "sinusoid";
    case MotionLaw::Kind::kHybrid:      return "hybrid";
  }
  throw ContractViolation("motion_kind_name: bad enum");
}

inline MotionLaw::Kind motion_kind_from(const std::string& tag,
                                        const std::string& where) {
  for (MotionLaw::Kind k :
       {MotionLaw::Kind::kTranslation, MotionLaw::Kind::kRotation,
        MotionLaw::Kind::kStretch, MotionLaw::Kind::kShear,
        MotionLaw::Kind::kAffine, MotionLaw::Kind::kSinusoid,
        MotionLaw::Kind::kHybrid}) {
    if (tag == motion_kind_name(k)) return k;
  }
  throw ParseError(where + ": unknown motion kind \"" + tag + "\"");
}

/// The law's affine velocity field v = A x + b. Rotation about a pivot p
/// contributes b = -omega x p so that p stays fixed.
inline AffineField motion_field(const MotionLaw& law) {
  AffineField f;
  switch (law.kind) {
    case MotionLaw::Kind::kTranslation:
      f.a = Mat3::zero();
      f.b = law.b;
      return f;
    case MotionLaw::Kind::kRotation:
    case MotionLaw::Kind::kHybrid:
      f.a = Mat3::from_rows({0.0, -law.omega.z, law.omega.y},
                            {law.omega.z, 0.0, -law.omega.x},
                            {-law.omega.y, law.omega.x, 0.0});
      f.b = -cross(law.omega, law.pivot);
      return f;
    case MotionLaw::Kind::kStretch:
      f.a = Mat3::diag(law.rates);
      f.b = -(f.a * law.pivot);
      return f;
    case MotionLaw::Kind::kShear:
      f.a = Mat3::from_rows({0.0, law.rates.x, law.rates.z},
                            {law.rates.x, 0.0, law.rates.y},
                            {law.rates.z, law.rates.y, 0.0});
      f.b = -(f.a * law.pivot);
      return f;
    case MotionLaw::Kind::kAffine:
      f.a = law.matrix;
      f.b = law.b;
      return f;
    case MotionLaw::Kind::kSinusoid:
      throw ContractViolation("motion_field: wave-only law has no affine part");
  }
  throw ContractViolation("motion_field: bad enum");
}

/// Basis weights w with velocity(x, w) = A x + b of the law's affine part.
inline AffineWeights implied_weights(const MotionLaw& law) {
  return weights_from_field(motion_field(law));
}

/// Closed-form position at time t of the particle anchored at `anchor`.
/// Affine parts integrate through the exact flow map; wave parts add
/// amplitude * sin(2 pi f t + dot(wave, anchor)).
inline Vec3 motion_position(const MotionLaw& law, const Vec3& anchor,
                            double t) {
  Vec3 x = anchor;
  if (law.has_affine_part()) {
    AffineField f = motion_field(law);
    AffineFlow flow = affine_flow(f.a, f.b, t);
    x = flow.phi * anchor + flow.offset;
  }
  if (law.has_wave_part())
    x += law.amplitude *
         std::sin(2.0 * kPi * law.frequency * t + dot(law.wave, anchor));
  return x;
}

struct GroupSpec {
  std::size_t count = 1;
  ShapeKind shape = ShapeKind::kBall;
  Vec3 center;
  Vec3 extent{0.5, 0.5, 0.5};  // ball/shell read extent.x as the radius
  Vec3 color{0.8, 0.8, 0.8};
  double color_jitter = 0.0;
  double alpha = 1.0;
  double log_scale_lo = std::log(0.02);
  double log_scale_hi = std::log(0.06);
  MotionLaw motion;

  void validate() const {
    require(count >= 1 && count <= 1000000, "GroupSpec: bad particle count");
    require(extent.x > 0.0 && extent.y > 0.0 && extent.z > 0.0,
            "GroupSpec: extent must be positive");
    require(alpha >= 0.0 && alpha <= 1.0, "GroupSpec: alpha outside [0,1]");
    require(log_scale_lo <= log_scale_hi, "GroupSpec: empty scale range");
    for (double v : {motion.b.x,         motion.b.y,         motion.b.z,
                     motion.omega.x,     motion.omega.y,     motion.omega.z,
                     motion.pivot.x,     motion.pivot.y,     motion.pivot.z,
                     motion.rates.x,     motion.rates.y,     motion.rates.z,
                     motion.amplitude.x, motion.amplitude.y, motion.amplitude.z,
                     motion.wave.x,      motion.wave.y,      motion.wave.z,
                     motion.frequency})
      require(std::isfinite(v), "GroupSpec: motion parameter not finite");
  }
};

struct SceneSpec {
  std::vector<GroupSpec> groups;
  std::size_t n_times = 60;
  double t_max = 1.0;
  double split = 0.75;

  void validate() const {
    require(!groups.empty(), "SceneSpec: no groups");
    for (const GroupSpec& g : groups) g.validate();
    require(n_times >= 2, "SceneSpec: need at least two timestamps");
    require(t_max > 0.0, "SceneSpec: t_max must be positive");
    require(split > 0.0 && split < 1.0, "SceneSpec: split outside (0,1)");
  }
};

/// Ground-truth states over time. `positions` is mandatory; `rotations`
/// and `scales` are present only when the law evolves them in closed form
/// (absent means constant at the canonical value).
struct TrajectoryDataset {
  std::vector<double> times;
  std::vector<std::vector<Vec3>> positions;         // [particle][time]
  std::vector<std::vector<Quaternion>> rotations;   // empty or same nesting
  std::vector<std::vector<Vec3>> scales;            // empty or same nesting
  double split = 0.75;

  std::size_t train_count() const {
    auto n = static_cast<std::size_t>(
        std::floor(split * static_cast<double>(times.size()) + 1e-9));
    return std::min(std::max<std::size_t>(n, 1), times.size() - 1);
  }

  void validate() const {
    require(times.size() >= 2, "TrajectoryDataset: need two timestamps");
    for (std::size_t k = 1; k < times.size(); ++k)
      require(times[k] > times[k - 1],
              "TrajectoryDataset: times not strictly increasing");
    require(split > 0.0 && split < 1.0,
            "TrajectoryDataset: split outside (0,1)");
    for (const auto& row : positions)
      require(row.size() == times.size(),
              "TrajectoryDataset: ragged position rows");
    require(rotations.empty() || rotations.size() == positions.size(),
            "TrajectoryDataset: rotation rows mismatch");
    require(scales.empty() || scales.size() == positions.size(),
            "TrajectoryDataset: scale rows mismatch");
  }
};

struct Scene {
  SceneSpec spec;
  std::vector<GaussianPrimitive> particles;  // canonical, t = 0
  TrajectoryDataset data;
};

/// Axis-aligned bounds of every ground-truth position.
inline Aabb scene_bounds(const Scene& scene) {
  Aabb box;
  for (const auto& row : scene.data.positions)
    for (const Vec3& p : row) box.expand(p);
  return box;
}

namespace detail {

inline Vec3 sample_shape(const GroupSpec& g, Rng& rng) {
  switch (g.shape) {
    case ShapeKind::kBox:
      return g.center + Vec3{g.extent.x * rng.uniform(-1.0, 1.0),
                             g.extent.y * rng.uniform(-1.0, 1.0),
                             g.extent.z * rng.uniform(-1.0, 1.0)};
    case ShapeKind::kBall: {
      for (;;) {
        Vec3 v{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
               rng.uniform(-1.0, 1.0)};
        if (norm2(v) <= 1.0) return g.center + v * g.extent.x;
      }
    }
    case ShapeKind::kShell: {
      for (;;) {
        Vec3 v{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
               rng.uniform(-1.0, 1.0)};
        double n2 = norm2(v);
        if (n2 > 1e-4 && n2 <= 1.0)
          return g.center + v * (g.extent.x / std::sqrt(n2));
      }
    }
  }
  throw ContractViolation("sample_shape: bad enum");
}

}  // namespace detail

/// Samples canonical particles and evaluates every trajectory in closed
/// form. Same spec and seed always reproduce the same scene bit for bit.
inline Scene generate(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Scene scene;
  scene.spec = spec;
  scene.data.split = spec.split;
  scene.data.times.resize(spec.n_times);
  for (std::size_t k = 0; k < spec.n_times; ++k)
    scene.data.times[k] = spec.t_max * static_cast<double>(k) /
                          static_cast<double>(spec.n_times - 1);

  // pose/scale tracks are stored for every particle or not at all, so a
  // track row always aligns with the particle of the same index
  bool any_rotates = false;
  bool any_stretches = false;
  for (const GroupSpec& g : spec.groups) {
    any_rotates |= g.motion.kind == MotionLaw::Kind::kRotation ||
                   g.motion.kind == MotionLaw::Kind::kHybrid;
    any_stretches |= g.motion.kind == MotionLaw::Kind::kStretch;
  }

  Rng rng(seed);
  for (const GroupSpec& g : spec.groups) {
    bool rotates = g.motion.kind == MotionLaw::Kind::kRotation ||
                   g.motion.kind == MotionLaw::Kind::kHybrid;
    bool stretches = g.motion.kind == MotionLaw::Kind::kStretch;
    for (std::size_t i = 0; i < g.count; ++i) {
      Vec3 anchor = detail::sample_shape(g, rng);
      GaussianPrimitive p;
      p.log_s = {rng.uniform(g.log_scale_lo, g.log_scale_hi),
                 rng.uniform(g.log_scale_lo, g.log_scale_hi),
                 rng.uniform(g.log_scale_lo, g.log_scale_hi)};
      p.q = stretches ? Quaternion::identity()
                      : Quaternion::exp_pure(
                            {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                             rng.uniform(-1.5, 1.5)});
      p.alpha = g.alpha;
      p.color = {std::clamp(g.color.x + g.color_jitter * rng.uniform(-1.0, 1.0),
                            0.0, 1.0),
                 std::clamp(g.color.y + g.color_jitter * rng.uniform(-1.0, 1.0),
                            0.0, 1.0),
                 std::clamp(g.color.z + g.color_jitter * rng.uniform(-1.0, 1.0),
                            0.0, 1.0)};

      std::vector<Vec3> traj(spec.n_times);
      std::vector<Quaternion> rots;
      std::vector<Vec3> sizes;
      if (any_rotates) rots.resize(spec.n_times, p.q);
      if (any_stretches) sizes.resize(spec.n_times, p.scale());
      for (std::size_t k = 0; k < spec.n_times; ++k) {
        double t = scene.data.times[k];
        traj[k] = motion_position(g.motion, anchor, t);
        if (rotates)
          rots[k] = (Quaternion::exp_pure(g.motion.omega * (0.5 * t)) * p.q)
                        .normalized();
        if (stretches) sizes[k] = cwise_exp(p.log_s + g.motion.rates * t);
      }
      p.mu = traj[0];
      scene.particles.push_back(p);
      scene.data.positions.push_back(std::move(traj));
      if (any_rotates) scene.data.rotations.push_back(std::move(rots));
      if (any_stretches) scene.data.scales.push_back(std::move(sizes));
    }
  }
  scene.data.validate();
  return scene;
}

// ------------------------------------------------------------------ file IO

namespace detail {

inline const Json& sub_field(const Json& j, const std::string& name,
                             const std::string& where) {
  if (!j.is_object() || !j.contains(name))
    throw ParseError(where + ": missing field \"" + name + "\"");
  return j.at(name);
}

inline Json vec3_to_json(const Vec3& v) {
  return Json::array({v.x, v.y, v.z});
}

inline Vec3 vec3_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw ParseError(where + ": expected an array of 3 numbers");
  try {
    return {j.at(0).get<double>(), j.at(1).get<double>(),
            j.at(2).get<double>()};
  } catch (const Json::exception&) {
    throw ParseError(where + ": expected an array of 3 numbers");
  }
}

inline Json quat_to_json(const Quaternion& q) {
  return Json::array({q.w, q.x, q.y, q.z});
}

inline Quaternion quat_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4)
    throw ParseError(where + ": expected an array of 4 numbers");
  try {
    return {j.at(0).get<double>(), j.at(1).get<double>(),
            j.at(2).get<double>(), j.at(3).get<double>()};
  } catch (const Json::exception&) {
    throw ParseError(where + ": expected an array of 4 numbers");
  }
}

inline Json motion_to_json(const MotionLaw& m) {
  Json j{{"kind", motion_kind_name(m.kind)}};
  switch (m.kind) {
    case MotionLaw::Kind::kTranslation:
      j["b"] = vec3_to_json(m.b);
      break;
    case MotionLaw::Kind::kRotation:
      j["omega"] = vec3_to_json(m.omega);
      j["pivot"] = vec3_to_json(m.pivot);
      break;
    case MotionLaw::Kind::kStretch:
    case MotionLaw::Kind::kShear:
      j["rates"] = vec3_to_json(m.rates);
      j["pivot"] = vec3_to_json(m.pivot);
      break;
    case MotionLaw::Kind::kAffine:
      j["matrix"] = std::vector<double>(m.matrix.m.begin(), m.matrix.m.end());
      j["b"] = vec3_to_json(m.b);
      break;
    case MotionLaw::Kind::kSinusoid:
      j["amplitude"] = vec3_to_json(m.amplitude);
      j["frequency"] = m.frequency;
      j["wave"] = vec3_to_json(m.wave);
      break;
    case MotionLaw::Kind::kHybrid:
      j["omega"] = vec3_to_json(m.omega);
      j["pivot"] = vec3_to_json(m.pivot);
      j["amplitude"] = vec3_to_json(m.amplitude);
      j["frequency"] = m.frequency;
      j["wave"] = vec3_to_json(m.wave);
      break;
  }
  return j;
}

inline MotionLaw motion_from_json(const Json& j, const std::string& where) {
  MotionLaw m;
  m.kind = motion_kind_from(json_field<std::string>(j, "kind", where), where);
  auto vec = [&](const char* name) {
    return vec3_from_json(sub_field(j, name, where), where + "." + name);
  };
  switch (m.kind) {
    case MotionLaw::Kind::kTranslation:
      m.b = vec("b");
      break;
    case MotionLaw::Kind::kRotation:
      m.omega = vec("omega");
      m.pivot = vec("pivot");
      break;
    case MotionLaw::Kind::kStretch:
    case MotionLaw::Kind::kShear:
      m.rates = vec("rates");
      m.pivot = vec("pivot");
      break;
    case MotionLaw::Kind::kAffine: {
      auto mat = json_field<std::vector<double>>(j, "matrix", where);
      if (mat.size() != 9)
        throw ParseError(where + ": field \"matrix\" needs 9 entries");
      std::copy(mat.begin(), mat.end(), m.matrix.m.begin());
      m.b = vec("b");
      break;
    }
    case MotionLaw::Kind::kSinusoid:
      m.amplitude = vec("amplitude");
      m.frequency = json_field<double>(j, "frequency", where);
      m.wave = vec("wave");
      break;
    case MotionLaw::Kind::kHybrid:
      m.omega = vec("omega");
      m.pivot = vec("pivot");
      m.amplitude = vec("amplitude");
      m.frequency = json_field<double>(j, "frequency", where);
      m.wave = vec("wave");
      break;
  }
  return m;
}

}  // namespace detail

inline void save_scene(const std::string& path, const Scene& scene) {
  scene.data.validate();
  Json groups = Json::array();
  for (const GroupSpec& g : scene.spec.groups) {
    groups.push_back({{"count", g.count},
                      {"shape", shape_name(g.shape)},
                      {"center", detail::vec3_to_json(g.center)},
                      {"extent", detail::vec3_to_json(g.extent)},
                      {"color", detail::vec3_to_json(g.color)},
                      {"color_jitter", g.color_jitter},
                      {"alpha", g.alpha},
                      {"log_scale", {g.log_scale_lo, g.log_scale_hi}},
                      {"motion", detail::motion_to_json(g.motion)}});
  }
  Json particles = Json::array();
  for (const GaussianPrimitive& p : scene.particles) {
    particles.push_back({{"mu", detail::vec3_to_json(p.mu)},
                         {"log_s", detail::vec3_to_json(p.log_s)},
                         {"q", detail::quat_to_json(p.q)},
                         {"alpha", p.alpha},
                         {"color", detail::vec3_to_json(p.color)}});
  }
  Json trajectories = Json::array();
  for (const auto& row : scene.data.positions) {
    Json r = Json::array();
    for (const Vec3& x : row) r.push_back(detail::vec3_to_json(x));
    trajectories.push_back(std::move(r));
  }
  Json j{{"version", 1},
         {"groups", std::move(groups)},
         {"times", scene.data.times},
         {"split", scene.data.split},
         {"particles", std::move(particles)},
         {"trajectories", std::move(trajectories)}};
  if (!scene.data.rotations.empty()) {
    Json rot = Json::array();
    for (const auto& row : scene.data.rotations) {
      Json r = Json::array();
      for (const Quaternion& q : row) r.push_back(detail::quat_to_json(q));
      rot.push_back(std::move(r));
    }
    j["rotations"] = std::move(rot);
  }
  if (!scene.data.scales.empty()) {
    Json sc = Json::array();
    for (const auto& row : scene.data.scales) {
      Json r = Json::array();
      for (const Vec3& s : row) r.push_back(detail::vec3_to_json(s));
      sc.push_back(std::move(r));
    }
    j["scales"] = std::move(sc);
  }
  save_json_file(path, j);
}

inline Scene load_scene(const std::string& path) {
  Json j = load_json_file(path);
  std::string where = path;
  int version = json_field<int>(j, "version", where);
  if (version != 1)
    throw ParseError(where + ": unsupported scene version " +
                     std::to_string(version));

  Scene scene;
  if (!j.contains("groups") || !j.at("groups").is_array())
    throw ParseError(where + ": missing field \"groups\"");
  std::size_t gi = 0;
  for (const Json& gj : j.at("groups")) {
    std::string gwhere = where + ": groups[" + std::to_string(gi) + "]";
    GroupSpec g;
    g.count = json_field<std::size_t>(gj, "count", gwhere);
    g.shape =
        shape_from_name(json_field<std::string>(gj, "shape", gwhere), gwhere);
    g.center = detail::vec3_from_json(detail::sub_field(gj, "center", gwhere),
                                      gwhere + ".center");
    g.extent = detail::vec3_from_json(detail::sub_field(gj, "extent", gwhere),
                                      gwhere + ".extent");
    g.color = detail::vec3_from_json(detail::sub_field(gj, "color", gwhere),
                                     gwhere + ".color");
    g.color_jitter = json_field<double>(gj, "color_jitter", gwhere);
    g.alpha = json_field<double>(gj, "alpha", gwhere);
    auto ls = json_field<std::vector<double>>(gj, "log_scale", gwhere);
    if (ls.size() != 2)
      throw ParseError(gwhere + ": field \"log_scale\" needs 2 entries");
    g.log_scale_lo = ls[0];
    g.log_scale_hi = ls[1];
    g.motion = detail::motion_from_json(
        detail::sub_field(gj, "motion", gwhere), gwhere + ".motion");
    scene.spec.groups.push_back(g);
    ++gi;
  }

  scene.data.times = json_field<std::vector<double>>(j, "times", where);
  if (scene.data.times.size() < 2)
    throw ParseError(where + ": field \"times\" needs at least 2 entries");
  scene.data.split = json_field<double>(j, "split", where);
  scene.spec.split = scene.data.split;
  scene.spec.n_times = scene.data.times.size();
  scene.spec.t_max = scene.data.times.back();

  if (!j.contains("particles") || !j.at("particles").is_array())
    throw ParseError(where + ": missing field \"particles\"");
  std::size_t pi = 0;
  for (const Json& pj : j.at("particles")) {
    std::string pwhere = where + ": particles[" + std::to_string(pi) + "]";
    GaussianPrimitive p;
    p.mu = detail::vec3_from_json(detail::sub_field(pj, "mu", pwhere),
                                  pwhere + ".mu");
    p.log_s = detail::vec3_from_json(detail::sub_field(pj, "log_s", pwhere),
                                     pwhere + ".log_s");
    p.q = detail::quat_from_json(detail::sub_field(pj, "q", pwhere),
                                 pwhere + ".q");
    p.alpha = json_field<double>(pj, "alpha", pwhere);
    p.color = detail::vec3_from_json(detail::sub_field(pj, "color", pwhere),
                                     pwhere + ".color");
    scene.particles.push_back(p);
    ++pi;
  }

  if (!j.contains("trajectories") || !j.at("trajectories").is_array())
    throw ParseError(where + ": missing field \"trajectories\"");
  std::size_t ri = 0;
  for (const Json& rj : j.at("trajectories")) {
    std::string rwhere = where + ": trajectories[" + std::to_string(ri) + "]";
    if (!rj.is_array()) throw ParseError(rwhere + ": expected an array");
    std::vector<Vec3> row;
    for (std::size_t k = 0; k < rj.size(); ++k)
      row.push_back(detail::vec3_from_json(
          rj.at(k), rwhere + "[" + std::to_string(k) + "]"));
    scene.data.positions.push_back(std::move(row));
    ++ri;
  }

  if (j.contains("rotations")) {
    std::size_t qi = 0;
    for (const Json& rj : j.at("rotations")) {
      std::string rwhere = where + ": rotations[" + std::to_string(qi) + "]";
      std::vector<Quaternion> row;
      for (std::size_t k = 0; k < rj.size(); ++k)
        row.push_back(detail::quat_from_json(
            rj.at(k), rwhere + "[" + std::to_string(k) + "]"));
      scene.data.rotations.push_back(std::move(row));
      ++qi;
    }
  }
  if (j.contains("scales")) {
    std::size_t si = 0;
    for (const Json& sj : j.at("scales")) {
      std::string swhere = where + ": scales[" + std::to_string(si) + "]";
      std::vector<Vec3> row;
      for (std::size_t k = 0; k < sj.size(); ++k)
        row.push_back(detail::vec3_from_json(
            sj.at(k), swhere + "[" + std::to_string(k) + "]"));
      scene.data.scales.push_back(std::move(row));
      ++si;
    }
  }

  if (scene.data.positions.size() != scene.particles.size())
    throw ParseError(where + ": trajectory count does not match particles");
  try {
    scene.data.validate();
  } catch (const ContractViolation& e) {
    throw ParseError(where + ": " + e.what());
  }
  return scene;
}

// ------------------------------------------------------------------ presets

/// Bundled scenes: `spin` (one rigid rotor), `drift` (translating cloud),
/// `multipart` (three groups with distinct motions), `breathe` (nonrigid
/// wave), `hybrid` (rotation plus wave).
inline SceneSpec scene_preset(const std::string& name) {
  SceneSpec spec;
  if (name == "spin") {
    GroupSpec g;
    g.count = 64;
    g.shape = ShapeKind::kBall;
    g.extent = {0.6, 0.6, 0.6};
    g.color = {0.9, 0.35, 0.2};
    g.color_jitter = 0.05;
    g.motion.kind = MotionLaw::Kind::kRotation;
    g.motion.omega = {0.0, 0.0, kPi};
    g.motion.pivot = {0.0, 0.0, 0.0};
    spec.groups.push_back(g);
    return spec;
  }
  if (name == "drift") {
    GroupSpec g;
    g.count = 64;
    g.shape = ShapeKind::kBox;
    g.extent = {0.4, 0.3, 0.2};
    g.color = {0.2, 0.55, 0.9};
    g.color_jitter = 0.05;
    g.motion.kind = MotionLaw::Kind::kTranslation;
    g.motion.b = {0.5, 0.2, -0.1};
    spec.groups.push_back(g);
    return spec;
  }
  if (name == "multipart") {
    GroupSpec a;
    a.count = 48;
    a.shape = ShapeKind::kBall;
    a.center = {-0.6, 0.0, 0.0};
    a.extent = {0.22, 0.22, 0.22};
    a.color = {0.9, 0.25, 0.2};
    a.color_jitter = 0.05;
    a.motion.kind = MotionLaw::Kind::kRotation;
    a.motion.omega = {0.0, 0.0, 2.2};
    a.motion.pivot = a.center;

    GroupSpec b = a;
    b.center = {0.6, 0.0, 0.0};
    b.color = {0.2, 0.55, 0.9};
    b.motion = MotionLaw{};
    b.motion.kind = MotionLaw::Kind::kTranslation;
    b.motion.b = {-0.25, 0.3, 0.15};

    GroupSpec c = a;
    c.center = {0.0, 0.6, 0.2};
    c.color = {0.95, 0.8, 0.25};
    c.motion.omega = {1.6, 0.0, 0.0};
    c.motion.pivot = c.center;

    spec.groups = {a, b, c};
    return spec;
  }
  if (name == "breathe") {
    GroupSpec g;
    g.count = 80;
    g.shape = ShapeKind::kBall;
    g.extent = {0.5, 0.5, 0.5};
    g.color = {0.3, 0.8, 0.45};
    g.color_jitter = 0.05;
    g.motion.kind = MotionLaw::Kind::kSinusoid;
    g.motion.amplitude = {0.12, 0.08, 0.05};
    g.motion.frequency = 1.0;
    g.motion.wave = {3.0, 0.0, 0.0};
    spec.groups.push_back(g);
    return spec;
  }
  if (name == "hybrid") {
    GroupSpec g;
    g.count = 80;
    g.shape = ShapeKind::kBall;
    g.extent = {0.5, 0.5, 0.5};
    g.color = {0.85, 0.7, 0.25};
    g.color_jitter = 0.05;
    g.motion.kind = MotionLaw::Kind::kHybrid;
    g.motion.omega = {0.0, 0.0, 2.0};
    g.motion.pivot = {0.0, 0.0, 0.0};
    g.motion.amplitude = {0.06, 0.05, 0.1};
    g.motion.frequency = 1.5;
    g.motion.wave = {2.0, 0.0, 0.0};
    spec.groups.push_back(g);
    return spec;
  }
  throw ParseError("unknown scene preset \"" + name + "\"");
}

}  // namespace flowsplat
