#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowsplat/error.hpp"
#include "flowsplat/math.hpp"

namespace flowsplat {

struct Camera {
  Vec3 position;
  Quaternion rotation = Quaternion::identity();  // world -> camera
  double fx = 0.0, fy = 0.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels
  int width = 0, height = 0;
  double near = 0.01;

  void validate() const {
    require(fx > 0.0 && fy > 0.0, "Camera: focal lengths must be positive");
    require(width >= 1 && height >= 1, "Camera: empty image plane");
    require(near > 0.0, "Camera: near plane must be positive");
  }
};

/// Camera at `position` looking at `target`, x right, y down, z forward.
inline Camera look_at_camera(const Vec3& position, const Vec3& target,
                             int width, int height, double fov_y_deg,
                             const Vec3& up = {0.0, 0.0, 1.0}) {
  Vec3 f = normalized(target - position);
  Vec3 side = cross(f, up);
  if (norm(side) < 1e-9) side = cross(f, Vec3{0.0, 1.0, 0.0});
  Vec3 r = normalized(side);
  Vec3 d = cross(f, r);  // image-down, completing a right-handed frame
  Mat3 rot = Mat3::from_rows(r, d, f);
  Camera cam;
  cam.position = position;
  cam.rotation = quat_from_matrix(rot);
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * kPi / 180.0);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.validate();
  return cam;
}

struct Splat2D {
  double cx = 0.0, cy = 0.0;  // pixel center
  double c00 = 0.0, c01 = 0.0, c11 = 0.0;  // 2x2 covariance, pixels^2
  double depth = 0.0;
  double alpha = 0.0;
  Vec3 color;
  int index = 0;  // source particle, tiebreak for equal depths

  double det() const { return c00 * c11 - c01 * c01; }
  double max_eigenvalue() const {
    double mid = 0.5 * (c00 + c11);
    double off = 0.5 * (c00 - c11);
    return mid + std::sqrt(off * off + c01 * c01);
  }
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;  // row-major, 3 per pixel, values in [0,1]

  Image() = default;
  Image(int w, int h) : width(w), height(h) {
    require(w >= 1 && h >= 1, "Image: empty dimensions");
    rgb.assign(static_cast<std::size_t>(3) * w * h, 0.0);
  }

  std::size_t offset(int x, int y) const {
    return 3 * (static_cast<std::size_t>(y) * width + x);
  }
  Vec3 at(int x, int y) const {
    std::size_t o = offset(x, y);
    return {rgb[o], rgb[o + 1], rgb[o + 2]};
  }
  void set(int x, int y, const Vec3& c) {
    std::size_t o = offset(x, y);
    rgb[o] = std::clamp(c.x, 0.0, 1.0);
    rgb[o + 1] = std::clamp(c.y, 0.0, 1.0);
    rgb[o + 2] = std::clamp(c.z, 0.0, 1.0);
  }
};

/// EWA projection of one particle. Empty when the splat is culled (behind
/// the near plane or outside the image inflated by its 3-sigma footprint).
inline std::optional<Splat2D> project(const GaussianPrimitive& g,
                                      const Camera& cam, int index = 0) {
  cam.validate();
  Vec3 pc = cam.rotation.rotate(g.mu - cam.position);
  if (pc.z <= cam.near) return std::nullopt;

  double inv_z = 1.0 / pc.z;
  double u = cam.fx * pc.x * inv_z + cam.cx;
  double v = cam.fy * pc.y * inv_z + cam.cy;

  // J rows: d(u)/d(pc), d(v)/d(pc) at the center.
  double j00 = cam.fx * inv_z;
  double j02 = -cam.fx * pc.x * inv_z * inv_z;
  double j11 = cam.fy * inv_z;
  double j12 = -cam.fy * pc.y * inv_z * inv_z;

  Mat3 w = cam.rotation.to_matrix();
  Mat3 sigma = covariance_from(g.q, g.scale());
  Mat3 cw = w * sigma * w.transposed();

  // rows of J * cw
  Vec3 r0 = Vec3{cw(0, 0), cw(0, 1), cw(0, 2)} * j00 +
            Vec3{cw(2, 0), cw(2, 1), cw(2, 2)} * j02;
  Vec3 r1 = Vec3{cw(1, 0), cw(1, 1), cw(1, 2)} * j11 +
            Vec3{cw(2, 0), cw(2, 1), cw(2, 2)} * j12;

  Splat2D s;
  s.c00 = r0.x * j00 + r0.z * j02 + 0.3;
  s.c01 = r0.y * j11 + r0.z * j12;
  s.c11 = r1.y * j11 + r1.z * j12 + 0.3;
  s.cx = u;
  s.cy = v;
  s.depth = pc.z;
  s.alpha = g.alpha;
  s.color = g.color;
  s.index = index;

  double radius = 3.0 * std::sqrt(s.max_eigenvalue());
  if (u < -radius || u > cam.width + radius || v < -radius ||
      v > cam.height + radius)
    return std::nullopt;
  return s;
}

/// Total order for blending: front to back, ties broken by particle index.
inline bool splat_order(const Splat2D& a, const Splat2D& b) {
  if (a.depth != b.depth) return a.depth < b.depth;
  return a.index < b.index;
}

namespace detail {

// Blends one splat into (c, transmittance). False once the pixel saturates.
inline bool blend_one(const Splat2D& s, double px, double py, Vec3& c,
                      double& transmittance) {
  double det = s.det();
  if (det <= 1e-12) return true;  // singular beyond regularization: skip
  double dx = px - s.cx;
  double dy = py - s.cy;
  double maha =
      (s.c11 * dx * dx - 2.0 * s.c01 * dx * dy + s.c00 * dy * dy) / det;
  if (maha > 9.0) return true;  // outside the 3-sigma footprint
  double a = s.alpha * std::exp(-0.5 * maha);
  c = c + s.color * (a * transmittance);
  transmittance *= 1.0 - a;
  return transmittance >= 1e-4;
}

}  // namespace detail

/// Front-to-back alpha blend of depth-sorted splats at one pixel position.
inline Vec3 composite(const std::vector<Splat2D>& sorted, double px,
                      double py) {
  Vec3 c{0.0, 0.0, 0.0};
  double transmittance = 1.0;
  for (const Splat2D& s : sorted)
    if (!detail::blend_one(s, px, py, c, transmittance)) break;
  return c;
}

namespace detail {

inline void render_rows(const std::vector<Splat2D>& sorted, Image& img,
                        int y0, int y1) {
  std::vector<double> radius(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    radius[i] = 3.0 * std::sqrt(sorted[i].max_eigenvalue());
  // Row-band prefilter: splats whose footprint misses the row contribute
  // exactly nothing (the 3-sigma ellipse sits inside this box), so skipping
  // them cannot change the blend.
  std::vector<const Splat2D*> active;
  std::vector<double> act_r;
  active.reserve(sorted.size());
  act_r.reserve(sorted.size());
  for (int y = y0; y < y1; ++y) {
    double py = y + 0.5;
    active.clear();
    act_r.clear();
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (py >= sorted[i].cy - radius[i] && py <= sorted[i].cy + radius[i]) {
        active.push_back(&sorted[i]);
        act_r.push_back(radius[i]);
      }
    }
    for (int x = 0; x < img.width; ++x) {
      double px = x + 0.5;
      Vec3 c{0.0, 0.0, 0.0};
      double transmittance = 1.0;
      for (std::size_t i = 0; i < active.size(); ++i) {
        const Splat2D& s = *active[i];
        if (px < s.cx - act_r[i] || px > s.cx + act_r[i]) continue;
        if (!blend_one(s, px, py, c, transmittance)) break;
      }
      img.set(x, y, c);
    }
  }
}

}  // namespace detail

/// Projects, depth-sorts (stable tiebreak on particle index) and blends.
/// Workers split the image into disjoint row bands, so the output is
/// bit-identical for any worker count.
inline Image render(const std::vector<GaussianPrimitive>& particles,
                    const Camera& cam, int n_workers = 1) {
  cam.validate();
  require(n_workers >= 1, "render: n_workers must be >= 1");
  std::vector<Splat2D> splats;
  splats.reserve(particles.size());
  for (std::size_t i = 0; i < particles.size(); ++i) {
    auto s = project(particles[i], cam, static_cast<int>(i));
    if (s) splats.push_back(*s);
  }
  std::sort(splats.begin(), splats.end(), splat_order);

  Image img(cam.width, cam.height);
  int workers = std::min(n_workers, cam.height);
  if (workers == 1) {
    detail::render_rows(splats, img, 0, cam.height);
    return img;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  int rows = (cam.height + workers - 1) / workers;
  for (int wkr = 0; wkr < workers; ++wkr) {
    int y0 = wkr * rows;
    int y1 = std::min(cam.height, y0 + rows);
    if (y0 >= y1) break;
    pool.emplace_back(detail::render_rows, std::cref(splats), std::ref(img),
                      y0, y1);
  }
  for (auto& t : pool) t.join();
  return img;
}

// ------------------------------------------------------------- image metrics

inline double psnr(const Image& a, const Image& b) {
  require(a.width == b.width && a.height == b.height,
          "psnr: image dimensions differ");
  require(!a.rgb.empty(), "psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    double d = a.rgb[i] - b.rgb[i];
    se += d * d;
  }
  double mse = se / static_cast<double>(a.rgb.size());
  if (mse < 1e-10) return 99.0;  // sentinel for (near-)identical images
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> g(11);
    double total = 0.0;
    for (int i = 0; i < 11; ++i) {
      double d = i - 5.0;
      g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      total += g[i];
    }
    std::vector<double> w2(121);
    for (int i = 0; i < 11; ++i)
      for (int j = 0; j < 11; ++j) w2[i * 11 + j] = g[i] * g[j] / (total * total);
    return w2;
  }();
  return w;
}

}  // namespace detail

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid positions
/// only, averaged over RGB. Images must be at least 11x11.
inline double ssim(const Image& a, const Image& b) {
  require(a.width == b.width && a.height == b.height,
          "ssim: image dimensions differ");
  require(a.width >= 11 && a.height >= 11, "ssim: image smaller than window");
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const std::vector<double>& win = detail::ssim_window();

  double total = 0.0;
  std::size_t count = 0;
  for (int y = 0; y + 11 <= a.height; ++y) {
    for (int x = 0; x + 11 <= a.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
        for (int wy = 0; wy < 11; ++wy) {
          for (int wx = 0; wx < 11; ++wx) {
            double wgt = win[wy * 11 + wx];
            double av = a.rgb[a.offset(x + wx, y + wy) + ch];
            double bv = b.rgb[b.offset(x + wx, y + wy) + ch];
            ma += wgt * av;
            mb += wgt * bv;
            saa += wgt * (av * av);
            sbb += wgt * (bv * bv);
            sab += wgt * (av * bv);  // grouped so the metric is symmetric
          }
        }
        double va = saa - ma * ma;
        double vb = sbb - mb * mb;
        double cov = sab - ma * mb;
        double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- PPM files

/// Binary PPM (P6, maxval 255), bytes round-half-up from [0,1].
inline void save_ppm(const std::string& path, const Image& img) {
  require(img.width >= 1 && img.height >= 1, "save_ppm: empty image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.rgb.size());
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    double v = std::clamp(img.rgb[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError("write failed: " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ParseError(path + ": not a P6 PPM (magic)");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w < 1 || h < 1)
    throw ParseError(path + ": bad PPM dimensions");
  if (maxval != 255) throw ParseError(path + ": unsupported PPM maxval");
  in.get();  // single whitespace after the header
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3) * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw ParseError(path + ": truncated pixel data");
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    img.rgb[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace flowsplat
