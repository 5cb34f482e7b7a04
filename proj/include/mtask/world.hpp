#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtask/tensor.hpp"

namespace mtask::world {

constexpr std::size_t kCanvas = 64;
constexpr std::size_t kImageBytes = kCanvas * kCanvas * 3;
constexpr int kAngleBins = 18;

/// 64×64 RGB, u8, row-major with interleaved channels (HWC).
using Image = std::vector<std::uint8_t>;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
  double norm() const { return std::hypot(x, y); }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline Vec2 rotate(Vec2 v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}
inline Vec2 unit(double angle) { return {std::cos(angle), std::sin(angle)}; }

enum class ShapeKind : std::uint8_t { polygon = 0, ellipse = 1 };

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Knobs of the generator and of the three label oracles.
struct WorldConfig {
  double margin = 4.0;
  double min_extent = 6.0;  // semi-axis range, pixels
  double max_extent = 13.0;
  double stiffness_min = 0.5, stiffness_max = 2.0;
  double mass_min = 0.5, mass_max = 2.0;
  double grip_min = 13.0, grip_max = 15.0;  // graspable width, pixels
  std::array<double, 3> background{0.1, 0.1, 0.1};

  // Push displacement model.
  double gain_low = 1.0;
  double gain_high = 0.7;
  double inertia = 150.0;  // px², scales the rotation response
  double approach = 1.0;   // pre-contact run-up as a multiple of the travel
  double travel_min = 3.0, travel_max = 8.0;

  // Poke response model.
  double slope_gain = 0.5;
  double intercept_gain = 4.0;
  double poke_noise = 0.0;

  // Grasp sampling.
  bool balanced = true;
  double on_object_negative_fraction = 0.5;
};

struct WorldObject {
  ShapeKind kind = ShapeKind::polygon;
  std::vector<Vec2> vertices;  // local frame, CCW, area centroid at the origin
  double semi_a = 0.0;         // ellipse semi-axes along local x / y
  double semi_b = 0.0;
  std::array<double, 3> color{0.5, 0.5, 0.5};
  Pose pose;
  double graspable_width = 14.0;
  double stiffness = 1.0;
  double mass = 1.0;

  friend bool operator==(const WorldObject&, const WorldObject&) = default;

  Vec2 centroid() const { return {pose.x, pose.y}; }
  Vec2 to_local(Vec2 p) const { return rotate(p - centroid(), -pose.theta); }
  Vec2 to_world(Vec2 p) const { return rotate(p, pose.theta) + centroid(); }

  std::vector<Vec2> world_vertices() const {
    std::vector<Vec2> out;
    out.reserve(vertices.size());
    for (auto v : vertices) out.push_back(to_world(v));
    return out;
  }

  bool contains(Vec2 p) const {
    const Vec2 q = to_local(p);
    if (kind == ShapeKind::ellipse) {
      return (q.x * q.x) / (semi_a * semi_a) + (q.y * q.y) / (semi_b * semi_b) <= 1.0;
    }
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      const Vec2 a = vertices[i], b = vertices[(i + 1) % vertices.size()];
      if (cross(b - a, q - a) < 0.0) return false;
    }
    return true;
  }

  /// Parameter interval [t0, t1] over which p + t·dir lies inside the shape.
  std::optional<std::pair<double, double>> clip_line(Vec2 p, Vec2 dir) const {
    const Vec2 q = to_local(p);
    const Vec2 d = rotate(dir, -pose.theta);
    if (kind == ShapeKind::ellipse) {
      const double ia = 1.0 / (semi_a * semi_a), ib = 1.0 / (semi_b * semi_b);
      const double A = d.x * d.x * ia + d.y * d.y * ib;
      const double B = 2.0 * (q.x * d.x * ia + q.y * d.y * ib);
      const double C = q.x * q.x * ia + q.y * q.y * ib - 1.0;
      if (A == 0.0) return std::nullopt;
      const double disc = B * B - 4.0 * A * C;
      if (disc < 0.0) return std::nullopt;
      const double r = std::sqrt(disc);
      return std::pair{(-B - r) / (2.0 * A), (-B + r) / (2.0 * A)};
    }
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      const Vec2 a = vertices[i], e = vertices[(i + 1) % vertices.size()] - a;
      const double num = cross(e, q - a);
      const double den = cross(e, d);
      if (den == 0.0) {
        if (num < 0.0) return std::nullopt;
      } else if (den > 0.0) {
        t0 = std::max(t0, -num / den);
      } else {
        t1 = std::min(t1, -num / den);
      }
    }
    if (t0 > t1) return std::nullopt;
    return std::pair{t0, t1};
  }

  /// Length of the chord through p along unit direction dir; 0 outside.
  double chord_width(Vec2 p, Vec2 dir) const {
    if (!contains(p)) return 0.0;
    const auto iv = clip_line(p, dir);
    if (!iv) return 0.0;
    return (iv->second - iv->first) * dir.norm();
  }

  /// Support function h(u) = max over the shape of ⟨x, u⟩ in world frame.
  double support(Vec2 u) const {
    if (kind == ShapeKind::ellipse) {
      const Vec2 l = rotate(u, -pose.theta);
      return dot(centroid(), u) + std::sqrt(semi_a * semi_a * l.x * l.x + semi_b * semi_b * l.y * l.y);
    }
    double best = -std::numeric_limits<double>::infinity();
    for (auto v : world_vertices()) best = std::max(best, dot(v, u));
    return best;
  }

  double area() const {
    if (kind == ShapeKind::ellipse) return std::numbers::pi * semi_a * semi_b;
    double a = 0.0;
    for (std::size_t i = 0; i < vertices.size(); ++i) a += cross(vertices[i], vertices[(i + 1) % vertices.size()]);
    return 0.5 * a;
  }

  double bounding_radius() const {
    if (kind == ShapeKind::ellipse) return std::max(semi_a, semi_b);
    double r = 0.0;
    for (auto v : vertices) r = std::max(r, v.norm());
    return r;
  }

  // Axis-aligned extent [xmin, xmax, ymin, ymax] in world coordinates.
  std::array<double, 4> extent() const {
    return {-support({-1.0, 0.0}), support({1.0, 0.0}), -support({0.0, -1.0}), support({0.0, 1.0})};
  }
};

/// Empty string when the object satisfies every generator invariant,
/// otherwise the first violated one.
inline std::string check_object(const WorldObject& obj, const WorldConfig& cfg = {}) {
  if (obj.kind == ShapeKind::polygon) {
    if (obj.vertices.size() < 3 || obj.vertices.size() > 8) return "polygon needs 3..8 vertices";
    for (std::size_t i = 0; i < obj.vertices.size(); ++i) {
      const Vec2 a = obj.vertices[i], b = obj.vertices[(i + 1) % obj.vertices.size()],
                 c = obj.vertices[(i + 2) % obj.vertices.size()];
      if (cross(b - a, c - b) <= 0.0) return "polygon is not strictly convex and counter-clockwise";
    }
  } else if (!(obj.semi_a > 0.0 && obj.semi_b > 0.0)) {
    return "ellipse semi-axes must be positive";
  }
  if (obj.stiffness < cfg.stiffness_min || obj.stiffness > cfg.stiffness_max) return "stiffness out of range";
  if (obj.mass < cfg.mass_min || obj.mass > cfg.mass_max) return "mass out of range";
  if (!(obj.graspable_width > 0.0)) return "graspable width must be positive";
  const auto e = obj.extent();
  const double lo = cfg.margin, hi = static_cast<double>(kCanvas) - cfg.margin;
  if (e[0] < lo || e[1] > hi || e[2] < lo || e[3] > hi) return "object violates the canvas margin";
  return {};
}

using WorldRng = std::mt19937_64;

inline WorldRng make_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return WorldRng(seq);
}

inline double uniform(WorldRng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Deterministic object from a seed: convex polygon (3–8 vertices) or ellipse.
/// Colour encodes material: red tracks stiffness, blue tracks mass.
inline WorldObject gen_object(std::uint64_t seed, const WorldConfig& cfg = {}) {
  auto rng = make_rng({seed, 0x6f626a656374ULL});
  WorldObject obj;
  obj.kind = std::bernoulli_distribution(0.75)(rng) ? ShapeKind::polygon : ShapeKind::ellipse;
  if (obj.kind == ShapeKind::polygon) {
    const int n = std::uniform_int_distribution<int>(3, 8)(rng);
    const double sx = uniform(rng, cfg.min_extent, cfg.max_extent);
    const double sy = uniform(rng, cfg.min_extent, cfg.max_extent);
    const double step = 2.0 * std::numbers::pi / n;
    const double base = uniform(rng, 0.0, step);
    for (int k = 0; k < n; ++k) {
      const double a = base + step * (k + uniform(rng, -0.35, 0.35));
      obj.vertices.push_back({sx * std::cos(a), sy * std::sin(a)});
    }
    // Shift so the area centroid sits at the local origin.
    double a2 = 0.0, cx = 0.0, cy = 0.0;
    for (int k = 0; k < n; ++k) {
      const Vec2 p = obj.vertices[k], q = obj.vertices[(k + 1) % n];
      const double w = cross(p, q);
      a2 += w;
      cx += (p.x + q.x) * w;
      cy += (p.y + q.y) * w;
    }
    const Vec2 c{cx / (3.0 * a2), cy / (3.0 * a2)};
    for (auto& v : obj.vertices) v = v - c;
  } else {
    obj.semi_a = uniform(rng, cfg.min_extent, cfg.max_extent);
    obj.semi_b = uniform(rng, cfg.min_extent, cfg.max_extent);
  }
  obj.stiffness = uniform(rng, cfg.stiffness_min, cfg.stiffness_max);
  obj.mass = uniform(rng, cfg.mass_min, cfg.mass_max);
  obj.graspable_width = uniform(rng, cfg.grip_min, cfg.grip_max);
  obj.pose.theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double r = obj.bounding_radius();
  const double lo = cfg.margin + r, hi = static_cast<double>(kCanvas) - cfg.margin - r;
  obj.pose.x = uniform(rng, lo, hi);
  obj.pose.y = uniform(rng, lo, hi);
  const double sf = (obj.stiffness - cfg.stiffness_min) / (cfg.stiffness_max - cfg.stiffness_min);
  const double mf = (obj.mass - cfg.mass_min) / (cfg.mass_max - cfg.mass_min);
  obj.color = {0.2 + 0.7 * sf, uniform(rng, 0.45, 1.0), 0.2 + 0.7 * mf};
  return obj;
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rasterises the 64×64 window whose top-left corner sits at `origin`.
/// Pixel (i, j) samples the world point origin + (j + ½, i + ½); anything
/// outside the object (or the canvas) shows the background colour.
inline Image render_view(const WorldObject* obj, Vec2 origin, const WorldConfig& cfg = {}) {
  Image img(kImageBytes);
  const std::array<std::uint8_t, 3> bg{to_u8(cfg.background[0]), to_u8(cfg.background[1]), to_u8(cfg.background[2])};
  std::array<std::uint8_t, 3> fg = bg;
  if (obj) fg = {to_u8(obj->color[0]), to_u8(obj->color[1]), to_u8(obj->color[2])};
  for (std::size_t i = 0; i < kCanvas; ++i) {
    for (std::size_t j = 0; j < kCanvas; ++j) {
      const Vec2 p{origin.x + static_cast<double>(j) + 0.5, origin.y + static_cast<double>(i) + 0.5};
      const bool hit = obj && obj->contains(p);
      const auto& c = hit ? fg : bg;
      std::copy(c.begin(), c.end(), img.begin() + static_cast<std::ptrdiff_t>((i * kCanvas + j) * 3));
    }
  }
  return img;
}

inline Image render_background(const WorldConfig& cfg = {}) { return render_view(nullptr, {0.0, 0.0}, cfg); }

/// Full-canvas rendering. Throws GeometryError when the object leaves the canvas.
inline Image render(const WorldObject& obj, const WorldConfig& cfg = {}) {
  const auto e = obj.extent();
  const double side = static_cast<double>(kCanvas);
  if (e[0] < 0.0 || e[1] > side || e[2] < 0.0 || e[3] > side) {
    throw GeometryError("render: object extends outside the 64x64 canvas");
  }
  return render_view(&obj, {0.0, 0.0}, cfg);
}

/// Grasp patch: 64×64 window centred on the grasp point.
inline Image render_patch(const WorldObject& obj, Vec2 grasp_point, const WorldConfig& cfg = {}) {
  const double half = static_cast<double>(kCanvas) / 2.0;
  return render_view(&obj, {grasp_point.x - half, grasp_point.y - half}, cfg);
}

/// Closing direction of the gripper for angle bin θ_D: (10·θ_D + 90)°.
inline Vec2 gripper_closing_axis(int theta_d) {
  const double deg = 10.0 * theta_d + 90.0;
  return unit(deg * std::numbers::pi / 180.0);
}

/// Success oracle: the point lies on the object and the chord across the
/// gripper jaws fits inside the maximum opening.
inline int label_grasp(const WorldObject& obj, Vec2 point, int theta_d) {
  if (theta_d < 0 || theta_d >= kAngleBins) throw IndexError("label_grasp: angle bin outside 0..17");
  if (!obj.contains(point)) return 0;
  return obj.chord_width(point, gripper_closing_axis(theta_d)) <= obj.graspable_width ? 1 : 0;
}

enum class PushHeight : std::uint8_t { low = 0, high = 1 };

/// Planar push in canvas pixels.
struct PushAction {
  Vec2 start;
  Vec2 finish;
  PushHeight height = PushHeight::low;
  friend bool operator==(const PushAction&, const PushAction&) = default;
};

inline double normalize_coord(double px) { return (px - static_cast<double>(kCanvas) / 2.0) / (static_cast<double>(kCanvas) / 2.0); }
inline double denormalize_coord(double v) { return v * (static_cast<double>(kCanvas) / 2.0) + static_cast<double>(kCanvas) / 2.0; }

/// (x_start, y_start, x_final, y_final, z_pushHeight) in [−1, 1]; heights map to ∓0.5.
inline std::array<double, 5> encode_push(const PushAction& a) {
  return {normalize_coord(a.start.x), normalize_coord(a.start.y), normalize_coord(a.finish.x),
          normalize_coord(a.finish.y), a.height == PushHeight::low ? -0.5 : 0.5};
}

inline PushAction decode_push(const std::array<double, 5>& v) {
  return {{denormalize_coord(v[0]), denormalize_coord(v[1])},
          {denormalize_coord(v[2]), denormalize_coord(v[3])},
          v[4] < 0.0 ? PushHeight::low : PushHeight::high};
}

struct PushOutcome {
  Pose pose;
  bool contact = false;
  Vec2 contact_point;
};

inline double push_gain(PushHeight h, const WorldConfig& cfg) { return h == PushHeight::low ? cfg.gain_low : cfg.gain_high; }

/// Quasi-static push: from the first contact point c the remaining travel
/// v = finish − c moves the centroid by gain·v/mass and turns the object by
/// gain·(c − centroid)×v / (mass·inertia). No contact leaves the pose alone.
inline PushOutcome simulate_push(const WorldObject& obj, const PushAction& action, const WorldConfig& cfg = {}) {
  PushOutcome out{obj.pose, false, {}};
  const Vec2 seg = action.finish - action.start;
  const auto iv = obj.clip_line(action.start, seg);
  if (!iv || iv->first > 1.0 || iv->second < 0.0) return out;
  const double tc = std::max(iv->first, 0.0);
  const Vec2 c = action.start + tc * seg;
  const Vec2 v = action.finish - c;
  const double g = push_gain(action.height, cfg) / obj.mass;
  out.contact = true;
  out.contact_point = c;
  out.pose.x += g * v.x;
  out.pose.y += g * v.y;
  out.pose.theta += g * cross(c - obj.centroid(), v) / cfg.inertia;
  return out;
}

inline WorldObject with_pose(WorldObject obj, Pose p) {
  obj.pose = p;
  return obj;
}

/// Poke response (slope, intercept): slope ∝ stiffness, intercept ∝ the
/// object's footprint as a fraction of the canvas. Colour plays no role.
inline std::array<double, 2> simulate_poke(const WorldObject& obj, const WorldConfig& cfg = {}, WorldRng* noise = nullptr) {
  const double canvas_area = static_cast<double>(kCanvas * kCanvas);
  std::array<double, 2> r{cfg.slope_gain * obj.stiffness, cfg.intercept_gain * obj.area() / canvas_area};
  if (noise && cfg.poke_noise > 0.0) {
    std::normal_distribution<double> n(0.0, cfg.poke_noise);
    r[0] += n(*noise);
    r[1] += n(*noise);
  }
  return r;
}

}  // namespace mtask::world
