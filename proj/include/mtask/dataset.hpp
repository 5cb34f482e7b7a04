#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtask/world.hpp"

namespace mtask {

enum class Task : std::uint8_t { grasp = 0, push = 1, poke = 2 };

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::grasp: return "grasp";
    case Task::push: return "push";
    case Task::poke: return "poke";
  }
  return "?";
}

enum class Pool : std::uint8_t { train = 0, novel = 1 };

inline std::string_view pool_name(Pool p) { return p == Pool::train ? "train" : "novel"; }

struct GraspSample {
  world::Image patch;
  std::uint8_t theta_d = 0;  // attempted angle is 10·theta_d degrees
  std::uint8_t success = 0;
  friend bool operator==(const GraspSample&, const GraspSample&) = default;
};

struct PushSample {
  world::Image begin;
  world::Image end;
  std::array<double, 5> action{};  // normalized A_P
  friend bool operator==(const PushSample&, const PushSample&) = default;
};

struct PokeSample {
  world::Image image;
  std::array<double, 2> response{};  // (slope, intercept)
  friend bool operator==(const PokeSample&, const PokeSample&) = default;
};

template <class Sample>
struct Dataset {
  std::vector<Sample> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

using GraspDataset = Dataset<GraspSample>;
using PushDataset = Dataset<PushSample>;
using PokeDataset = Dataset<PokeSample>;

template <class S>
constexpr Task task_of();
template <>
constexpr Task task_of<GraspSample>() { return Task::grasp; }
template <>
constexpr Task task_of<PushSample>() { return Task::push; }
template <>
constexpr Task task_of<PokeSample>() { return Task::poke; }

struct TaskMix {
  std::size_t grasp = 0;
  std::size_t push = 0;
  std::size_t poke = 0;
  std::size_t total() const { return grasp + push + poke; }
  friend bool operator==(const TaskMix&, const TaskMix&) = default;
};

struct DatasetBundle {
  std::optional<GraspDataset> grasp;
  std::optional<PushDataset> push;
  std::optional<PokeDataset> poke;
};

struct GenerationOptions {
  world::WorldConfig world;
  std::size_t objects_per_set = 64;  // distinct objects a dataset draws from
};

/// Object seeds live in disjoint halves of the 64-bit space per pool, so a
/// novel-pool object can never coincide with a training object.
constexpr std::uint64_t kPoolSpan = std::uint64_t{1} << 40;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t object_seed(Pool pool, std::uint64_t dataset_seed, std::size_t k) {
  const std::uint64_t base = pool == Pool::train ? 0 : kPoolSpan;
  return base + splitmix64(splitmix64(dataset_seed) ^ (0x51ED270B2A1F4C3DULL * (k + 1))) % kPoolSpan;
}

inline std::vector<world::WorldObject> object_set(Pool pool, std::uint64_t seed, const GenerationOptions& opt) {
  std::vector<world::WorldObject> out;
  out.reserve(opt.objects_per_set);
  for (std::size_t k = 0; k < opt.objects_per_set; ++k) out.push_back(world::gen_object(object_seed(pool, seed, k), opt.world));
  return out;
}

/// Independent random stream for one record; serial and parallel builds agree.
inline world::WorldRng sample_rng(std::uint64_t seed, Pool pool, Task task, std::size_t index) {
  return world::make_rng({seed, static_cast<std::uint64_t>(pool), static_cast<std::uint64_t>(task), index});
}

struct GraspAttempt {
  world::Vec2 point;
  int theta_d = 0;
  int success = 0;
};

namespace detail {

inline std::optional<GraspAttempt> find_on_object(const world::WorldObject& obj, int want, world::WorldRng& rng,
                                                  int tries = 400) {
  const auto e = obj.extent();
  std::uniform_int_distribution<int> bin(0, world::kAngleBins - 1);
  for (int i = 0; i < tries; ++i) {
    const world::Vec2 p{world::uniform(rng, e[0], e[1]), world::uniform(rng, e[2], e[3])};
    if (!obj.contains(p)) continue;
    const int t = bin(rng);
    if (world::label_grasp(obj, p, t) == want) return GraspAttempt{p, t, want};
  }
  return std::nullopt;
}

inline GraspAttempt background_attempt(const world::WorldObject& obj, world::WorldRng& rng) {
  const double side = static_cast<double>(world::kCanvas);
  std::uniform_int_distribution<int> bin(0, world::kAngleBins - 1);
  for (;;) {
    const world::Vec2 p{world::uniform(rng, 0.0, side), world::uniform(rng, 0.0, side)};
    if (!obj.contains(p)) return GraspAttempt{p, bin(rng), 0};
  }
}

}  // namespace detail

/// Draws one grasp attempt on `obj`. Balanced mode first picks the label
/// (50/50) and rejection-samples a matching point/angle; negatives are split
/// between on-object misses and background. Unbalanced mode samples the
/// point near the object and the angle uniformly and keeps the natural label.
inline std::optional<GraspAttempt> sample_grasp_attempt(const world::WorldObject& obj, world::WorldRng& rng,
                                                        const world::WorldConfig& cfg) {
  if (!cfg.balanced) {
    const auto e = obj.extent();
    const double side = static_cast<double>(world::kCanvas);
    const world::Vec2 p{world::uniform(rng, std::max(0.0, e[0] - 6.0), std::min(side, e[1] + 6.0)),
                        world::uniform(rng, std::max(0.0, e[2] - 6.0), std::min(side, e[3] + 6.0))};
    const int t = std::uniform_int_distribution<int>(0, world::kAngleBins - 1)(rng);
    return GraspAttempt{p, t, world::label_grasp(obj, p, t)};
  }
  if (std::bernoulli_distribution(0.5)(rng)) return detail::find_on_object(obj, 1, rng);
  if (std::bernoulli_distribution(cfg.on_object_negative_fraction)(rng)) {
    if (auto miss = detail::find_on_object(obj, 0, rng)) return miss;
  }
  return detail::background_attempt(obj, rng);
}

inline GraspSample make_grasp_sample(const std::vector<world::WorldObject>& objects, world::WorldRng& rng,
                                     const world::WorldConfig& cfg) {
  std::uniform_int_distribution<std::size_t> pick(0, objects.size() - 1);
  for (;;) {
    const auto& obj = objects[pick(rng)];
    if (auto a = sample_grasp_attempt(obj, rng, cfg)) {
      return GraspSample{world::render_patch(obj, a->point, cfg), static_cast<std::uint8_t>(a->theta_d),
                         static_cast<std::uint8_t>(a->success)};
    }
  }
}

/// A push record together with the hidden state that produced it.
struct PushExample {
  PushSample sample;
  world::WorldObject before;
  world::WorldObject after;
  world::PushAction action;
};

/// Picks a boundary contact point, an inward direction and a travel d; the
/// push starts approach·d before contact. Pushes that would carry the object
/// past the canvas margin (or start/end off-canvas) are resampled.
inline PushExample make_push_example(const std::vector<world::WorldObject>& objects, world::WorldRng& rng,
                                     const world::WorldConfig& cfg) {
  using namespace world;
  std::uniform_int_distribution<std::size_t> pick(0, objects.size() - 1);
  const double side = static_cast<double>(kCanvas);
  auto on_canvas = [&](Vec2 p) { return p.x >= 0.0 && p.x <= side && p.y >= 0.0 && p.y <= side; };
  for (;;) {
    const auto& obj = objects[pick(rng)];
    const Vec2 ray = unit(uniform(rng, 0.0, 2.0 * std::numbers::pi));
    const auto iv = obj.clip_line(obj.centroid(), ray);
    if (!iv) continue;
    const Vec2 contact = obj.centroid() + iv->second * ray;
    const Vec2 dir = rotate(-1.0 * ray, uniform(rng, -0.6, 0.6));
    const double travel = uniform(rng, cfg.travel_min, cfg.travel_max);
    const PushHeight height = std::bernoulli_distribution(0.5)(rng) ? PushHeight::high : PushHeight::low;
    if (!obj.contains(contact + 1e-3 * dir)) continue;  // grazing direction
    PushAction action{contact - (cfg.approach * travel) * dir, contact + travel * dir, height};
    if (!on_canvas(action.start) || !on_canvas(action.finish)) continue;
    const auto outcome = simulate_push(obj, action, cfg);
    if (!outcome.contact) continue;
    WorldObject after = with_pose(obj, outcome.pose);
    if (!check_object(after, cfg).empty()) continue;
    return PushExample{PushSample{render(obj, cfg), render(after, cfg), encode_push(action)}, obj, after, action};
  }
}

inline PokeSample make_poke_sample(const std::vector<world::WorldObject>& objects, world::WorldRng& rng,
                                   const world::WorldConfig& cfg) {
  std::uniform_int_distribution<std::size_t> pick(0, objects.size() - 1);
  const auto& obj = objects[pick(rng)];
  return PokeSample{world::render(obj, cfg), world::simulate_poke(obj, cfg, &rng)};
}

inline GraspDataset generate_grasp(std::size_t n, std::uint64_t seed, Pool pool, const GenerationOptions& opt = {}) {
  const auto objects = object_set(pool, seed, opt);
  GraspDataset ds;
  ds.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, pool, Task::grasp, i);
    ds.records.push_back(make_grasp_sample(objects, rng, opt.world));
  }
  return ds;
}

inline std::vector<PushExample> generate_push_examples(std::size_t n, std::uint64_t seed, Pool pool,
                                                       const GenerationOptions& opt = {}) {
  const auto objects = object_set(pool, seed, opt);
  std::vector<PushExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, pool, Task::push, i);
    out.push_back(make_push_example(objects, rng, opt.world));
  }
  return out;
}

inline PushDataset generate_push(std::size_t n, std::uint64_t seed, Pool pool, const GenerationOptions& opt = {}) {
  PushDataset ds;
  for (auto& ex : generate_push_examples(n, seed, pool, opt)) ds.records.push_back(std::move(ex.sample));
  return ds;
}

inline PokeDataset generate_poke(std::size_t n, std::uint64_t seed, Pool pool, const GenerationOptions& opt = {}) {
  const auto objects = object_set(pool, seed, opt);
  PokeDataset ds;
  ds.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, pool, Task::poke, i);
    ds.records.push_back(make_poke_sample(objects, rng, opt.world));
  }
  return ds;
}

/// Generates the requested mix. Tasks with a zero count are left absent.
inline DatasetBundle build_dataset(const TaskMix& mix, std::uint64_t seed, Pool pool, const GenerationOptions& opt = {}) {
  if (mix.total() == 0) throw ContractError("build_dataset: task mix requests zero records");
  DatasetBundle b;
  if (mix.grasp) b.grasp = generate_grasp(mix.grasp, seed, pool, opt);
  if (mix.push) b.push = generate_push(mix.push, seed, pool, opt);
  if (mix.poke) b.poke = generate_poke(mix.poke, seed, pool, opt);
  return b;
}

}  // namespace mtask
