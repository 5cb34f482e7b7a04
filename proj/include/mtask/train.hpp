#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mtask/dataset.hpp"
#include "mtask/losses.hpp"
#include "mtask/net.hpp"
#include "mtask/optim.hpp"

namespace mtask {

/// Raised when a batch loss is NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stacks HWC u8 images into an [N,3,64,64] tensor scaled to [0,1].
inline Tensor images_to_tensor(std::span<const world::Image* const> images) {
  constexpr std::size_t side = world::kCanvas;
  constexpr std::size_t plane = side * side;
  Tensor t(Shape{images.size(), 3, side, side});
  auto out = t.data();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = *images[n];
    if (img.size() != world::kImageBytes) throw DimensionError("images_to_tensor: image is not 64x64x3");
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) out[(n * 3 + c) * plane + p] = static_cast<double>(img[p * 3 + c]) / 255.0;
  }
  return t;
}

struct GraspBatch {
  Tensor patches;
  std::vector<int> theta_d;
  std::vector<int> success;
};

struct PushBatch {
  Tensor begin;
  Tensor end;
  Tensor action;
};

struct PokeBatch {
  Tensor images;
  Tensor response;
};

struct TaskBatches {
  std::optional<GraspBatch> grasp;
  std::optional<PushBatch> push;
  std::optional<PokeBatch> poke;

  bool empty() const { return !grasp && !push && !poke; }
};

/// L_BG, L_BP, L_BPoke for one step; absent tasks stay empty.
struct BatchLosses {
  std::optional<double> grasp;
  std::optional<double> push;
  std::optional<double> poke;
};

inline GraspBatch make_grasp_batch(const GraspDataset& ds, std::span<const std::size_t> idx) {
  std::vector<const world::Image*> imgs;
  GraspBatch b;
  for (auto i : idx) {
    const auto& r = ds.records.at(i);
    imgs.push_back(&r.patch);
    b.theta_d.push_back(r.theta_d);
    b.success.push_back(r.success);
  }
  b.patches = images_to_tensor(imgs);
  return b;
}

inline PushBatch make_push_batch(const PushDataset& ds, std::span<const std::size_t> idx) {
  std::vector<const world::Image*> begin, end;
  std::vector<double> actions;
  for (auto i : idx) {
    const auto& r = ds.records.at(i);
    begin.push_back(&r.begin);
    end.push_back(&r.end);
    actions.insert(actions.end(), r.action.begin(), r.action.end());
  }
  return PushBatch{images_to_tensor(begin), images_to_tensor(end), Tensor(Shape{idx.size(), 5}, std::move(actions))};
}

inline PokeBatch make_poke_batch(const PokeDataset& ds, std::span<const std::size_t> idx) {
  std::vector<const world::Image*> imgs;
  std::vector<double> resp;
  for (auto i : idx) {
    const auto& r = ds.records.at(i);
    imgs.push_back(&r.image);
    resp.insert(resp.end(), r.response.begin(), r.response.end());
  }
  return PokeBatch{images_to_tensor(imgs), Tensor(Shape{idx.size(), 2}, std::move(resp))};
}

/// Builds L_BG + L_BP + L_BPoke on `tape` for whichever batches are present
/// and reports the individual terms.
inline Tensor build_joint_loss(Tape& tape, MultiTaskNet& net, const TaskBatches& batches, ForwardContext ctx,
                               BatchLosses& losses) {
  if (batches.empty()) throw ContractError("joint_step: no task batch present");
  std::optional<Tensor> total;
  auto accumulate = [&](Tensor term) { total = total ? add(tape, *total, term) : term; };
  if (batches.grasp) {
    const auto& b = *batches.grasp;
    auto l = grasp_loss(tape, net.grasp_forward(tape, b.patches, ctx), b.theta_d, b.success);
    losses.grasp = l.item();
    accumulate(l);
  }
  if (batches.push) {
    const auto& b = *batches.push;
    auto l = push_loss(tape, net.push_forward(tape, b.begin, b.end, ctx), b.action);
    losses.push = l.item();
    accumulate(l);
  }
  if (batches.poke) {
    const auto& b = *batches.poke;
    auto l = poke_loss(tape, net.poke_forward(tape, b.images, ctx), b.response);
    losses.poke = l.item();
    accumulate(l);
  }
  return *total;
}

/// One joint update. The trunk receives the summed gradient of every present
/// task loss; each head only its own. Heads of absent tasks get no gradient
/// and therefore no update and no optimizer-state change.
inline BatchLosses joint_step(MultiTaskNet& net, RmsProp& opt, const TaskBatches& batches, Rng& rng) {
  net.params().zero_grad();
  BatchLosses losses;
  Tape tape;
  auto total = build_joint_loss(tape, net, batches, {Mode::train, &rng}, losses);
  if (!std::isfinite(total.item())) throw NumericError("joint_step: non-finite loss");
  tape.backward(total);
  opt.step(net.params().parameters());
  net.params().zero_grad();
  return losses;
}

/// Training sets for the tasks taking part in a run; null means absent.
struct TrainingData {
  const GraspDataset* grasp = nullptr;
  const PushDataset* push = nullptr;
  const PokeDataset* poke = nullptr;
};

/// Network, optimizer and the single random stream that drives both batch
/// sampling and dropout. Its full state is what a checkpoint captures.
class Trainer {
 public:
  Trainer(const NetConfig& net_config, const RmsPropConfig& opt_config, std::uint64_t seed)
      : net_(net_config, seed), opt_(opt_config), rng_(splitmix64(seed ^ 0x747261696eULL)) {}

  Trainer(MultiTaskNet net, RmsProp opt, Rng rng) : net_(std::move(net)), opt_(std::move(opt)), rng_(rng) {}

  MultiTaskNet& net() { return net_; }
  const MultiTaskNet& net() const { return net_; }
  RmsProp& optimizer() { return opt_; }
  const RmsProp& optimizer() const { return opt_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  std::uint64_t iteration() const { return opt_.iteration(); }

  /// Samples a batch per present task, with replacement, then takes one joint step.
  BatchLosses step(const TrainingData& data, std::size_t batch_size) {
    TaskBatches batches;
    auto draw = [&](std::size_t n) {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::vector<std::size_t> idx(batch_size);
      for (auto& i : idx) i = pick(rng_);
      return idx;
    };
    if (data.grasp && !data.grasp->empty()) batches.grasp = make_grasp_batch(*data.grasp, draw(data.grasp->size()));
    if (data.push && !data.push->empty()) batches.push = make_push_batch(*data.push, draw(data.push->size()));
    if (data.poke && !data.poke->empty()) batches.poke = make_poke_batch(*data.poke, draw(data.poke->size()));
    return joint_step(net_, opt_, batches, rng_);
  }

 private:
  MultiTaskNet net_;
  RmsProp opt_;
  Rng rng_;
};

}  // namespace mtask
