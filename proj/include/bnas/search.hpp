#pragma once

// Bilevel search loop: alternating SGD steps on network weights and Adam
// steps on architecture/embedding weights, with rank-stability early
// stopping. One epoch walks the train and val halves in lockstep; masks for
// the partial-channel edges are resampled once per epoch.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bnas/dataset.hpp"
#include "bnas/optim.hpp"
#include "bnas/supernet.hpp"

namespace bnas {

struct SearchConfig {
  StackedBcnnConfig net;
  int max_epochs = 50;
  int batch_size = 16;
  float network_lr = 0.025f;
  float lr_floor = 1e-3f;
  float momentum = 0.9f;
  float weight_decay = 3e-4f;
  float arch_lr = 3e-4f;
  float arch_weight_decay = 1e-3f;
  float virtual_step = -1.f;  // <0: track the network lr; 0: first-order mode
  int stop_patience = 3;
  bool kes = false;
  int partial_k = 4;
  uint32_t seed = 0;

  void validate() const {
    net.validate();
    if (max_epochs < 1) throw config_error("max_epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (stop_patience < 1) throw config_error("stop_patience must be >= 1");
    if (!(network_lr > 0.f)) throw config_error("network_lr must be > 0");
    if (lr_floor < 0.f || lr_floor > network_lr) throw config_error("lr_floor must lie in [0, network_lr]");
    if (!(arch_lr > 0.f)) throw config_error("arch_lr must be > 0");
    if (momentum < 0.f || weight_decay < 0.f || arch_weight_decay < 0.f)
      throw config_error("momentum and weight decays must be >= 0");
    if (partial_k < 1) throw config_error("partial_k must be >= 1");
  }
};

struct TrajectoryRow {
  int epoch = 0;  // 1-based
  float train_loss = 0.f;
  float val_loss = 0.f;
  uint64_t rank_fingerprint = 0;
  int q = 0;
  float lr = 0.f;
};

struct SearchState {
  int epoch = 0;
  int q = 0;
  bool has_prev = false;
  ArchRank prev;
  bool stopped = false;
};

struct SearchResult {
  Genotype genotype;
  std::vector<TrajectoryRow> trajectory;
  bool early_stopped = false;
  int epochs_run = 0;
};

// Rank-stability test: q counts the length of the current run of identical
// consecutive ranks, so the comparison must happen before prev is replaced.
inline bool early_stop_check(SearchState& state, const ArchRank& current, int patience) {
  if (patience < 1) throw value_error("early_stop_check: patience must be >= 1");
  if (state.has_prev && current == state.prev)
    state.q += 1;
  else
    state.q = 1;
  state.prev = current;
  state.has_prev = true;
  state.stopped = state.q >= patience;
  return state.stopped;
}

// One SGD step on the network weights. Architecture parameters receive
// gradients on the tape but their values stay untouched.
inline float weight_step(Supernet& net, SgdMomentum& opt, const Tensor& images, const std::vector<int>& labels) {
  zero_grads(net.weight_params());
  zero_grads(net.arch_params());
  Tape tape;
  Tensor logits = net.forward(tape, images, true);
  Tensor loss = softmax_cross_entropy(tape, logits, labels);
  const float lv = loss.values()[0];
  if (!std::isfinite(lv)) throw numeric_error("weight_step: non-finite training loss " + std::to_string(lv));
  tape.backward(loss);
  opt.step();
  return lv;
}

// One Adam step on the architecture parameters. With xi > 0 the gradient is
// taken at virtual weights w' = w - xi * grad_w(train loss); the real
// weights are restored bitwise afterwards. xi = 0 skips the virtual step.
inline float arch_step(Supernet& net, Adam& opt, const Tensor& val_images, const std::vector<int>& val_labels,
                       float xi, const Tensor& train_images, const std::vector<int>& train_labels) {
  if (xi < 0.f) throw value_error("arch_step: xi must be >= 0");
  const std::vector<Parameter*> weights = net.weight_params();
  const std::vector<Parameter*> arch = net.arch_params();

  std::vector<std::vector<float>> saved;
  if (xi > 0.f) {
    zero_grads(weights);
    zero_grads(arch);
    Tape tape;
    Tensor logits = net.forward(tape, train_images, true);
    Tensor loss = softmax_cross_entropy(tape, logits, train_labels);
    if (!std::isfinite(loss.values()[0]))
      throw numeric_error("arch_step: non-finite training loss " + std::to_string(loss.values()[0]));
    tape.backward(loss);
    saved.reserve(weights.size());
    for (Parameter* p : weights) {
      saved.push_back(p->value.values());
      auto& v = p->value.values();
      for (size_t i = 0; i < v.size(); ++i) v[i] -= xi * p->grad[i];
    }
  }

  zero_grads(arch);
  zero_grads(weights);  // keep weight grads clean for the caller
  float lv = 0.f;
  {
    Tape tape;
    Tensor logits = net.forward(tape, val_images, true);
    Tensor loss = softmax_cross_entropy(tape, logits, val_labels);
    lv = loss.values()[0];
    if (!std::isfinite(lv)) throw numeric_error("arch_step: non-finite validation loss " + std::to_string(lv));
    tape.backward(loss);
  }
  opt.step();

  if (xi > 0.f)
    for (size_t i = 0; i < weights.size(); ++i) weights[i]->value.values() = std::move(saved[i]);
  return lv;
}

// Full search: returns the discretized genotype at the stopping epoch (or at
// max_epochs with early_stopped = false) plus the per-epoch trajectory.
inline SearchResult run_search(const SearchConfig& cfg, const Dataset& data) {
  cfg.validate();
  if (data.num_classes != cfg.net.num_classes)
    throw config_error("dataset has " + std::to_string(data.num_classes) + " classes, config expects " +
                       std::to_string(cfg.net.num_classes));
  if (data.channels != cfg.net.in_channels || data.height != cfg.net.input_size || data.width != cfg.net.input_size)
    throw config_error("dataset geometry does not match the network config");

  auto [train, val] = split_train_val(data, cfg.seed);
  const int64_t batches = std::min(train.size(), val.size()) / cfg.batch_size;
  if (batches < 1) throw config_error("batch_size exceeds the train/val split size");

  Supernet net(cfg.net, SupernetOptions{cfg.partial_k, cfg.kes}, cfg.seed);
  SgdMomentum w_opt(net.weight_params(), cfg.network_lr, cfg.momentum, cfg.weight_decay);
  Adam a_opt(net.arch_params(), cfg.arch_lr, 0.5f, 0.999f, 1e-8f, cfg.arch_weight_decay);
  const LrSchedule sched{cfg.network_lr, cfg.lr_floor, cfg.max_epochs};

  SearchResult result;
  SearchState state;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const float lr = cosine_lr(sched, epoch - 1);
    w_opt.set_lr(lr);
    const float xi = cfg.virtual_step < 0.f ? lr : cfg.virtual_step;

    std::mt19937 mask_rng(mix_seed(cfg.seed, seed_stream::kMask, static_cast<uint32_t>(epoch)));
    net.resample_masks(mask_rng);
    std::mt19937 train_rng(mix_seed(cfg.seed, seed_stream::kTrainShuffle, static_cast<uint32_t>(epoch)));
    std::mt19937 val_rng(mix_seed(cfg.seed, seed_stream::kValShuffle, static_cast<uint32_t>(epoch)));
    const std::vector<int64_t> train_idx = shuffled_indices(train.size(), train_rng);
    const std::vector<int64_t> val_idx = shuffled_indices(val.size(), val_rng);

    double train_sum = 0., val_sum = 0.;
    for (int64_t b = 0; b < batches; ++b) {
      std::vector<int64_t> tb(train_idx.begin() + b * cfg.batch_size, train_idx.begin() + (b + 1) * cfg.batch_size);
      std::vector<int64_t> vb(val_idx.begin() + b * cfg.batch_size, val_idx.begin() + (b + 1) * cfg.batch_size);
      const Tensor tx = batch_images(train, tb);
      const std::vector<int> ty = batch_labels(train, tb);
      const Tensor vx = batch_images(val, vb);
      const std::vector<int> vy = batch_labels(val, vb);
      train_sum += weight_step(net, w_opt, tx, ty);
      val_sum += arch_step(net, a_opt, vx, vy, xi, tx, ty);
    }

    const ArchRank rank = arch_rank(net);
    const bool stop = early_stop_check(state, rank, cfg.stop_patience);
    state.epoch = epoch;
    result.trajectory.push_back(TrajectoryRow{epoch, static_cast<float>(train_sum / static_cast<double>(batches)),
                                              static_cast<float>(val_sum / static_cast<double>(batches)),
                                              rank.fingerprint(), state.q, lr});
    result.epochs_run = epoch;
    if (stop) {
      result.early_stopped = true;
      break;
    }
  }
  result.genotype = net.discretize();
  return result;
}

}  // namespace bnas
