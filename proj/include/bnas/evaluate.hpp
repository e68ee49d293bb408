#pragma once

// Retraining pipeline: builds the discrete network from a genotype and
// trains it from scratch with SGD + cosine schedule, reporting per-epoch
// metrics and held-out accuracy.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "bnas/dataset.hpp"
#include "bnas/network.hpp"
#include "bnas/optim.hpp"

namespace bnas {

struct EvalConfig {
  int epochs = 30;
  int batch_size = 32;
  float lr = 0.05f;
  float lr_floor = 1e-3f;
  float momentum = 0.9f;
  float weight_decay = 3e-4f;
  uint32_t seed = 0;

  void validate() const {
    if (epochs < 1) throw config_error("eval epochs must be >= 1");
    if (batch_size < 1) throw config_error("eval batch_size must be >= 1");
    if (!(lr > 0.f)) throw config_error("eval lr must be > 0");
    if (lr_floor < 0.f || lr_floor > lr) throw config_error("eval lr_floor must lie in [0, lr]");
    if (momentum < 0.f || weight_decay < 0.f) throw config_error("eval momentum and weight_decay must be >= 0");
  }
};

struct MetricRecord {
  std::string phase;  // "search" or "eval"
  int epoch = 0;
  float loss = 0.f;
  float top1 = 0.f;
  float lr = 0.f;
  int64_t params = 0;
  uint64_t macs = 0;
  double wall_time_s = 0.;
};

struct EvalResult {
  std::vector<MetricRecord> records;
  float test_accuracy = 0.f;
  float test_loss = 0.f;
  ModelCost cost;
};

// Mean top-1 accuracy and cross-entropy over a dataset, eval mode, batched.
inline std::pair<float, float> accuracy_and_loss(StackedBcnn& net, const Dataset& data, int batch_size) {
  int64_t correct = 0;
  double loss_sum = 0.;
  for (int64_t lo = 0; lo < data.size(); lo += batch_size) {
    const int64_t hi = std::min(data.size(), lo + batch_size);
    std::vector<int64_t> idx(static_cast<size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const Tensor x = batch_images(data, idx);
    const std::vector<int> y = batch_labels(data, idx);
    Tape tape;
    Tensor logits = net.forward(tape, x, false);
    Tensor loss = softmax_cross_entropy(tape, logits, y);
    loss_sum += static_cast<double>(loss.values()[0]) * static_cast<double>(hi - lo);
    const int64_t classes = logits.shape().c;
    for (int64_t b = 0; b < hi - lo; ++b) {
      const float* row = logits.values().data() + b * classes;
      int64_t best = 0;
      for (int64_t k = 1; k < classes; ++k)
        if (row[k] > row[best]) best = k;
      correct += best == y[static_cast<size_t>(b)];
    }
  }
  return {static_cast<float>(correct) / static_cast<float>(data.size()),
          static_cast<float>(loss_sum / static_cast<double>(data.size()))};
}

// From-scratch training of the discretized genotype. Each record carries the
// epoch's mean training loss and the test accuracy measured after it.
inline EvalResult evaluate(const StackedBcnnConfig& net_cfg, const Genotype& genotype, const EvalConfig& cfg,
                           const Dataset& train, const Dataset& test) {
  cfg.validate();
  if (train.num_classes != net_cfg.num_classes || test.num_classes != net_cfg.num_classes)
    throw config_error("evaluate: dataset classes do not match the network config");
  const int64_t batches = train.size() / cfg.batch_size;
  if (batches < 1) throw config_error("evaluate: batch_size exceeds the training set");

  StackedBcnn net(net_cfg, genotype, cfg.seed);
  EvalResult result;
  result.cost = count_params_flops(net);
  SgdMomentum opt(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
  const LrSchedule sched{cfg.lr, cfg.lr_floor, cfg.epochs};
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const float lr = cosine_lr(sched, epoch - 1);
    opt.set_lr(lr);
    std::mt19937 rng(mix_seed(cfg.seed, seed_stream::kEval, static_cast<uint32_t>(epoch)));
    const std::vector<int64_t> order = shuffled_indices(train.size(), rng);
    double loss_sum = 0.;
    for (int64_t b = 0; b < batches; ++b) {
      std::vector<int64_t> idx(order.begin() + b * cfg.batch_size, order.begin() + (b + 1) * cfg.batch_size);
      const Tensor x = batch_images(train, idx);
      const std::vector<int> y = batch_labels(train, idx);
      zero_grads(net.parameters());
      Tape tape;
      Tensor logits = net.forward(tape, x, true);
      Tensor loss = softmax_cross_entropy(tape, logits, y);
      const float lv = loss.values()[0];
      if (!std::isfinite(lv)) throw numeric_error("evaluate: non-finite training loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      opt.step();
      loss_sum += lv;
    }
    const auto [acc, tloss] = accuracy_and_loss(net, test, cfg.batch_size);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.records.push_back(MetricRecord{"eval", epoch, static_cast<float>(loss_sum / static_cast<double>(batches)),
                                          acc, lr, result.cost.params, result.cost.macs, wall});
    result.test_accuracy = acc;
    result.test_loss = tloss;
  }
  return result;
}

}  // namespace bnas
