#pragma once

// Discrete Stacked BCNN construction from a genotype: cells, mini BCNNs with
// their knowledge embeddings, stage compression, GAP fusion and the
// classifier, plus parameter/MAC accounting.

#include <algorithm>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bnas/channel_plan.hpp"
#include "bnas/kes.hpp"
#include "bnas/nn.hpp"

namespace bnas {

// A discrete cell. Two preprocessed inputs, n_in intermediate nodes with two
// incoming edges each, output = concat of all intermediate nodes. Stride-2
// cells stride only the edges sourced at input nodes; reduce_s0 swaps the
// first preprocessing for a factorized reduction when input 0 arrives at
// twice the working resolution.
class Cell {
 public:
  Cell(const CellTopology& topo, int stride, int c_prev_prev, int c_prev, int c_node, bool reduce_s0,
       std::mt19937& rng)
      : n_in_(topo.n_in), c_node_(c_node) {
    topo.validate();
    if (stride != 1 && stride != 2) throw config_error("cell: stride must be 1 or 2");
    if (reduce_s0)
      pre0_reduce_ = std::make_unique<FactorizedReduce>(c_prev_prev, c_node, rng);
    else
      pre0_ = std::make_unique<ReluConvBn>(c_prev_prev, c_node, 1, 1, 0, 1, rng);
    pre1_ = std::make_unique<ReluConvBn>(c_prev, c_node, 1, 1, 0, 1, rng);

    CellTopology canon = topo;
    canon.canonicalize();
    edges_.reserve(canon.edges.size());
    for (const CellEdge& e : canon.edges) {
      const int op_stride = (stride == 2 && e.source < 2) ? 2 : 1;
      edges_.push_back(Edge{e.target, e.source, make_op(e.op, c_node, op_stride, rng)});
    }
  }

  // states_out, when given, receives the per-node tensors (2 inputs followed
  // by the intermediate nodes) for tests that check node arithmetic.
  Tensor forward(Tape& t, const Tensor& s0, const Tensor& s1, bool training,
                 std::vector<Tensor>* states_out = nullptr) {
    std::vector<Tensor> states;
    states.reserve(static_cast<size_t>(n_in_) + 2);
    states.push_back(pre0_reduce_ ? pre0_reduce_->forward(t, s0, training) : pre0_->forward(t, s0, training));
    states.push_back(pre1_->forward(t, s1, training));
    for (int node = 2; node < 2 + n_in_; ++node) {
      Tensor acc;
      bool first = true;
      for (Edge& e : edges_) {
        if (e.target != node) continue;
        Tensor y = e.op->forward(t, states[static_cast<size_t>(e.source)], training);
        acc = first ? y : add(t, acc, y);
        first = false;
      }
      states.push_back(acc);
    }
    Tensor out = concat_channels(t, {states.begin() + 2, states.end()});
    if (states_out) *states_out = std::move(states);
    return out;
  }

  int out_channels() const { return n_in_ * c_node_; }

  void collect(std::vector<Parameter*>& out) {
    if (pre0_reduce_)
      pre0_reduce_->collect(out);
    else
      pre0_->collect(out);
    pre1_->collect(out);
    for (Edge& e : edges_) e.op->collect(out);
  }

 private:
  struct Edge {
    int target;
    int source;
    std::unique_ptr<CandidateOp> op;
  };

  int n_in_, c_node_;
  std::unique_ptr<ReluConvBn> pre0_, pre1_;
  std::unique_ptr<FactorizedReduce> pre0_reduce_;
  std::vector<Edge> edges_;
};

inline Cell build_cell(const CellTopology& topo, int stride, int c_prev_prev, int c_prev, int c_node,
                       std::mt19937& rng, bool reduce_s0 = false) {
  return Cell(topo, stride, c_prev_prev, c_prev, c_node, reduce_s0, rng);
}

// Module-level connection of one mini BCNN, used to check the built wiring
// against the reference stage layout.
struct WireEdge {
  std::string from, to;
  bool operator==(const WireEdge&) const = default;
  bool operator<(const WireEdge& o) const { return from != o.from ? from < o.from : to < o.to; }
};

// One stage: k chained deep cells, a stride-2 broad cell fed by the last two
// deep outputs, an enhancement cell fed by embedded deep/broad features, and
// the three embedded outputs concatenated as the stage result.
class MiniBcnn {
 public:
  MiniBcnn(const Genotype& g, const StagePlan& plan, int k, std::mt19937& rng) : k_(k), plan_(plan) {
    if (plan.c_deep % g.n_in != 0 || plan.c_broad % g.n_in != 0)
      throw config_error("stage " + std::to_string(plan.index) + ": cell width not divisible by n_in");
    const int cn_deep = plan.c_deep / g.n_in;
    const int cn_broad = plan.c_broad / g.n_in;
    const int cn_enh = plan.c_enh / g.n_in;

    // Widths of (y_{j-2}, y_{j-1}) as the deep chain advances.
    int cpp = plan.in_ch, cp = plan.in_ch;
    for (int j = 0; j < k; ++j) {
      deep_.emplace_back(g.conv_cell, 1, cpp, cp, cn_deep, false, rng);
      cpp = cp;
      cp = plan.c_deep;
    }
    broad_ = std::make_unique<Cell>(g.conv_cell, 2, cpp, cp, cn_broad, false, rng);

    emb_deep_out_ = std::make_unique<Conv2d>(plan.deep_to_out.in_ch, plan.deep_to_out.out_ch, 1,
                                             plan.deep_to_out.stride, 0, 1, 1, rng);
    emb_broad_out_ = std::make_unique<Conv2d>(plan.broad_to_out.in_ch, plan.broad_to_out.out_ch, 1,
                                              plan.broad_to_out.stride, 0, 1, 1, rng);
    emb_enh_out_ = std::make_unique<Conv2d>(plan.enh_to_out.in_ch, plan.enh_to_out.out_ch, 1,
                                            plan.enh_to_out.stride, 0, 1, 1, rng);
    emb_deep_enh_ = std::make_unique<Conv2d>(plan.deep_to_enh.in_ch, plan.deep_to_enh.out_ch, 1,
                                             plan.deep_to_enh.stride, 0, 1, 1, rng);
    emb_broad_enh_ = std::make_unique<Conv2d>(plan.broad_to_enh.in_ch, plan.broad_to_enh.out_ch, 1,
                                              plan.broad_to_enh.stride, 0, 1, 1, rng);

    // Input 0 (embedded deep features) still has the stage input resolution;
    // the enhancement cell works at the post-broad resolution.
    enh_ = std::make_unique<Cell>(g.enh_cell, 1, plan.deep_to_enh.out_ch, plan.broad_to_enh.out_ch, cn_enh,
                                  /*reduce_s0=*/true, rng);
  }

  Tensor forward(Tape& t, const Tensor& input, bool training) {
    Tensor ypp = input, yp = input;
    for (Cell& d : deep_) {
      Tensor y = d.forward(t, ypp, yp, training);
      ypp = yp;
      yp = y;
    }
    Tensor yb = broad_->forward(t, ypp, yp, training);
    Tensor ye = enh_->forward(t, emb_deep_enh_->forward(t, yp), emb_broad_enh_->forward(t, yb), training);
    return concat_channels(
        t, {emb_deep_out_->forward(t, yp), emb_broad_out_->forward(t, yb), emb_enh_out_->forward(t, ye)});
  }

  // Canonical module-level edge list (duplicates kept: one entry per input
  // slot). Node j of the deep chain is named "deep<j>"; j <= 0 is "input".
  std::vector<WireEdge> wiring() const {
    auto deep_name = [](int j) { return j <= 0 ? std::string("input") : "deep" + std::to_string(j); };
    std::vector<WireEdge> e;
    for (int j = 1; j <= k_; ++j) {
      e.push_back({deep_name(j - 2), deep_name(j)});
      e.push_back({deep_name(j - 1), deep_name(j)});
    }
    e.push_back({deep_name(k_ - 1), "broad"});
    e.push_back({deep_name(k_), "broad"});
    e.push_back({deep_name(k_), "emb_deep_enh"});
    e.push_back({"emb_deep_enh", "enh"});
    e.push_back({"broad", "emb_broad_enh"});
    e.push_back({"emb_broad_enh", "enh"});
    e.push_back({deep_name(k_), "emb_deep_out"});
    e.push_back({"broad", "emb_broad_out"});
    e.push_back({"enh", "emb_enh_out"});
    e.push_back({"emb_deep_out", "output"});
    e.push_back({"emb_broad_out", "output"});
    e.push_back({"emb_enh_out", "output"});
    std::sort(e.begin(), e.end());
    return e;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Cell& d : deep_) d.collect(out);
    broad_->collect(out);
    enh_->collect(out);
    for (Conv2d* c : {emb_deep_out_.get(), emb_broad_out_.get(), emb_enh_out_.get(), emb_deep_enh_.get(),
                      emb_broad_enh_.get()})
      c->collect(out);
  }

 private:
  int k_;
  StagePlan plan_;
  std::vector<Cell> deep_;
  std::unique_ptr<Cell> broad_, enh_;
  std::unique_ptr<Conv2d> emb_deep_out_, emb_broad_out_, emb_enh_out_, emb_deep_enh_, emb_broad_enh_;
};

inline MiniBcnn build_mini_bcnn(const Genotype& g, const StagePlan& plan, int k, std::mt19937& rng) {
  return MiniBcnn(g, plan, k, rng);
}

// Full network: stem -> u stages -> per-stage GAP -> concat -> classifier.
// Non-final stage outputs are compressed by a 1x1 conv to the next stage's
// input width; that compressed tensor feeds both the next stage and GAP.
class StackedBcnn {
 public:
  StackedBcnn(const StackedBcnnConfig& cfg, const Genotype& g, uint32_t seed) : cfg_(cfg) {
    cfg.validate();
    g.validate();
    if (g.n_in != cfg.n_in)
      throw config_error("genotype n_in=" + std::to_string(g.n_in) + " differs from config n_in=" +
                         std::to_string(cfg.n_in));
    plan_ = channel_plan(cfg);
    if (!g.embedding_channels.empty()) {
      validate_embedding_choices(plan_, g.embedding_channels);
      apply_embedding_choices(plan_, g.embedding_channels);
    }

    std::mt19937 rng(mix_seed(seed, seed_stream::kInit));
    stem_conv_ = std::make_unique<Conv2d>(cfg.in_channels, cfg.c, 3, cfg.stem_stride, 1, 1, 1, rng);
    stem_bn_ = std::make_unique<BatchNorm2d>(cfg.c);
    for (int i = 0; i < cfg.u; ++i) {
      stages_.emplace_back(g, plan_.stages[static_cast<size_t>(i)], cfg.k, rng);
      if (i + 1 < cfg.u) {
        const StagePlan& s = plan_.stages[static_cast<size_t>(i)];
        compress_.emplace_back(s.concat_ch, s.out_ch, 1, 1, 0, 1, 1, rng);
      }
    }
    classifier_ = std::make_unique<Linear>(plan_.gap_ch, cfg.num_classes, rng);
  }

  Tensor forward(Tape& t, const Tensor& x, bool training) {
    if (x.shape().c != cfg_.in_channels || x.shape().h != cfg_.input_size || x.shape().w != cfg_.input_size)
      throw shape_error("network expects (N," + std::to_string(cfg_.in_channels) + "," +
                        std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "), got " +
                        to_string(x.shape()));
    Tensor s = stem_bn_->forward(t, stem_conv_->forward(t, x), training);
    std::vector<Tensor> gap_parts;
    for (size_t i = 0; i < stages_.size(); ++i) {
      Tensor y = stages_[i].forward(t, s, training);
      if (i + 1 < stages_.size()) y = compress_[i].forward(t, y);
      gap_parts.push_back(global_avg_pool(t, y));
      s = y;
    }
    return classifier_->forward(t, concat_channels(t, gap_parts));
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    stem_conv_->collect(out);
    stem_bn_->collect(out);
    for (MiniBcnn& st : stages_) st.collect(out);
    for (Conv2d& c : compress_) c.collect(out);
    classifier_->collect(out);
    return out;
  }

  const ChannelPlan& plan() const { return plan_; }
  const StackedBcnnConfig& config() const { return cfg_; }
  MiniBcnn& stage(int i) { return stages_[static_cast<size_t>(i)]; }

  static void validate_embedding_choices(const ChannelPlan& plan, const std::vector<EmbeddingChoice>& choices) {
    if (choices.size() != plan.stages.size())
      throw config_error("embedding_channels lists " + std::to_string(choices.size()) + " stages, network has " +
                         std::to_string(plan.stages.size()));
    for (size_t i = 0; i < choices.size(); ++i) {
      const StagePlan& s = plan.stages[i];
      auto check = [&](const char* site, int in_ch, int w) {
        const std::vector<int> cand = candidate_channels(in_ch);
        if (std::find(cand.begin(), cand.end(), w) == cand.end())
          throw config_error("stage " + std::to_string(s.index) + " " + site + ": width " + std::to_string(w) +
                             " is not a candidate for input width " + std::to_string(in_ch));
      };
      check("deep_to_out", s.deep_to_out.in_ch, choices[i].deep_to_out);
      check("broad_to_out", s.broad_to_out.in_ch, choices[i].broad_to_out);
      check("deep_to_enh", s.deep_to_enh.in_ch, choices[i].deep_to_enh);
      check("broad_to_enh", s.broad_to_enh.in_ch, choices[i].broad_to_enh);
    }
  }

 private:
  StackedBcnnConfig cfg_;
  ChannelPlan plan_;
  std::unique_ptr<Conv2d> stem_conv_;
  std::unique_ptr<BatchNorm2d> stem_bn_;
  std::vector<MiniBcnn> stages_;
  std::vector<Conv2d> compress_;
  std::unique_ptr<Linear> classifier_;
};

inline StackedBcnn build_stacked_bcnn(const StackedBcnnConfig& cfg, const Genotype& g, uint32_t seed) {
  return StackedBcnn(cfg, g, seed);
}

struct ModelCost {
  int64_t params = 0;
  uint64_t macs = 0;
};

// Parameters by summing every trainable buffer; MACs by a counting forward
// pass (eval mode, batch 1) at the configured input size.
inline ModelCost count_params_flops(StackedBcnn& net) {
  ModelCost cost;
  for (Parameter* p : net.parameters()) cost.params += p->numel();
  Tape tape;
  Tensor x(Shape{1, net.config().in_channels, net.config().input_size, net.config().input_size});
  net.forward(tape, x, false);
  cost.macs = tape.macs();
  return cost;
}

}  // namespace bnas
