#pragma once

// Over-parameterized Stacked BCNN for the search phase: softmax-relaxed op
// mixtures on every cell edge, partial channel connections with a per-epoch
// mask, edge normalization, optional embedding search modules, and the
// argmax discretization back to a Genotype.

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "bnas/channel_plan.hpp"
#include "bnas/kes.hpp"
#include "bnas/network.hpp"
#include "bnas/nn.hpp"

namespace bnas {

// Architecture weights for one cell type, shared by every instance of that
// type. Edges are enumerated target-major: (2,0),(2,1),(3,0),(3,1),(3,2),...
struct ArchParams {
  int n_in = 0;
  std::vector<Parameter> alpha;  // per edge, one weight per OpKind
  std::vector<Parameter> beta;   // per target node, one weight per incoming edge

  ArchParams(int n_in_count, std::mt19937& rng) : n_in(n_in_count) {
    std::normal_distribution<float> noise(0.f, 1e-3f);
    for (int t = 2; t < 2 + n_in; ++t) {
      for (int s = 0; s < t; ++s) {
        Parameter a(Shape{1, kNumOpKinds, 1, 1}, 0.f);
        for (float& v : a.value.values()) v = noise(rng);
        alpha.push_back(std::move(a));
      }
      beta.emplace_back(Shape{1, t, 1, 1}, 0.f);
    }
  }

  static int edge_index(int target, int source) { return target * (target - 1) / 2 - 1 + source; }

  Parameter& alpha_at(int target, int source) { return alpha[static_cast<size_t>(edge_index(target, source))]; }
  const Parameter& alpha_at(int target, int source) const {
    return alpha[static_cast<size_t>(edge_index(target, source))];
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter& p : alpha) out.push_back(&p);
    for (Parameter& p : beta) out.push_back(&p);
  }
};

// Contiguous partial-channel mask: ceil(C/K) ones at a seeded offset.
inline std::vector<uint8_t> sample_mask(int C, int K, std::mt19937& rng) {
  if (K < 1 || K > C)
    throw value_error("sample_mask: K=" + std::to_string(K) + " outside [1," + std::to_string(C) + "]");
  const int S = (C + K - 1) / K;
  const int off = S >= C ? 0 : std::uniform_int_distribution<int>(0, C - S)(rng);
  std::vector<uint8_t> mask(static_cast<size_t>(C), 0);
  for (int i = off; i < off + S && i < C; ++i) mask[static_cast<size_t>(i)] = 1;
  return mask;
}

// One relaxed edge. Candidate ops run on the ceil(C/K) selected channels;
// the rest bypass the mixture unchanged (2x2 max pool when the edge itself
// downsamples). alpha lives in the shared ArchParams group.
class MixedEdge {
 public:
  MixedEdge(int channels, int stride, int K, Parameter* alpha, const std::vector<OpKind>& kinds, std::mt19937& rng)
      : C_(channels), stride_(stride), K_(K), alpha_(alpha), kinds_(kinds) {
    if (K < 1 || K > channels)
      throw value_error("mixed edge: K=" + std::to_string(K) + " outside [1," + std::to_string(channels) + "]");
    S_ = (channels + K - 1) / K;
    ops_.reserve(kinds_.size());
    for (OpKind k : kinds_) ops_.push_back(make_op(k, S_, stride, rng));
  }

  void resample(std::mt19937& rng) {
    const std::vector<uint8_t> mask = sample_mask(C_, K_, rng);
    offset_ = 0;
    while (offset_ < C_ && mask[static_cast<size_t>(offset_)] == 0) ++offset_;
  }

  int selected_channels() const { return S_; }
  int offset() const { return offset_; }

  Tensor forward(Tape& t, const Tensor& x, bool training) {
    if (x.shape().c != C_)
      throw shape_error("mixed edge expects " + std::to_string(C_) + " channels, got " + to_string(x.shape()));
    Tensor aw = softmax_all(t, t.param(*alpha_));
    if (static_cast<int64_t>(ops_.size()) != aw.numel())
      throw shape_error("mixed edge: alpha size does not match candidate count");
    if (K_ == 1) return mixture(t, x, aw, training);

    Tensor sel = slice_channels(t, x, offset_, offset_ + S_);
    Tensor mix = mixture(t, sel, aw, training);
    std::vector<Tensor> parts;
    if (offset_ > 0) parts.push_back(bypass(t, slice_channels(t, x, 0, offset_)));
    parts.push_back(mix);
    if (offset_ + S_ < C_) parts.push_back(bypass(t, slice_channels(t, x, offset_ + S_, C_)));
    return parts.size() == 1 ? parts[0] : concat_channels(t, parts);
  }

  void collect_weights(std::vector<Parameter*>& out) {
    for (auto& op : ops_) op->collect(out);
  }

 private:
  Tensor mixture(Tape& t, const Tensor& x, const Tensor& aw, bool training) {
    std::vector<Tensor> outs;
    outs.reserve(ops_.size());
    for (auto& op : ops_) outs.push_back(op->forward(t, x, training));
    return weighted_sum(t, outs, aw);
  }
  Tensor bypass(Tape& t, const Tensor& x) {
    return stride_ == 1 ? x : pool2d(t, x, PoolKind::kMax, 2, 2, 0);
  }

  int C_, stride_, K_, S_ = 0, offset_ = 0;
  Parameter* alpha_;
  std::vector<OpKind> kinds_;
  std::vector<std::unique_ptr<CandidateOp>> ops_;
};

inline Tensor mixed_op_forward(Tape& t, const Tensor& x, MixedEdge& edge, bool training = true) {
  return edge.forward(t, x, training);
}

// softmax(beta)-weighted sum of a node's incoming edge outputs.
inline Tensor node_aggregate(Tape& t, const std::vector<Tensor>& candidates, Parameter& beta) {
  if (candidates.empty()) throw value_error("node_aggregate: empty candidate list");
  return weighted_sum(t, candidates, softmax_all(t, t.param(beta)));
}

// Relaxed cell: the complete DAG over 2 inputs and n_in intermediate nodes,
// every edge a MixedEdge reading the shared alpha of its (target, source).
class SupernetCell {
 public:
  SupernetCell(int stride, int c_prev_prev, int c_prev, int c_node, bool reduce_s0, int K,
               std::shared_ptr<ArchParams> arch, const std::vector<OpKind>& kinds, std::mt19937& rng)
      : n_in_(arch->n_in), arch_(std::move(arch)) {
    if (reduce_s0)
      pre0_reduce_ = std::make_unique<FactorizedReduce>(c_prev_prev, c_node, rng);
    else
      pre0_ = std::make_unique<ReluConvBn>(c_prev_prev, c_node, 1, 1, 0, 1, rng);
    pre1_ = std::make_unique<ReluConvBn>(c_prev, c_node, 1, 1, 0, 1, rng);
    for (int t = 2; t < 2 + n_in_; ++t)
      for (int s = 0; s < t; ++s) {
        const int op_stride = (stride == 2 && s < 2) ? 2 : 1;
        edges_.emplace_back(c_node, op_stride, K, &arch_->alpha_at(t, s), kinds, rng);
      }
  }

  Tensor forward(Tape& t, const Tensor& s0, const Tensor& s1, bool training) {
    std::vector<Tensor> states;
    states.reserve(static_cast<size_t>(n_in_) + 2);
    states.push_back(pre0_reduce_ ? pre0_reduce_->forward(t, s0, training) : pre0_->forward(t, s0, training));
    states.push_back(pre1_->forward(t, s1, training));
    size_t e = 0;
    for (int target = 2; target < 2 + n_in_; ++target) {
      std::vector<Tensor> cands;
      cands.reserve(static_cast<size_t>(target));
      for (int s = 0; s < target; ++s) cands.push_back(edges_[e++].forward(t, states[static_cast<size_t>(s)], training));
      states.push_back(node_aggregate(t, cands, arch_->beta[static_cast<size_t>(target - 2)]));
    }
    return concat_channels(t, {states.begin() + 2, states.end()});
  }

  void resample_masks(std::mt19937& rng) {
    for (MixedEdge& e : edges_) e.resample(rng);
  }

  void collect_weights(std::vector<Parameter*>& out) {
    if (pre0_reduce_)
      pre0_reduce_->collect(out);
    else
      pre0_->collect(out);
    pre1_->collect(out);
    for (MixedEdge& e : edges_) e.collect_weights(out);
  }

 private:
  int n_in_;
  std::shared_ptr<ArchParams> arch_;
  std::unique_ptr<ReluConvBn> pre0_, pre1_;
  std::unique_ptr<FactorizedReduce> pre0_reduce_;
  std::vector<MixedEdge> edges_;
};

// Canonical discretized selection: enough to rebuild the Genotype, compared
// for equality by the early-stopping criterion.
struct ArchRank {
  int n_in = 0;
  std::vector<CellEdge> conv_edges;
  std::vector<CellEdge> enh_edges;
  std::vector<EmbeddingChoice> embeddings;  // empty when KES is off

  bool operator==(const ArchRank&) const = default;

  uint64_t fingerprint() const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix = [&h](uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xff;
        h *= 1099511628211ull;
      }
    };
    mix(static_cast<uint64_t>(n_in));
    for (const auto* edges : {&conv_edges, &enh_edges})
      for (const CellEdge& e : *edges) {
        mix(static_cast<uint64_t>(e.target));
        mix(static_cast<uint64_t>(e.source));
        mix(static_cast<uint64_t>(e.op));
      }
    for (const EmbeddingChoice& c : embeddings)
      for (int w : {c.deep_to_out, c.broad_to_out, c.deep_to_enh, c.broad_to_enh}) mix(static_cast<uint64_t>(w));
    return h;
  }
};

// Shared selection core: per node, score each incoming edge by its best
// non-zero op (softmax(alpha)_op * softmax(beta)_edge) and keep the top two
// distinct sources. Ties fall to the lower source; op ties within an edge
// fall to declaration order. Doubles throughout so comparisons are exact.
inline std::vector<CellEdge> select_topology(const ArchParams& arch) {
  auto softmax_d = [](const std::vector<float>& v) {
    double mx = v[0];
    for (float x : v) mx = std::max(mx, static_cast<double>(x));
    std::vector<double> out(v.size());
    double denom = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
      out[i] = std::exp(static_cast<double>(v[i]) - mx);
      denom += out[i];
    }
    for (double& x : out) x /= denom;
    return out;
  };

  std::vector<CellEdge> picked;
  for (int target = 2; target < 2 + arch.n_in; ++target) {
    const std::vector<double> bw = softmax_d(arch.beta[static_cast<size_t>(target - 2)].value.values());
    std::vector<std::tuple<double, int, OpKind>> scored;  // (score, source, op)
    for (int s = 0; s < target; ++s) {
      const std::vector<double> aw = softmax_d(arch.alpha_at(target, s).value.values());
      int best = -1;
      for (int o = 0; o < kNumOpKinds; ++o) {
        if (static_cast<OpKind>(o) == OpKind::kZero) continue;
        if (best < 0 || aw[static_cast<size_t>(o)] > aw[static_cast<size_t>(best)]) best = o;
      }
      scored.emplace_back(aw[static_cast<size_t>(best)] * bw[static_cast<size_t>(s)], s, static_cast<OpKind>(best));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      return std::get<1>(a) < std::get<1>(b);
    });
    CellEdge e0{target, std::get<1>(scored[0]), std::get<2>(scored[0])};
    CellEdge e1{target, std::get<1>(scored[1]), std::get<2>(scored[1])};
    if (e1.source < e0.source) std::swap(e0, e1);
    picked.push_back(e0);
    picked.push_back(e1);
  }
  return picked;
}

struct SupernetOptions {
  int partial_k = 4;
  bool kes = false;
};

// The full relaxed network. All deep and broad cells share one ArchParams
// group, all enhancement cells the other; embedding search modules replace
// the fixed quarter-width convs at the indirect sites when KES is on.
class Supernet {
 public:
  struct EmbedSite {
    std::unique_ptr<Conv2d> fixed;
    std::unique_ptr<OverparamEmbedding> searched;

    Tensor forward(Tape& t, const Tensor& x) { return searched ? searched->forward(t, x) : fixed->forward(t, x); }
    void collect_weights(std::vector<Parameter*>& out) {
      if (searched)
        searched->collect_weights(out);
      else
        fixed->collect(out);
    }
  };

  struct Stage {
    std::vector<SupernetCell> deep;
    std::unique_ptr<SupernetCell> broad, enh;
    EmbedSite emb_deep_out, emb_broad_out, emb_deep_enh, emb_broad_enh;
    std::unique_ptr<Conv2d> emb_enh_out;

    Tensor forward(Tape& t, const Tensor& input, bool training) {
      Tensor ypp = input, yp = input;
      for (SupernetCell& d : deep) {
        Tensor y = d.forward(t, ypp, yp, training);
        ypp = yp;
        yp = y;
      }
      Tensor yb = broad->forward(t, ypp, yp, training);
      Tensor ye = enh->forward(t, emb_deep_enh.forward(t, yp), emb_broad_enh.forward(t, yb), training);
      return concat_channels(
          t, {emb_deep_out.forward(t, yp), emb_broad_out.forward(t, yb), emb_enh_out->forward(t, ye)});
    }
  };

  Supernet(const StackedBcnnConfig& cfg, const SupernetOptions& opt, uint32_t seed) : cfg_(cfg), opt_(opt) {
    cfg.validate();
    plan_ = channel_plan(cfg);
    if (opt.kes) {
      // Consumers downstream of a searched site see the summed candidate width.
      std::vector<EmbeddingChoice> summed(plan_.stages.size());
      for (size_t i = 0; i < plan_.stages.size(); ++i) {
        const StagePlan& s = plan_.stages[i];
        auto total = [](int in_ch) {
          int sum = 0;
          for (int w : candidate_channels(in_ch)) sum += w;
          return sum;
        };
        summed[i] = EmbeddingChoice{total(s.deep_to_out.in_ch), total(s.broad_to_out.in_ch),
                                    total(s.deep_to_enh.in_ch), total(s.broad_to_enh.in_ch)};
      }
      apply_embedding_choices(plan_, summed);
    }

    std::mt19937 rng(mix_seed(seed, seed_stream::kInit));
    conv_arch_ = std::make_shared<ArchParams>(cfg.n_in, rng);
    enh_arch_ = std::make_shared<ArchParams>(cfg.n_in, rng);
    const std::vector<OpKind> kinds = all_op_kinds();

    stem_conv_ = std::make_unique<Conv2d>(cfg.in_channels, cfg.c, 3, cfg.stem_stride, 1, 1, 1, rng);
    stem_bn_ = std::make_unique<BatchNorm2d>(cfg.c);

    for (int i = 0; i < cfg.u; ++i) {
      const StagePlan& sp = plan_.stages[static_cast<size_t>(i)];
      Stage st;
      const int cn_deep = sp.c_deep / cfg.n_in;
      const int cn_broad = sp.c_broad / cfg.n_in;
      const int cn_enh = sp.c_enh / cfg.n_in;
      int cpp = sp.in_ch, cp = sp.in_ch;
      for (int j = 0; j < cfg.k; ++j) {
        st.deep.emplace_back(1, cpp, cp, cn_deep, false, opt.partial_k, conv_arch_, kinds, rng);
        cpp = cp;
        cp = sp.c_deep;
      }
      st.broad = std::make_unique<SupernetCell>(2, cpp, cp, cn_broad, false, opt.partial_k, conv_arch_, kinds, rng);

      st.emb_deep_out = make_site(sp.deep_to_out, rng);
      st.emb_broad_out = make_site(sp.broad_to_out, rng);
      st.emb_deep_enh = make_site(sp.deep_to_enh, rng);
      st.emb_broad_enh = make_site(sp.broad_to_enh, rng);
      st.emb_enh_out = std::make_unique<Conv2d>(sp.enh_to_out.in_ch, sp.enh_to_out.out_ch, 1, sp.enh_to_out.stride,
                                                0, 1, 1, rng);

      st.enh = std::make_unique<SupernetCell>(1, sp.deep_to_enh.out_ch, sp.broad_to_enh.out_ch, cn_enh,
                                              /*reduce_s0=*/true, opt.partial_k, enh_arch_, kinds, rng);

      if (i + 1 < cfg.u) compress_.emplace_back(sp.concat_ch, sp.out_ch, 1, 1, 0, 1, 1, rng);
      stages_.push_back(std::move(st));
    }
    classifier_ = std::make_unique<Linear>(plan_.gap_ch, cfg.num_classes, rng);
  }

  Tensor forward(Tape& t, const Tensor& x, bool training) {
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

  void resample_masks(std::mt19937& rng) {
    for (Stage& st : stages_) {
      for (SupernetCell& d : st.deep) d.resample_masks(rng);
      st.broad->resample_masks(rng);
      st.enh->resample_masks(rng);
    }
  }

  std::vector<Parameter*> weight_params() {
    std::vector<Parameter*> out;
    stem_conv_->collect(out);
    stem_bn_->collect(out);
    for (Stage& st : stages_) {
      for (SupernetCell& d : st.deep) d.collect_weights(out);
      st.broad->collect_weights(out);
      st.enh->collect_weights(out);
      st.emb_deep_out.collect_weights(out);
      st.emb_broad_out.collect_weights(out);
      st.emb_deep_enh.collect_weights(out);
      st.emb_broad_enh.collect_weights(out);
      st.emb_enh_out->collect(out);
    }
    for (Conv2d& c : compress_) c.collect(out);
    classifier_->collect(out);
    return out;
  }

  std::vector<Parameter*> arch_params() {
    std::vector<Parameter*> out;
    conv_arch_->collect(out);
    enh_arch_->collect(out);
    for (Stage& st : stages_)
      for (EmbedSite* site : {&st.emb_deep_out, &st.emb_broad_out, &st.emb_deep_enh, &st.emb_broad_enh})
        if (site->searched) out.push_back(&site->searched->gamma);
    return out;
  }

  ArchRank rank() const {
    ArchRank r;
    r.n_in = cfg_.n_in;
    r.conv_edges = select_topology(*conv_arch_);
    r.enh_edges = select_topology(*enh_arch_);
    if (opt_.kes) {
      for (const Stage& st : stages_)
        r.embeddings.push_back(EmbeddingChoice{st.emb_deep_out.searched->discretize(),
                                               st.emb_broad_out.searched->discretize(),
                                               st.emb_deep_enh.searched->discretize(),
                                               st.emb_broad_enh.searched->discretize()});
    }
    return r;
  }

  Genotype discretize() const {
    const ArchRank r = rank();
    Genotype g;
    g.n_in = cfg_.n_in;
    g.conv_cell = CellTopology{cfg_.n_in, r.conv_edges};
    g.enh_cell = CellTopology{cfg_.n_in, r.enh_edges};
    g.embedding_channels = r.embeddings;
    g.validate();
    return g;
  }

  const ChannelPlan& plan() const { return plan_; }
  const StackedBcnnConfig& config() const { return cfg_; }
  const SupernetOptions& options() const { return opt_; }
  Stage& stage(int i) { return stages_[static_cast<size_t>(i)]; }

  std::shared_ptr<ArchParams> conv_arch() { return conv_arch_; }
  std::shared_ptr<ArchParams> enh_arch() { return enh_arch_; }

 private:
  static std::vector<OpKind> all_op_kinds() {
    std::vector<OpKind> kinds;
    for (int i = 0; i < kNumOpKinds; ++i) kinds.push_back(static_cast<OpKind>(i));
    return kinds;
  }

  EmbedSite make_site(const EmbeddingSitePlan& sp, std::mt19937& rng) {
    EmbedSite site;
    if (opt_.kes)
      site.searched = std::make_unique<OverparamEmbedding>(sp.in_ch, sp.stride, rng);
    else
      site.fixed = std::make_unique<Conv2d>(sp.in_ch, sp.out_ch, 1, sp.stride, 0, 1, 1, rng);
    return site;
  }

  StackedBcnnConfig cfg_;
  SupernetOptions opt_;
  ChannelPlan plan_;
  std::shared_ptr<ArchParams> conv_arch_, enh_arch_;
  std::unique_ptr<Conv2d> stem_conv_;
  std::unique_ptr<BatchNorm2d> stem_bn_;
  std::vector<Stage> stages_;
  std::vector<Conv2d> compress_;
  std::unique_ptr<Linear> classifier_;
};

inline Genotype discretize(const Supernet& net) { return net.discretize(); }
inline ArchRank arch_rank(const Supernet& net) { return net.rank(); }

}  // namespace bnas
