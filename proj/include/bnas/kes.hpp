#pragma once

// Knowledge Embedding Search: over-parameterized 1x1 embeddings whose output
// width is chosen differentiably via per-candidate weights gamma.

#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "bnas/nn.hpp"

namespace bnas {

// Candidate output widths for an embedding with c_e input channels: every
// power of two below c_e, then c_e itself, ascending. A power-of-two c_e
// collapses the ladder and gets two independent full-width candidates.
inline std::vector<int> candidate_channels(int c_e) {
  if (c_e < 2) throw value_error("candidate_channels: input width must be >= 2, got " + std::to_string(c_e));
  if ((c_e & (c_e - 1)) == 0) return {c_e, c_e};
  std::vector<int> widths;
  for (int w = 2; w < c_e; w *= 2) widths.push_back(w);
  widths.push_back(c_e);
  return widths;
}

// All candidate embeddings run in parallel; the forward output is the
// channel concat of each candidate scaled by softmax(gamma). Downstream
// consumers therefore see the summed width until discretization picks one.
class OverparamEmbedding {
  // Declared ahead of gamma: its shape depends on the candidate list.
  int in_ch_;
  std::vector<int> widths_;

 public:
  OverparamEmbedding(int in_ch, int stride, std::mt19937& rng)
      : in_ch_(in_ch),
        widths_(candidate_channels(in_ch)),
        gamma(Shape{1, static_cast<int64_t>(widths_.size()), 1, 1}, 0.f) {
    std::normal_distribution<float> noise(0.f, 1e-3f);
    for (float& v : gamma.value.values()) v = noise(rng);
    candidates_.reserve(widths_.size());
    for (int w : widths_) candidates_.emplace_back(in_ch, w, 1, stride, 0, 1, 1, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    if (x.shape().c != in_ch_)
      throw shape_error("overparam embedding expects " + std::to_string(in_ch_) + " channels, got " +
                        to_string(x.shape()));
    Tensor w = softmax_all(t, t.param(gamma));
    std::vector<Tensor> parts;
    parts.reserve(candidates_.size());
    for (size_t l = 0; l < candidates_.size(); ++l)
      parts.push_back(scale_by_element(t, candidates_[l].forward(t, x), w, l));
    return concat_channels(t, parts);
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return std::accumulate(widths_.begin(), widths_.end(), 0); }
  const std::vector<int>& widths() const { return widths_; }

  // Width of the candidate with the largest gamma. widths_ ascends, so the
  // first maximum in scan order is the smallest width (the documented
  // tie-break: fewer parameters win).
  int discretize() const {
    const auto& g = gamma.value.values();
    size_t best = 0;
    for (size_t l = 1; l < g.size(); ++l)
      if (g[l] > g[best]) best = l;
    return widths_[best];
  }

  void collect_weights(std::vector<Parameter*>& out) {
    for (Conv2d& c : candidates_) c.collect(out);
  }

  Parameter gamma;

 private:
  std::vector<Conv2d> candidates_;
};

inline Tensor overparam_embed_forward(Tape& t, const Tensor& x, OverparamEmbedding& m) { return m.forward(t, x); }
inline int discretize_embedding(const OverparamEmbedding& m) { return m.discretize(); }

}  // namespace bnas
