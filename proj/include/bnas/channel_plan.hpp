#pragma once

#include <string>
#include <vector>

#include "bnas/common.hpp"
#include "bnas/genotype.hpp"

namespace bnas {

// Stacked BCNN structure knobs. u mini BCNNs, each with k stride-1 deep
// cells, one stride-2 broad cell and one enhancement cell. k = 0 is the
// search-time configuration where the stage input itself plays the role of
// the last deep-cell output.
struct StackedBcnnConfig {
  int u = 2;
  int k = 0;
  int c = 16;
  int n_in = 4;
  int num_classes = 10;
  int input_size = 32;
  int in_channels = 1;
  int stem_stride = 1;

  void validate() const {
    if (u < 1) throw config_error("config: u must be >= 1");
    if (k < 0) throw config_error("config: k must be >= 0");
    if (c < 1) throw config_error("config: c must be >= 1");
    if (n_in < 1) throw config_error("config: n_in must be >= 1");
    if (num_classes < 2) throw config_error("config: num_classes must be >= 2");
    if (input_size < 1) throw config_error("config: input_size must be >= 1");
    if (in_channels < 1) throw config_error("config: in_channels must be >= 1");
    if (stem_stride != 1 && stem_stride != 2) throw config_error("config: stem_stride must be 1 or 2");
  }
};

// One knowledge-embedding site: a 1x1 convolution from in_ch to out_ch.
// deep->output runs at stride 2 so the full-resolution deep features land on
// the half-resolution stage concat; every other site keeps stride 1.
struct EmbeddingSitePlan {
  int in_ch = 0;
  int out_ch = 0;
  int stride = 1;
};

struct StagePlan {
  int index = 1;  // 1-based stage number
  int in_ch = 0;
  int in_size = 0;
  int c_deep = 0;   // deep cell output width N_in * 2^(i-1) * c
  int c_broad = 0;  // = 2 * c_deep, and c_enh matches it
  int c_enh = 0;
  int deep_src_ch = 0;  // width of the tensor feeding the deep-side embeddings
  EmbeddingSitePlan deep_to_out, broad_to_out, enh_to_out, deep_to_enh, broad_to_enh;
  int concat_ch = 0;  // deep_to_out + broad_to_out + enh_to_out widths
  int out_ch = 0;     // handed to the next stage and to GAP
  int out_size = 0;
};

struct ChannelPlan {
  std::vector<StagePlan> stages;
  int gap_ch = 0;  // concatenated GAP width entering the classifier
};

// Hand-crafted reduction for indirect embedding sites. Integer quarter,
// clamped so degenerate one-channel plans stay buildable.
inline int quarter_width(int in_ch) { return in_ch >= 4 ? in_ch / 4 : 1; }

// Computes every width in the network from the config alone: cell outputs
// per stage, embedding sites, stage concat, inter-stage compression and the
// final GAP width. Builders consume this instead of re-deriving arithmetic.
inline ChannelPlan channel_plan(const StackedBcnnConfig& cfg) {
  cfg.validate();
  ChannelPlan plan;
  int width = cfg.c;  // stage 1 input: stem output
  int size = cfg.input_size / cfg.stem_stride;
  int scale = 1;      // 2^(i-1)
  for (int i = 1; i <= cfg.u; ++i, scale *= 2) {
    StagePlan s;
    s.index = i;
    s.in_ch = width;
    s.in_size = size;
    if (size < 2 || size % 2 != 0)
      throw config_error("stage " + std::to_string(i) + ": spatial size " + std::to_string(size) +
                         " cannot be halved by the broad cell");
    s.c_deep = cfg.n_in * scale * cfg.c;
    s.c_broad = 2 * s.c_deep;
    s.c_enh = s.c_broad;
    s.deep_src_ch = cfg.k >= 1 ? s.c_deep : s.in_ch;

    s.deep_to_out = {s.deep_src_ch, quarter_width(s.deep_src_ch), 2};
    s.broad_to_out = {s.c_broad, quarter_width(s.c_broad), 1};
    s.enh_to_out = {s.c_enh, s.c_enh, 1};
    s.deep_to_enh = {s.deep_src_ch, quarter_width(s.deep_src_ch), 1};
    s.broad_to_enh = {s.c_broad, quarter_width(s.c_broad), 1};

    s.concat_ch = s.deep_to_out.out_ch + s.broad_to_out.out_ch + s.enh_to_out.out_ch;
    s.out_ch = i < cfg.u ? 2 * scale * cfg.c : s.concat_ch;
    s.out_size = size / 2;

    plan.gap_ch += s.out_ch;
    width = s.out_ch;
    size = s.out_size;
    plan.stages.push_back(s);
  }
  return plan;
}

// Replaces the four indirect site widths of each stage with learned choices.
// Width validity against the candidate sets is the builder's job (it owns
// the embedding-search dependency); this only reruns the concat arithmetic.
inline void apply_embedding_choices(ChannelPlan& plan, const std::vector<EmbeddingChoice>& choices) {
  if (choices.size() != plan.stages.size())
    throw config_error("embedding_channels lists " + std::to_string(choices.size()) + " stages, plan has " +
                       std::to_string(plan.stages.size()));
  plan.gap_ch = 0;
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    StagePlan& s = plan.stages[i];
    const EmbeddingChoice& c = choices[i];
    for (int w : {c.deep_to_out, c.broad_to_out, c.deep_to_enh, c.broad_to_enh})
      if (w < 1) throw config_error("stage " + std::to_string(s.index) + ": embedding width must be >= 1");
    s.deep_to_out.out_ch = c.deep_to_out;
    s.broad_to_out.out_ch = c.broad_to_out;
    s.deep_to_enh.out_ch = c.deep_to_enh;
    s.broad_to_enh.out_ch = c.broad_to_enh;
    s.concat_ch = s.deep_to_out.out_ch + s.broad_to_out.out_ch + s.enh_to_out.out_ch;
    if (s.index == static_cast<int>(plan.stages.size())) s.out_ch = s.concat_ch;
    plan.gap_ch += s.out_ch;
  }
}

}  // namespace bnas
