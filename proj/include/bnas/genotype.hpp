#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bnas/common.hpp"

namespace bnas {

// Candidate operation set. Declaration order below is the tie-break of last
// resort wherever an argmax over ops can tie, so keep it stable.
enum class OpKind : int {
  kZero = 0,
  kSkipConnect,
  kConv1x1,
  kConv3x3,
  kDilConv3x3,
  kMaxPool3x3,
  kAvgPool3x3,
};

inline constexpr int kNumOpKinds = 7;

inline constexpr std::array<const char*, kNumOpKinds> kOpNames = {
    "zero", "skip_connect", "conv_1x1", "conv_3x3", "dil_conv_3x3", "max_pool_3x3", "avg_pool_3x3"};

inline const char* op_name(OpKind k) { return kOpNames[static_cast<size_t>(k)]; }

inline OpKind op_from_name(const std::string& name) {
  for (int i = 0; i < kNumOpKinds; ++i)
    if (name == kOpNames[static_cast<size_t>(i)]) return static_cast<OpKind>(i);
  throw config_error("unknown operation name \"" + name + "\"");
}

// One discrete cell edge. Node indices: 0 and 1 are the cell inputs,
// 2..n_in+1 the intermediate nodes, n_in+2 the (implicit) concat output.
struct CellEdge {
  int target = 2;
  int source = 0;
  OpKind op = OpKind::kZero;

  bool operator==(const CellEdge&) const = default;
};

// A discretized cell: exactly two incoming edges per intermediate node.
struct CellTopology {
  int n_in = 4;
  std::vector<CellEdge> edges;

  // Sorted by (target, source, op) so equality and fingerprints are stable
  // regardless of construction order.
  void canonicalize() {
    std::sort(edges.begin(), edges.end(), [](const CellEdge& a, const CellEdge& b) {
      if (a.target != b.target) return a.target < b.target;
      if (a.source != b.source) return a.source < b.source;
      return static_cast<int>(a.op) < static_cast<int>(b.op);
    });
  }

  void validate() const {
    if (n_in < 1) throw config_error("cell: intermediate node count must be >= 1");
    std::vector<int> fanin(static_cast<size_t>(n_in), 0);
    for (const CellEdge& e : edges) {
      if (e.target < 2 || e.target >= 2 + n_in)
        throw config_error("cell: edge target " + std::to_string(e.target) + " outside intermediate range [2," +
                           std::to_string(2 + n_in) + ")");
      if (e.source < 0 || e.source >= e.target)
        throw config_error("cell: edge source " + std::to_string(e.source) + " must precede target " +
                           std::to_string(e.target));
      ++fanin[static_cast<size_t>(e.target - 2)];
    }
    for (int t = 0; t < n_in; ++t)
      if (fanin[static_cast<size_t>(t)] != 2)
        throw config_error("cell: node " + std::to_string(t + 2) + " has " +
                           std::to_string(fanin[static_cast<size_t>(t)]) + " incoming edges, expected 2");
    for (size_t a = 0; a < edges.size(); ++a)
      for (size_t b = a + 1; b < edges.size(); ++b)
        if (edges[a].target == edges[b].target && edges[a].source == edges[b].source)
          throw config_error("cell: node " + std::to_string(edges[a].target) + " uses source " +
                             std::to_string(edges[a].source) + " twice");
  }

  bool operator==(const CellTopology&) const = default;
};

// Learned output widths for the four indirect embedding sites of one stage.
struct EmbeddingChoice {
  int deep_to_out = 0;
  int broad_to_out = 0;
  int deep_to_enh = 0;
  int broad_to_enh = 0;

  bool operator==(const EmbeddingChoice&) const = default;
};

// The discrete architecture: one topology shared by all deep and broad
// cells, one for enhancement cells, and optional per-stage embedding widths.
// An empty embedding_channels means the hand-crafted quarter rule.
struct Genotype {
  int n_in = 4;
  CellTopology conv_cell;
  CellTopology enh_cell;
  std::vector<EmbeddingChoice> embedding_channels;

  void validate() const {
    if (n_in < 1) throw config_error("genotype: n_in must be >= 1");
    if (conv_cell.n_in != n_in || enh_cell.n_in != n_in)
      throw config_error("genotype: cell node counts disagree with n_in=" + std::to_string(n_in));
    conv_cell.validate();
    enh_cell.validate();
  }

  bool operator==(const Genotype&) const = default;
};

// Chain topology used as a smoke-test default: node t takes skip_connect
// from its two predecessors.
inline CellTopology chain_topology(int n_in, OpKind op = OpKind::kSkipConnect) {
  CellTopology t;
  t.n_in = n_in;
  for (int node = 2; node < 2 + n_in; ++node) {
    t.edges.push_back(CellEdge{node, node - 2, op});
    t.edges.push_back(CellEdge{node, node - 1, op});
  }
  t.canonicalize();
  return t;
}

inline Genotype chain_genotype(int n_in, OpKind op = OpKind::kConv3x3) {
  Genotype g;
  g.n_in = n_in;
  g.conv_cell = chain_topology(n_in, op);
  g.enh_cell = chain_topology(n_in, op);
  return g;
}

}  // namespace bnas
