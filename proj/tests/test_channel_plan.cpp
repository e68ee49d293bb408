#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "bnas/channel_plan.hpp"

using namespace bnas;

namespace {

// Independent recomputation of the width arithmetic, written from the
// definitions rather than shared with the implementation: deep cells emit
// N_in * 2^(i-1) * c channels at stage i, broad and enhancement cells twice
// that, and indirect embeddings quarter their input (floored, min 1).
int pow2(int e) {
  int r = 1;
  while (e-- > 0) r *= 2;
  return r;
}
int oracle_deep(int n_in, int c, int i) { return n_in * pow2(i - 1) * c; }
int oracle_quarter(int w) { return std::max(1, w / 4); }

}  // namespace

TEST_CASE("width grid matches the brute-force oracle") {
  for (int n_in : {1, 2, 4})
    for (int c : {1, 8, 16, 44})
      for (int k : {0, 1}) {
        StackedBcnnConfig cfg;
        cfg.u = 4;
        cfg.k = k;
        cfg.c = c;
        cfg.n_in = n_in;
        cfg.input_size = 32;
        const ChannelPlan plan = channel_plan(cfg);
        REQUIRE(plan.stages.size() == 4);
        int expected_gap = 0;
        for (int i = 1; i <= 4; ++i) {
          const StagePlan& s = plan.stages[static_cast<size_t>(i - 1)];
          INFO("n_in=" << n_in << " c=" << c << " k=" << k << " stage " << i);
          const int deep = oracle_deep(n_in, c, i);
          REQUIRE(s.c_deep == deep);
          REQUIRE(s.c_broad == 2 * deep);
          REQUIRE(s.c_enh == 2 * deep);
          // the deep-side embeddings read the last deep cell when k >= 1,
          // otherwise the raw stage input
          const int deep_src = k >= 1 ? deep : s.in_ch;
          REQUIRE(s.deep_src_ch == deep_src);
          REQUIRE(s.deep_to_out.out_ch == oracle_quarter(deep_src));
          REQUIRE(s.broad_to_out.out_ch == oracle_quarter(2 * deep));
          REQUIRE(s.deep_to_enh.out_ch == oracle_quarter(deep_src));
          REQUIRE(s.broad_to_enh.out_ch == oracle_quarter(2 * deep));
          REQUIRE(s.enh_to_out.out_ch == 2 * deep);  // direct edge keeps full width
          REQUIRE(s.deep_to_out.stride == 2);
          REQUIRE(s.broad_to_out.stride == 1);
          REQUIRE(s.concat_ch == s.deep_to_out.out_ch + s.broad_to_out.out_ch + s.enh_to_out.out_ch);
          // stage input: stem width c, then the previous compression 2^(i-1)*c
          REQUIRE(s.in_ch == (i == 1 ? c : pow2(i - 1) * c));
          REQUIRE(s.out_ch == (i < 4 ? 2 * pow2(i - 1) * c : s.concat_ch));
          REQUIRE(s.in_size == 32 / pow2(i - 1));
          REQUIRE(s.out_size == s.in_size / 2);
          expected_gap += s.out_ch;
        }
        REQUIRE(plan.gap_ch == expected_gap);
      }
}

TEST_CASE("reference row: n_in=4, c=16 stage 1") {
  StackedBcnnConfig cfg;
  cfg.u = 2;
  cfg.k = 1;
  cfg.c = 16;
  cfg.n_in = 4;
  cfg.input_size = 32;
  const ChannelPlan plan = channel_plan(cfg);
  const StagePlan& s = plan.stages[0];
  // cell widths 4c / 8c / 8c
  REQUIRE(s.c_deep == 64);
  REQUIRE(s.c_broad == 128);
  REQUIRE(s.c_enh == 128);
  // embedding widths c / 2c / 8c
  REQUIRE(s.deep_to_out.out_ch == 16);
  REQUIRE(s.broad_to_out.out_ch == 32);
  REQUIRE(s.enh_to_out.out_ch == 128);
  // concat = 11 * c * n_in * 2^(i-1) / 4 when the quarter divides exactly
  REQUIRE(s.concat_ch == 11 * 16 * 4 / 4);
}

TEST_CASE("quarter rule is exact on divisible widths and clamps below 4") {
  REQUIRE(quarter_width(44) == 11);
  REQUIRE(quarter_width(4) == 1);
  REQUIRE(quarter_width(3) == 1);
  REQUIRE(quarter_width(1) == 1);
  REQUIRE(quarter_width(128) == 32);
  REQUIRE(quarter_width(7) == 1);  // floor(7/4)
  REQUIRE(quarter_width(9) == 2);
}

TEST_CASE("spatial feasibility") {
  StackedBcnnConfig cfg;
  cfg.u = 2;
  cfg.input_size = 8;
  REQUIRE_NOTHROW(channel_plan(cfg));  // 8 -> 4 -> 2
  cfg.input_size = 9;
  REQUIRE_THROWS_AS(channel_plan(cfg), config_error);  // odd at stage 1
  cfg.input_size = 4;
  REQUIRE_NOTHROW(channel_plan(cfg));  // 4 -> 2 -> 1
  cfg.u = 3;
  cfg.input_size = 4;
  REQUIRE_THROWS_AS(channel_plan(cfg), config_error);  // stage 3 sees size 1
  cfg.u = 2;
  cfg.input_size = 8;
  cfg.stem_stride = 2;
  REQUIRE_NOTHROW(channel_plan(cfg));  // stem halves first: 4 -> 2 -> 1
}

TEST_CASE("config validation") {
  StackedBcnnConfig cfg;
  cfg.u = 0;
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg = {};
  cfg.k = -1;
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg = {};
  cfg.num_classes = 1;
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg = {};
  cfg.stem_stride = 3;
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg = {};
  REQUIRE_NOTHROW(cfg.validate());
  cfg.k = 0;  // search-time configuration is legal
  REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("embedding overrides rerun the concat arithmetic") {
  StackedBcnnConfig cfg;
  cfg.u = 2;
  cfg.k = 1;
  cfg.c = 8;
  cfg.n_in = 4;
  cfg.input_size = 16;
  ChannelPlan plan = channel_plan(cfg);
  const int enh1 = plan.stages[0].enh_to_out.out_ch;
  const int enh2 = plan.stages[1].enh_to_out.out_ch;

  std::vector<EmbeddingChoice> choices{{4, 16, 2, 8}, {8, 32, 4, 16}};
  apply_embedding_choices(plan, choices);
  REQUIRE(plan.stages[0].deep_to_out.out_ch == 4);
  REQUIRE(plan.stages[0].broad_to_out.out_ch == 16);
  REQUIRE(plan.stages[0].deep_to_enh.out_ch == 2);
  REQUIRE(plan.stages[0].broad_to_enh.out_ch == 8);
  REQUIRE(plan.stages[0].concat_ch == 4 + 16 + enh1);
  REQUIRE(plan.stages[0].out_ch == 2 * cfg.c);  // compression width unchanged
  REQUIRE(plan.stages[1].concat_ch == 8 + 32 + enh2);
  REQUIRE(plan.stages[1].out_ch == plan.stages[1].concat_ch);  // final stage
  REQUIRE(plan.gap_ch == plan.stages[0].out_ch + plan.stages[1].out_ch);

  SECTION("stage count must match") {
    std::vector<EmbeddingChoice> wrong{{4, 16, 2, 8}};
    ChannelPlan p2 = channel_plan(cfg);
    REQUIRE_THROWS_AS(apply_embedding_choices(p2, wrong), config_error);
  }
  SECTION("widths must be positive") {
    std::vector<EmbeddingChoice> wrong{{0, 16, 2, 8}, {8, 32, 4, 16}};
    ChannelPlan p2 = channel_plan(cfg);
    REQUIRE_THROWS_AS(apply_embedding_choices(p2, wrong), config_error);
  }
}
