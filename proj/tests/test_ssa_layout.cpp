#include <gtest/gtest.h>

#include <random>

#include "qshield/ssa_layout.hpp"

using namespace qshield;

namespace {

// Bit-by-bit reference: bits [v, 63] all equal bit v-1.
bool canonical_ref(std::uint64_t a, int v) {
  const unsigned top = (a >> (v - 1)) & 1;
  for (int b = v; b < 64; ++b)
    if (((a >> b) & 1) != top) return false;
  return true;
}

FeatureSet features_from_mask(unsigned mask) {
  FeatureSet f;
  for (unsigned i = 0; i < 5; ++i)
    if (mask & (1u << i)) f.used.insert(kAllFeatureClasses[i]);
  return f;
}

}  // namespace

TEST(Canonical, Constants) {
  static_assert(is_canonical(0x00007fffffffffffULL, AddressingMode::la48()));
  static_assert(!is_canonical(0x0000800000000000ULL, AddressingMode::la48()));
  static_assert(is_canonical(0xffff800000000000ULL, AddressingMode::la48()));
  static_assert(is_canonical(0x0000800000000000ULL, AddressingMode::la57()));
  EXPECT_EQ(AddressingMode::la48().u(), 16);
  EXPECT_EQ(AddressingMode::la57().u(), 7);
}

// With bits [48,63] clear, canonicality is decided by bit 47 alone.
TEST(CanonicalProperty, SingleBitFlipsInTopBits) {
  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 20000; ++iter) {
    const std::uint64_t addr = rng() & ((1ULL << 48) - 1);
    ASSERT_EQ(is_canonical(addr, AddressingMode::la48()), ((addr >> 47) & 1) == 0);
    for (int b = 48; b < 64; ++b) {
      const std::uint64_t flipped = addr ^ (1ULL << b);
      const bool all_ones = (flipped >> 47) == 0x1ffff;
      EXPECT_EQ(is_canonical(flipped, AddressingMode::la48()), all_ones);
    }
  }
}

TEST(CanonicalProperty, MatchesReference) {
  std::mt19937_64 rng(11);
  for (int iter = 0; iter < 100000; ++iter) {
    std::uint64_t a = rng();
    // Bias half the samples towards sign-extended values.
    if (iter & 1) a = static_cast<std::uint64_t>(static_cast<std::int64_t>(a << 16) >> 16);
    EXPECT_EQ(is_canonical(a, AddressingMode::la48()), canonical_ref(a, 48));
    EXPECT_EQ(is_canonical(a, AddressingMode::la57()), canonical_ref(a, 57));
  }
}

TEST(Layout, DefaultRegions) {
  const auto l = default_ssa_layout();
  l.validate();
  EXPECT_EQ(l.total_size, 4096u);
  EXPECT_EQ(l.region(RegionName::kXsave).range, (ByteRange{0, 2048}));
  EXPECT_EQ(l.region(RegionName::kMisc).range, (ByteRange{2048, 512}));
  EXPECT_EQ(l.region(RegionName::kGprsgx).range, (ByteRange{2560, 176}));
  EXPECT_EQ(l.region(RegionName::kPad).range.end(), 4096u);
  // Class ranges tile XSAVE+MISC without overlap.
  std::vector<int> owner(2560, 0);
  for (const auto& [cls, ranges] : l.feature_ranges)
    for (const auto& r : ranges)
      for (std::size_t i = r.offset; i < r.end(); ++i) ++owner[i];
  for (std::size_t i = 0; i < owner.size(); ++i) EXPECT_EQ(owner[i], 1) << i;
}

TEST(Layout, LargerFramesRoundToPages) {
  const auto l = default_ssa_layout(2688, 1024);
  l.validate();
  EXPECT_EQ(l.total_size % 4096, 0u);
  EXPECT_GE(l.total_size, 2688u + 1024u + 176u);
}

TEST(Plan, GprOnlyProgramUsesAllExtendedState) {
  const auto plan = plan_second_stack(default_ssa_layout(), {}, AddressingMode::la48());
  EXPECT_EQ(plan.s, 0u);
  EXPECT_EQ(plan.N, 2560u);
  EXPECT_EQ(plan.o, 0);
  EXPECT_FALSE(plan.fallback_mode);
  EXPECT_EQ(plan.stack_start(), 0u);
}

TEST(Plan, XmmUserKeepsLargestUnusedRun) {
  FeatureSet f;
  f.used.insert(FeatureClass::kXmm);
  const auto plan = plan_second_stack(default_ssa_layout(), f, AddressingMode::la48());
  // FP [0,128) is cut off by XMM [128,384); the run after XMM wins.
  EXPECT_EQ(plan.s, 384u);
  EXPECT_EQ(plan.N, 2560u - 384u);
}

TEST(PlanProperty, NeverOverlapsUsedState) {
  const auto layout = default_ssa_layout();
  for (unsigned mask = 0; mask < 31; ++mask) {
    const auto feats = features_from_mask(mask);
    const auto plan = plan_second_stack(layout, feats, AddressingMode::la48());
    ASSERT_FALSE(plan.fallback_mode) << mask;
    const ByteRange stack{plan.s, plan.N};
    for (const auto& r : feats.used_ranges(layout)) EXPECT_FALSE(stack.overlaps(r)) << mask;
    EXPECT_LE(stack.end(), layout.xsave_size() + layout.misc_size());
    EXPECT_EQ(plan.s % 8, 0u);
    EXPECT_EQ(plan.N % 8, 0u);
  }
}

TEST(Plan, FallbackWhenEverythingUsed) {
  const auto plan = plan_second_stack(default_ssa_layout(), features_from_mask(31),
                                      AddressingMode::la48());
  EXPECT_TRUE(plan.fallback_mode);
  EXPECT_EQ(plan.o, 16);
  EXPECT_EQ(plan.s, 2560u);
  EXPECT_EQ(plan.slot_shift(), 6u);
  EXPECT_EQ(plan.stack_start(), 2566u);
  EXPECT_EQ(plan.N, 176u - 6u);

  const auto p57 = plan_second_stack(default_ssa_layout(), features_from_mask(31),
                                     AddressingMode::la57(), 8);
  EXPECT_EQ(p57.o, 8);
  EXPECT_EQ(p57.slot_shift(), 7u);
}

TEST(FrameSize, Formula) {
  EXPECT_EQ(frame_size({1, 2560, 64}).bytes, 16u);
  EXPECT_EQ(frame_size({1, 2560, 64}).stored_generic_count, 1u);
  EXPECT_EQ(frame_size({0, 2560, 64}).bytes, 8u);
  // floor(2560 / 512) = 5 caps M+1.
  EXPECT_EQ(frame_size({10, 2560, 64}).bytes, 40u);
  EXPECT_EQ(frame_size({10, 2560, 64}).stored_generic_count, 4u);
  EXPECT_THROW(frame_size({1, 256, 64}), LayoutError);
  EXPECT_THROW(frame_size({1, 2560, 0}), LayoutError);
}

TEST(FrameSizeProperty, Monotone) {
  for (std::size_t P = 1; P <= 40; ++P)
    for (std::size_t N = 8; N <= 2560; N += 40)
      for (std::size_t M = 0; M <= 20; ++M) {
        if (N / (8 * P) == 0) {
          EXPECT_THROW(frame_size({M, N, P}), LayoutError);
          continue;
        }
        const auto b = frame_size({M, N, P}).bytes;
        EXPECT_GT(b, 0u);
        EXPECT_EQ(b % 8, 0u);
        EXPECT_LE(b, frame_size({M + 1, N, P}).bytes);
        EXPECT_LE(b, frame_size({M, N + 40, P}).bytes);
        if ((N / (8 * (P + 1))) > 0) {
          EXPECT_GE(b, frame_size({M, N, P + 1}).bytes);
        }
        EXPECT_LE(b * P, N);  // P frames always fit
      }
}

TEST(PlanJson, RoundTrip) {
  auto plan = plan_second_stack(default_ssa_layout(), features_from_mask(31),
                                AddressingMode::la57(), 16);
  plan.frame_bytes["main"] = 16;
  plan.frame_bytes["f"] = 8;
  plan.P = 12;
  const auto back = plan_from_json(plan_to_json(plan));
  EXPECT_EQ(back.s, plan.s);
  EXPECT_EQ(back.N, plan.N);
  EXPECT_EQ(back.o, plan.o);
  EXPECT_EQ(back.mode, plan.mode);
  EXPECT_EQ(back.frame_bytes, plan.frame_bytes);
  EXPECT_EQ(back.P, plan.P);
  EXPECT_EQ(back.fallback_mode, plan.fallback_mode);
  EXPECT_EQ(plan_hash(back), plan_hash(plan));
  plan.frame_bytes["f"] = 16;
  EXPECT_NE(plan_hash(back), plan_hash(plan));
  EXPECT_THROW(plan_from_json("{not json"), LayoutError);
}

TEST(Features, ScanFindsClasses) {
  const auto p = parse_program(
      "main:\n"
      "\tpxor\t%xmm1, %xmm1\n"
      "\tvmovdqu64\t%zmm17, %zmm18\n"
      "\tkmovq\t%k1, %k2\n"
      "\tretq\n");
  const auto f = scan_used_features(p);
  EXPECT_TRUE(f.uses(FeatureClass::kXmm));
  EXPECT_TRUE(f.uses(FeatureClass::kZmm));
  EXPECT_TRUE(f.uses(FeatureClass::kOpmask));
  EXPECT_FALSE(f.uses(FeatureClass::kFpMmx));
  EXPECT_FALSE(f.uses(FeatureClass::kYmmHigh));
  EXPECT_TRUE(scan_used_features(parse_program("main:\n\tretq\n")).used.empty());
}
