#include <gtest/gtest.h>

#include "qshield/instrument.hpp"
#include "test_util.hpp"

using namespace qshield;

namespace {

Program load(const std::string& path) {
  auto p = parse_program(test::read(path));
  if (p.entry.empty()) p.entry = "main";
  return p;
}

InstrumentResult qs_block(const Program& p, std::uint64_t seed = 1) {
  InstrumentationConfig cfg;
  cfg.seed = seed;
  return instrument(p, plan_for(p, cfg), cfg);
}

std::vector<const Instruction*> with(const Function& f, Provenance pv) {
  std::vector<const Instruction*> out;
  for (const auto& b : f.blocks)
    for (const auto& in : b.items)
      if (!in.is_directive() && in.provenance == pv) out.push_back(&in);
  return out;
}

}  // namespace

TEST(MemRefs, ExampleHasOneGenericReference) {
  const auto p = load(test::data("example.s"));
  const auto a = identify_memory_refs(*p.find("lookup"));
  ASSERT_EQ(a.M(), 1u);
  EXPECT_EQ(a.refs[0].source_slot.displacement, -24);
  EXPECT_EQ(a.refs[0].temp_register, reg::gpr64(reg::kRax));
}

TEST(MemRefs, ValuesAreNotReferences) {
  // -16(%rbp) is loaded but only used as a value operand.
  const auto p = parse_program(
      "f:\n\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n\tmovq\t-16(%rbp), %rax\n"
      "\taddq\t%rax, %rcx\n\tpopq\t%rbp\n\tretq\n");
  EXPECT_EQ(identify_memory_refs(p.functions[0]).M(), 0u);
}

TEST(QsBlock, ExampleTransformation) {
  const auto p = load(test::data("example.s"));
  const auto r = qs_block(p);
  const auto& f = *r.program.find("lookup");
  EXPECT_EQ(r.plan.frame_bytes.at("lookup"), 16u);
  EXPECT_EQ(r.stats.injected, 8u);
  EXPECT_EQ(r.stats.modified, 2u);

  const auto inj = with(f, Provenance::kInjected);
  ASSERT_EQ(inj.size(), 8u);
  EXPECT_EQ(inj.front()->text(), "addq\t$16, %r14");
  EXPECT_EQ(inj[1]->text(), "movq\t%rbp, (%r14)");
  EXPECT_EQ(inj.back()->text(), "subq\t$16, %r14");
  const auto mod = with(f, Provenance::kModified);
  ASSERT_EQ(mod.size(), 2u);
  EXPECT_EQ(mod[0]->text(), "movq\t%rdx, -8(%r14)");
  EXPECT_EQ(mod[1]->text(), "movq\t-8(%r14), %rax");

  // Every non-entry block starts with the reload.
  for (std::size_t i = 1; i < f.blocks.size(); ++i) {
    if (!f.blocks[i].instruction_count()) continue;
    EXPECT_EQ(f.blocks[i].first_instruction()->text(), "movq\t(%r14), %rbp") << i;
  }
  // Only the last block needs the dummy access.
  const auto& last = f.blocks[4];
  EXPECT_EQ(last.label, ".LBB2_6");
  EXPECT_EQ(last.items[last.item_of_instruction(1)].text(), "movq\t-8(%rbp), %r10");
}

TEST(QsBlock, GoldenText) {
  const auto p = load(test::data("example.s"));
  const auto r = qs_block(p);
  EXPECT_EQ(r.header + emit_asm(r.program), test::read(test::data("example_expected.s")));
}

TEST(QsBlock, HeaderRecordsModeSeedAndPlan) {
  const auto r = qs_block(load(test::data("example.s")), 99);
  EXPECT_NE(r.header.find("mode=qs-block"), std::string::npos);
  EXPECT_NE(r.header.find("seed=99"), std::string::npos);
  EXPECT_NE(r.header.find("s=0 N=2560 o=0"), std::string::npos);
}

TEST(QsBlock, DummyWhenFirstAccessIsRelocated) {
  // The loop header's first access was rbp-based but moves to the second
  // frame, so a dummy rbp access is still needed there.
  const auto p = load(test::corpus("listwalk.s"));
  const auto r = qs_block(p);
  const auto& walk = *r.program.find("walk");
  bool checked = false;
  for (const auto& b : walk.blocks) {
    if (b.label != ".LBB1_1") continue;
    ASSERT_GE(b.instruction_count(), 3u);
    EXPECT_EQ(b.items[b.item_of_instruction(1)].provenance, Provenance::kInjected);
    EXPECT_TRUE(b.items[b.item_of_instruction(1)].memory_operand()->based_on(reg::kRbp));
    checked = true;
  }
  EXPECT_TRUE(checked);
}

TEST(QsBlock, ScratchAvoidsLiveRegisters) {
  const auto p = load(test::data("example.s"));
  // Make r10 busy: the dummy must pick the next candidate.
  auto text = test::read(test::data("example.s"));
  text.replace(text.find("\taddq\t%rcx, %rax"), 16, "\taddq\t%r10, %rax");
  const auto r = qs_block(parse_program(text));
  EXPECT_NE(emit_asm(r.program).find("movq\t-8(%rbp), %r11\t;injected"), std::string::npos);
}

TEST(QsBlock, ReservedRegisterConflict) {
  const auto p = parse_program(
      "main:\n\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n\tmovq\t$1, %r14\n\tpopq\t%rbp\n\tretq\n");
  InstrumentationConfig cfg;
  EXPECT_THROW(instrument(p, plan_for(p, cfg), cfg), InstrumentError);
}

TEST(QsBlock, InjectionBoundOverCorpus) {
  for (const auto& path : test::corpus_files()) {
    const auto r = qs_block(load(path));
    const auto& s = r.stats;
    EXPECT_LE(s.injected, 2 * (s.block_count - 1) + 3 * s.function_count) << path;
    for (const auto& f : s.functions)
      EXPECT_LE(f.injected, 2 * (f.blocks - 1) + 3) << path << " " << f.function;
  }
}

TEST(QsBlock, SeededSelectionWhenSlotsRunOut) {
  // Five generic references, but N/8P leaves room for only two.
  std::string text = "main:\n\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n\tsubq\t$48, %rsp\n";
  for (int k = 1; k <= 5; ++k)
    text += "\tmovq\t-" + std::to_string(8 * k) + "(%rbp), %rax\n\tmovq\t(%rax), %rcx\n";
  text += "\taddq\t$48, %rsp\n\tpopq\t%rbp\n\tretq\n";
  const auto p = parse_program(text);
  InstrumentationConfig cfg;
  cfg.P = 2560 / 24;  // floor(N/8P) = 3 -> 2 stored references
  std::set<std::string> variants;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    cfg.seed = seed;
    const auto r = instrument(p, plan_for(p, cfg), cfg);
    EXPECT_EQ(r.stats.modified, 2u);
    EXPECT_EQ(r.plan.frame_bytes.at("main"), 24u);
    const auto again = instrument(p, plan_for(p, cfg), cfg);
    EXPECT_EQ(emit_asm(r.program), emit_asm(again.program));
    variants.insert(emit_asm(r.program));
  }
  EXPECT_GT(variants.size(), 1u);
}

TEST(QsIntra, ThreePerFunction) {
  for (const auto& path : test::corpus_files()) {
    const auto p = load(path);
    InstrumentationConfig cfg;
    cfg.mode = Mode::kQsIntra;
    const auto r = instrument(p, plan_for(p, cfg), cfg);
    for (const auto& f : r.stats.functions) {
      EXPECT_EQ(f.injected, 2 + f.returns) << path << " " << f.function;
    }
  }
}

TEST(None, Unchanged) {
  const auto p = load(test::corpus("sort.s"));
  InstrumentationConfig cfg;
  cfg.mode = Mode::kNone;
  const auto r = instrument(p, plan_for(p, cfg), cfg);
  EXPECT_TRUE(structurally_equal(p, r.program));
  EXPECT_EQ(r.stats.injected, 0u);
}

TEST(Varys, ChecksEveryIInstructions) {
  const auto p = load(test::data("example.s"));
  const auto r = instrument_varys(p, 4);
  EXPECT_EQ(r.stats.check_sites, 7u);
  EXPECT_EQ(r.stats.injected, 3 * r.stats.check_sites);
  ASSERT_NE(r.program.find(kAbortStub), nullptr);
  const auto out = emit_asm(r.program);
  EXPECT_NE(out.find("__varys_init:"), std::string::npos);
  // The check before "jne .LBB2_4" goes ahead of the cmpq that feeds it.
  EXPECT_NE(out.find("jne\t__varys_abort\t;injected\n\tcmpq\t$1, (%rax)\n\tjne\t.LBB2_4"),
            std::string::npos);
}

TEST(Varys, AtLeastThreePerSiteOverCorpus) {
  for (const auto& path : test::corpus_files()) {
    for (int I : {1, 4, 8, 16}) {
      const auto r = instrument_varys(load(path), I);
      EXPECT_GT(r.stats.check_sites, 0u);
      EXPECT_GE(r.stats.injected, 3 * r.stats.check_sites) << path << " I=" << I;
    }
  }
}

TEST(Varys, FewerChecksWithLargerInterval) {
  const auto p = load(test::corpus("feistel.s"));
  std::size_t prev = SIZE_MAX;
  for (int I : {1, 2, 4, 8, 16, 32}) {
    const auto r = instrument_varys(p, I);
    EXPECT_LE(r.stats.check_sites, prev);
    prev = r.stats.check_sites;
  }
  EXPECT_THROW(instrument_varys(p, 0), InstrumentError);
}

TEST(Config, ParseAndLabel) {
  EXPECT_EQ(InstrumentationConfig::parse("varys:8").varys_interval, 8);
  EXPECT_EQ(InstrumentationConfig::parse("varys(2)").label(), "varys(2)");
  EXPECT_EQ(InstrumentationConfig::parse("qs-intra").mode, Mode::kQsIntra);
  EXPECT_THROW(InstrumentationConfig::parse("qs-everything"), InstrumentError);
  EXPECT_THROW(InstrumentationConfig::parse("varys:0"), InstrumentError);
}
