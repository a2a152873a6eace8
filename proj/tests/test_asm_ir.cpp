#include <gtest/gtest.h>

#include <random>

#include "qshield/asm_ir.hpp"
#include "test_util.hpp"

using namespace qshield;

TEST(Register, ParsesAllClasses) {
  EXPECT_EQ(parse_register("%rbp"), reg::gpr64(reg::kRbp));
  EXPECT_EQ(parse_register("r14")->index, reg::kR14);
  EXPECT_EQ(parse_register("%esi")->cls, RegClass::kGpr32);
  EXPECT_EQ(parse_register("%r10d")->cls, RegClass::kGpr32);
  EXPECT_EQ(parse_register("%al")->cls, RegClass::kGpr8);
  EXPECT_EQ(parse_register("%xmm3")->cls, RegClass::kXmm);
  EXPECT_EQ(parse_register("%zmm31")->index, 31);
  EXPECT_EQ(parse_register("%k7")->cls, RegClass::kOpmask);
  EXPECT_EQ(parse_register("%mm2")->cls, RegClass::kMmx);
  EXPECT_FALSE(parse_register("%foo").has_value());
}

TEST(Parse, OperandsAndRoundTrip) {
  const char* text =
      "main:\n"
      "\tpushq\t%rbp\n"
      "\tmovq\t%rsp, %rbp\n"
      "\tmovq\t-8(%rbp,%rcx,8), %rax\n"
      "\tleaq\ttable(%rip), %rdx\n"
      "\tmovl\t$0, -4(%rbp)\n"
      "\tpopq\t%rbp\n"
      "\tretq\n";
  const auto p = parse_program(text);
  ASSERT_EQ(p.functions.size(), 1u);
  const auto& b = p.functions[0].blocks[0];
  const auto* m = b.items[2].memory_operand();
  ASSERT_NE(m, nullptr);
  EXPECT_TRUE(m->based_on(reg::kRbp));
  EXPECT_EQ(m->displacement, -8);
  EXPECT_EQ(m->scale, 8);
  EXPECT_TRUE(b.items[3].memory_operand()->rip_relative());
  EXPECT_EQ(b.items[3].memory_operand()->symbol, "table");
  EXPECT_EQ(b.items[4].width, 4);

  const auto again = parse_program(emit_asm(p));
  EXPECT_TRUE(structurally_equal(p, again));
}

TEST(Parse, RejectsUnsupported) {
  EXPECT_THROW(parse_program("f:\n\tcpuid\n\tretq\n"), ParseError);
  EXPECT_THROW(parse_program("f:\n\tmovq\t%rax\n\tretq\n"), ParseError);
  try {
    parse_program("f:\n\tretq\n\tbogus\t%rax\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
}

TEST(Cfg, ExampleBlocks) {
  const auto p = parse_program(test::read(test::data("example.s")));
  const auto* f = p.find("lookup");
  ASSERT_NE(f, nullptr);
  EXPECT_EQ(p.block_count(), 5u);
  EXPECT_EQ(f->blocks[0].terminator, TerminatorKind::kFallthrough);
  std::vector<std::string> labels;
  for (const auto& b : f->blocks)
    if (b.instruction_count()) labels.push_back(b.label);
  EXPECT_EQ(labels, (std::vector<std::string>{"%bb.0", "%bb.1", "%bb.2", ".LBB2_4", ".LBB2_6"}));
  EXPECT_EQ(f->blocks[1].terminator, TerminatorKind::kJcc);
  EXPECT_EQ(f->blocks[2].terminator, TerminatorKind::kJmp);
}

TEST(Cfg, CallsEndBlocks) {
  const auto p = parse_program(
      "g:\n\tretq\n"
      "main:\n\tmovq\t$1, %rax\n\tcallq\tg\n\taddq\t$1, %rax\n\tretq\n");
  const auto* f = p.find("main");
  ASSERT_EQ(f->blocks.size(), 2u);
  EXPECT_EQ(f->blocks[0].terminator, TerminatorKind::kCallReturn);
  EXPECT_EQ(f->blocks[1].terminator, TerminatorKind::kRet);
}

TEST(Cfg, UnknownTargetRejected) {
  EXPECT_THROW(parse_program("main:\n\tjmp\t.Lnowhere\n"), ParseError);
  EXPECT_THROW(parse_program("main:\n\tcallq\texternal_fn\n\tretq\n"), ParseError);
}

// Every instruction lands in exactly one block, a block's only terminator is
// its last instruction, and every label starts a block.
TEST(CfgProperty, BlocksPartitionInstructions) {
  for (const auto& path : test::corpus_files()) {
    const auto text = test::read(path);
    const auto p = parse_program(text);
    std::size_t counted = 0;
    for (const auto& f : p.functions) {
      for (const auto& b : f.blocks) {
        const std::size_t n = b.instruction_count();
        counted += n;
        for (std::size_t i = 0; i + 1 < n; ++i) {
          const auto& in = b.items[b.item_of_instruction(i)];
          EXPECT_FALSE(in.is_terminator() || in.op == Op::kCall) << path << " " << in.text();
        }
      }
    }
    // Independent count straight from the text: tab-indented lines that are
    // neither directives nor comments.
    std::size_t expected = 0;
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      if (line.empty() || line[0] != '\t') continue;
      const auto c = line.find_first_not_of(" \t");
      if (c == std::string::npos || line[c] == '.' || line[c] == '#') continue;
      ++expected;
    }
    EXPECT_EQ(counted, expected) << path;
    EXPECT_TRUE(structurally_equal(p, parse_program(emit_asm(p)))) << path;
  }
}

TEST(Stats, AverageBlockSize) {
  const auto p = parse_program(test::read(test::data("example.s")));
  const auto s = program_block_stats(p);
  std::size_t total = 0;
  for (const auto& f : p.functions) total += f.instruction_count();
  EXPECT_EQ(s.block_count, 5u);
  EXPECT_DOUBLE_EQ(s.avg_block_size, static_cast<double>(total) / 5.0);
  EXPECT_FALSE(s.degenerate);
}

TEST(Data, QuadRelocations) {
  const auto p = parse_program(test::read(test::corpus("listwalk.s")));
  const auto objs = data_objects(p);
  auto it = std::find_if(objs.begin(), objs.end(), [](const DataObject& o) { return o.name == "n0"; });
  ASSERT_NE(it, objs.end());
  EXPECT_EQ(it->bytes.size(), 16u);
  EXPECT_EQ(it->bytes[0], 7);
  ASSERT_EQ(it->relocs.size(), 1u);
  EXPECT_EQ(it->relocs[0].symbol, "n1");
  EXPECT_EQ(it->relocs[0].offset, 8u);
}

TEST(Emit, PreservesDirectivesAndMarkers) {
  const auto text = test::read(test::data("example.s"));
  const auto out = emit_asm(parse_program(text));
  EXPECT_NE(out.find("# %bb.1:"), std::string::npos);
  EXPECT_NE(out.find(".LBB2_6:"), std::string::npos);
  EXPECT_NE(out.find("\t.cfi_startproc"), std::string::npos);
  EXPECT_NE(out.find("\t.size\tlookup"), std::string::npos);
}
