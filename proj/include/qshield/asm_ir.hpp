#pragma once

// Assembly IR: a small AT&T-syntax x86-64 subset, partitioned into
// functions and basic blocks. Both instrumentation passes and the simulator
// operate on this representation.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace qshield {

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

enum class RegClass : std::uint8_t {
  kGpr64,
  kGpr32,
  kGpr16,
  kGpr8,
  kXmm,
  kYmm,
  kZmm,
  kMmx,  // FP/MMX stack registers, addressed as %mm0-%mm7
  kOpmask,
  kRip,
};

struct Register {
  RegClass cls = RegClass::kGpr64;
  std::uint8_t index = 0;

  bool is_gpr() const {
    return cls == RegClass::kGpr64 || cls == RegClass::kGpr32 ||
           cls == RegClass::kGpr16 || cls == RegClass::kGpr8;
  }
  bool is_vector() const {
    return cls == RegClass::kXmm || cls == RegClass::kYmm ||
           cls == RegClass::kZmm;
  }
  // Operand width in bytes for GPRs; lane-bytes for vector classes.
  int width() const;
  std::string name() const;

  friend bool operator==(const Register&, const Register&) = default;
};

// x86 encoding order, which is also the GPRSGX save order.
namespace reg {
inline constexpr std::uint8_t kRax = 0, kRcx = 1, kRdx = 2, kRbx = 3,
                              kRsp = 4, kRbp = 5, kRsi = 6, kRdi = 7,
                              kR8 = 8, kR9 = 9, kR10 = 10, kR11 = 11,
                              kR12 = 12, kR13 = 13, kR14 = 14, kR15 = 15;
inline Register gpr64(std::uint8_t i) { return {RegClass::kGpr64, i}; }
}  // namespace reg

std::optional<Register> parse_register(std::string_view name);

struct Immediate {
  std::int64_t value = 0;
  friend bool operator==(const Immediate&, const Immediate&) = default;
};

struct MemOperand {
  std::optional<Register> base;
  std::optional<Register> index;
  std::uint8_t scale = 1;
  std::int32_t displacement = 0;
  std::string symbol;  // only with a %rip base

  bool rip_relative() const {
    return base && base->cls == RegClass::kRip;
  }
  bool based_on(std::uint8_t gpr) const {
    return base && base->is_gpr() && base->index == gpr;
  }
  friend bool operator==(const MemOperand&, const MemOperand&) = default;
};

struct LabelRef {
  std::string name;
  friend bool operator==(const LabelRef&, const LabelRef&) = default;
};

using Operand = std::variant<Register, Immediate, MemOperand, LabelRef>;

std::string format_operand(const Operand& op);

enum class Provenance : std::uint8_t { kOriginal, kInjected, kModified };

// Semantic opcode shared by the analyses and the simulator.
enum class Op : std::uint8_t {
  kMov,
  kMovabs,
  kMovsx,   // movslq
  kMovzx,   // movzbl, movzbq
  kLea,
  kAdd,
  kSub,
  kImul,
  kAnd,
  kOr,
  kXor,
  kShl,
  kShr,
  kSar,
  kCmp,
  kTest,
  kPush,
  kPop,
  kCall,
  kRet,
  kJmp,
  kJcc,
  kNop,
  kUd2,
  kVecMov,  // movaps/movdqa/vmovdqu64/kmovq and friends
  kVecXor,  // pxor/vpxor/vpxorq
};

enum class Cond : std::uint8_t {
  kNone, kE, kNe, kL, kLe, kG, kGe, kB, kBe, kA, kAe, kS, kNs,
};

struct Instruction {
  enum class Kind : std::uint8_t { kOp, kDirective };

  Kind kind = Kind::kOp;
  std::string mnemonic;  // as written; directive text for kDirective
  std::vector<Operand> operands;
  int source_line = 0;
  Provenance provenance = Provenance::kOriginal;

  // Filled by the parser from the mnemonic table.
  Op op = Op::kNop;
  Cond cond = Cond::kNone;
  int width = 8;  // operand size in bytes when it matters

  bool is_directive() const { return kind == Kind::kDirective; }
  bool is_terminator() const;
  bool reads_flags() const { return op == Op::kJcc; }
  bool writes_flags() const;
  const MemOperand* memory_operand() const;
  MemOperand* memory_operand();
  bool writes_register(std::uint8_t gpr) const;
  bool mentions_register(std::uint8_t gpr) const;
  std::string text() const;
};

// Build an instruction from mnemonic + operands and validate it against the
// supported subset. Throws ParseError on unsupported mnemonics or operands.
Instruction make_instruction(std::string_view mnemonic,
                             std::vector<Operand> operands,
                             Provenance provenance = Provenance::kOriginal,
                             int source_line = 0);

enum class TerminatorKind : std::uint8_t {
  kFallthrough,
  kJmp,
  kJcc,
  kRet,
  kCallReturn,  // block ends at a call; successor is the return continuation
  kTrap,
};

std::string_view to_string(TerminatorKind k);

enum class LabelKind : std::uint8_t {
  kNone,    // implicit block (fallthrough split), nothing emitted
  kNamed,   // ".LBB2_6:"
  kMarker,  // "# %bb.1:" emitted by clang for unlabeled blocks
};

struct BasicBlock {
  std::string label;
  LabelKind label_kind = LabelKind::kNone;
  // Directives that precede the label line (entry block only, e.g.
  // .cfi_startproc before "# %bb.0:").
  std::size_t label_after = 0;
  std::vector<Instruction> items;  // instructions and in-block directives
  TerminatorKind terminator = TerminatorKind::kFallthrough;

  std::size_t instruction_count() const;
  std::size_t original_count() const;
  // Index into items of the n-th non-directive instruction, or items.size().
  std::size_t item_of_instruction(std::size_t n) const;
  const Instruction* first_instruction() const;
  const Instruction* last_instruction() const;
};

struct Function {
  std::string name;
  std::vector<BasicBlock> blocks;  // blocks[0] is the entry
  bool is_instrumented = false;
  int source_line = 0;

  const BasicBlock& entry() const { return blocks.front(); }
  std::size_t instruction_count() const;
};

struct TopLevelItem {
  enum class Kind : std::uint8_t { kLine, kFunction };
  Kind kind = Kind::kLine;
  std::string text;           // verbatim for kLine
  std::size_t function = 0;   // index into Program::functions
};

struct Program {
  std::vector<Function> functions;
  std::vector<TopLevelItem> items;  // emission order
  std::string entry;                // designated entry for simulation

  const Function* find(std::string_view name) const;
  Function* find(std::string_view name);
  std::size_t block_count() const;  // blocks holding at least one instruction
};

// Structural equality ignores source lines and the instrumented flag.
bool structurally_equal(const Program& a, const Program& b);

Program parse_program(std::string_view text);

// Re-partitions a function: a block starts at every label and after every
// terminator. Validates jump/call targets against `known_functions` and the
// function's own labels.
Function build_cfg(Function f, const std::vector<std::string>& known_functions);

std::string emit_asm(const Program& p);

struct BlockStats {
  std::string function;
  std::size_t block_count = 0;
  std::size_t original_instructions = 0;
  double avg_block_size = 0.0;
  bool degenerate = false;  // no original instructions at all
};

std::vector<BlockStats> block_stats(const Program& p);
// Whole-program aggregate (function name empty).
BlockStats program_block_stats(const Program& p);

// Data objects defined in data sections, for the loader.
struct DataObject {
  struct Reloc {
    std::size_t offset;
    std::string symbol;
    std::int64_t addend;
  };
  std::string name;
  std::size_t alignment = 8;
  std::vector<std::uint8_t> bytes;
  std::vector<Reloc> relocs;  // ".quad sym" entries
};

std::vector<DataObject> data_objects(const Program& p);

}  // namespace qshield
