#pragma once

// Instrumentation passes: the second-stack pass (block-granularity and
// intra-block variants) and a periodic SSA-sentinel check baseline.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qshield/asm_ir.hpp"
#include "qshield/ssa_layout.hpp"

namespace qshield {

class InstrumentError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mode : std::uint8_t { kNone, kQsBlock, kQsIntra, kVarys };

struct InstrumentationConfig {
  Mode mode = Mode::kQsBlock;
  int varys_interval = 4;  // I, checks every I original instructions
  AddressingMode addressing = AddressingMode::la48();
  std::size_t P = 64;  // call-depth bound
  Register reserved_register = reg::gpr64(reg::kR14);
  std::int32_t dummy_displacement = -8;
  std::uint64_t seed = 1;

  std::string label() const;  // "qs-block", "varys(4)", ...
  // Accepts qs-block, qs-intra, none, varys (with varys_interval) or varys:N.
  static InstrumentationConfig parse(const std::string& mode, int varys_interval = 4);
  bool is_second_stack() const { return mode == Mode::kQsBlock || mode == Mode::kQsIntra; }
};

struct MemRef {
  Register temp_register;
  MemOperand source_slot;  // rbp-rooted stack slot the reference is loaded from
  int source_line = 0;     // line of the load
};

struct MemRefAnalysis {
  std::string function;
  std::vector<MemRef> refs;  // one entry per distinct source slot
  std::size_t M() const { return refs.size(); }
};

MemRefAnalysis identify_memory_refs(const Function& f,
                                    Register reserved = reg::gpr64(reg::kR14));

struct FunctionOverhead {
  std::string function;
  std::size_t original = 0;
  std::size_t blocks = 0;
  std::size_t returns = 0;
  std::size_t injected = 0;
  std::size_t modified = 0;
  std::size_t check_sites = 0;  // sentinel checks (baseline only)
  std::size_t frame_bytes = 0;
  bool unprotected_leaf = false;
};

struct OverheadStats {
  std::vector<FunctionOverhead> functions;
  std::size_t original = 0;
  std::size_t injected = 0;
  std::size_t modified = 0;
  std::size_t check_sites = 0;
  std::size_t stub_instructions = 0;
  std::size_t block_count = 0;
  std::size_t function_count = 0;

  double static_size_ratio() const {
    return original ? static_cast<double>(original + injected + stub_instructions) /
                          static_cast<double>(original)
                    : 1.0;
  }
};

struct InstrumentResult {
  Program program;
  OverheadStats stats;
  SecondStackPlan plan;
  std::string header;  // metadata comment block for emitted output
};

// Fills plan.frame_bytes (and plan.P) for every function of p.
void assign_frames(SecondStackPlan& plan, const Program& p, std::size_t P,
                   Register reserved = reg::gpr64(reg::kR14));

// Computes the plan for p from its feature usage (convenience for callers
// that do not supply one).
SecondStackPlan plan_for(const Program& p, const InstrumentationConfig& cfg,
                         const SsaLayout& layout = default_ssa_layout(),
                         std::optional<int> o_req = {});

InstrumentResult instrument_second_stack(const Program& p, SecondStackPlan plan,
                                       const InstrumentationConfig& cfg);
InstrumentResult instrument_varys(const Program& p, int interval);

// Dispatch on cfg.mode; kNone returns p unchanged with zero stats.
InstrumentResult instrument(const Program& p, const SecondStackPlan& plan,
                            const InstrumentationConfig& cfg);

// Names the baseline pass adds to a program.
inline constexpr const char* kSentinelSymbol = "__ssa_sentinel";
inline constexpr const char* kSentinelInitSymbol = "__varys_init";
inline constexpr const char* kAbortStub = "__varys_abort";
inline constexpr std::uint64_t kSentinelValue = 0x5AFE5AFE5AFE5AFEULL;

}  // namespace qshield
