#pragma once

// Abstract x86-64 machine for the supported subset, with a modeled SSA
// frame. An AEX is modeled as the full exit/handler/ERESUME round trip: the
// register file is dumped into the SSA and read back unchanged, so the only
// lasting effect is on SSA bytes.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qshield/asm_ir.hpp"
#include "qshield/instrument.hpp"
#include "qshield/ssa_layout.hpp"

namespace qshield {

class SimError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Instruction cap hit; distinct from a crash.
class BudgetExceeded : public SimError {
  using SimError::SimError;
};

enum class Outcome : std::uint8_t { kRunning, kCleanExit, kCrash };
enum class CrashReason : std::uint8_t {
  kNonCanonicalAccess,
  kUnmappedAccess,
  kVarysAbort,
  kDepthOverflow,
};
std::string to_string(Outcome o);
std::string to_string(CrashReason r);

struct StepOutcome {
  Outcome outcome = Outcome::kRunning;
  std::optional<CrashReason> reason;
  std::uint64_t site = 0;     // code address of the faulting instruction
  std::uint64_t address = 0;  // offending effective address, if any
};

struct Flags {
  bool zf = false, sf = false, cf = false, of = false;
  std::uint64_t to_rflags() const;
  static Flags from_rflags(std::uint64_t v);
  friend bool operator==(const Flags&, const Flags&) = default;
};

// 64-bit lanes per feature class, in SSA image order.
//   FP/MMX: 2 lanes per mm register (mantissa lane, then exponent lane)
//   XMM: lanes 0-1 of zmm0-15; YMM-high: lanes 2-3 of zmm0-15
//   ZMM: lanes 4-7 of zmm0-15, then all 8 lanes of zmm16-31; opmask: k0-7
struct ExtendedLanes {
  std::array<std::vector<std::uint64_t>, 5> lanes;
  ExtendedLanes();
  std::vector<std::uint64_t>& of(FeatureClass c) { return lanes[static_cast<int>(c)]; }
  const std::vector<std::uint64_t>& of(FeatureClass c) const {
    return lanes[static_cast<int>(c)];
  }
  std::uint64_t& lane(const Register& r, std::size_t i);
  std::uint64_t lane(const Register& r, std::size_t i) const;
  friend bool operator==(const ExtendedLanes&, const ExtendedLanes&) = default;
};

// GPRSGX word order (8 bytes each, 22 words = 176 bytes).
enum class GprsgxField : std::uint8_t {
  kRax = 0,  // rax..r15 occupy words 0-15 in encoding order
  kRflags = 16,
  kRip = 17,
  kUrsp = 18,
  kUrbp = 19,
  kExitInfo = 20,
  kFsBase = 21,
};
inline constexpr std::size_t gprsgx_word_offset(GprsgxField f) {
  return 8 * static_cast<std::size_t>(f);
}

struct MemoryRegion {
  std::string name;  // "stack", "data", "ssa"
  std::uint64_t base = 0;
  std::vector<std::uint8_t> bytes;
  bool contains(std::uint64_t addr, std::size_t n) const {
    return addr >= base && addr - base <= bytes.size() && bytes.size() - (addr - base) >= n;
  }
};

// A program prepared for execution: wrapped in a start routine that plays
// the runtime's role as main's caller, flattened into an instruction array.
struct LinkedProgram {
  struct Decoded {
    const Instruction* in = nullptr;
    std::uint32_t function = 0;
    std::uint32_t block = 0;  // global block id
    bool block_start = false;
    bool runtime = false;     // part of the start routine
    std::size_t target = 0;   // jump/call destination index
  };

  Program program;
  std::vector<Decoded> code;
  std::map<std::string, std::size_t> function_entry;
  std::vector<DataObject> data;
  SecondStackPlan plan;
  InstrumentationConfig cfg;
  SsaLayout layout;
  FeatureSet features;
  std::size_t start = 0;

  // code[] points into program, so the image moves but never copies.
  LinkedProgram() = default;
  LinkedProgram(const LinkedProgram&) = delete;
  LinkedProgram& operator=(const LinkedProgram&) = delete;
  LinkedProgram(LinkedProgram&&) noexcept = default;
  LinkedProgram& operator=(LinkedProgram&&) noexcept = default;

  static constexpr std::uint64_t kTextBase = 0x400000;
  static constexpr std::uint64_t kExitAddress = kTextBase - 16;
  static constexpr const char* kStartSymbol = "__qs_start";
  static std::uint64_t code_address(std::size_t index) { return kTextBase + 16 * index; }
};

// Validates plan/program consistency (reserved register untouched by
// original code, frame bytes present) and links.
LinkedProgram link_program(const Program& p, const SecondStackPlan& plan,
                           const InstrumentationConfig& cfg,
                           const SsaLayout& layout = default_ssa_layout());

struct MachineState {
  std::array<std::uint64_t, 16> gpr{};
  ExtendedLanes ext;
  Flags flags;
  std::size_t rip = 0;  // index into LinkedProgram::code
  std::vector<MemoryRegion> memory;  // stack, data, ssa
  std::uint64_t ssa_base = 0;
  std::uint64_t retired = 0;
  std::uint64_t aex_count = 0;
  std::map<std::string, std::uint64_t> symbols;
  const LinkedProgram* image = nullptr;
  std::shared_ptr<const LinkedProgram> owned_image;  // set by the Program overload of load

  // Block-guarantee bookkeeping.
  bool successor_entered = false;
  bool in_later_block = false;
  bool entered_block_after_attacked = false;
  std::uint64_t program_retired = 0;

  MemoryRegion& region(const std::string& name);
  const MemoryRegion& region(const std::string& name) const;
  std::uint64_t read_u64(std::uint64_t addr) const;  // throws SimError if unmapped
  void write_u64(std::uint64_t addr, std::uint64_t v);
  std::uint64_t reserved_register_value() const;
};

inline constexpr std::uint64_t kPrimeValue = 0xAAAAAAAAAAAAAAAAULL;

MachineState load(const LinkedProgram& image, std::size_t stack_bytes, std::uint64_t seed);
MachineState load(const Program& p, const SecondStackPlan& plan, const InstrumentationConfig& cfg,
                  std::size_t stack_bytes, std::uint64_t seed);

StepOutcome step(MachineState& st);
void deliver_aex(MachineState& st);

struct AttackSchedule {
  std::optional<std::uint64_t> first_aex_at;  // none: benign run
  bool random_start = false;  // draw first_aex_at from the trial seed
  std::uint64_t interval = 1;
  std::uint64_t max_aex = 100000;

  static AttackSchedule none() { return {}; }
  static AttackSchedule single_step(std::uint64_t first, std::uint64_t max_aex = 100000) {
    return {first, false, 1, max_aex};
  }
  static AttackSchedule random(std::uint64_t interval = 1, std::uint64_t max_aex = 100000) {
    return {std::nullopt, true, interval, max_aex};
  }
  bool active() const { return first_aex_at.has_value() || random_start; }
};

struct TrialOptions {
  std::size_t stack_bytes = 64 * 1024;
  std::uint64_t budget = 20'000'000;
  std::ostream* trace = nullptr;
  // Retired-instruction window the random start is drawn from; filled by a
  // benign pre-run when empty.
  std::optional<std::pair<std::uint64_t, std::uint64_t>> window;
};

struct TrialResult {
  Outcome outcome = Outcome::kRunning;
  std::optional<CrashReason> crash_reason;
  std::uint64_t aex_before_crash = 0;  // response delay
  std::uint64_t aex_count = 0;
  std::uint64_t instructions_after_first_aex = 0;
  bool entered_block_after_attacked = false;
  std::optional<std::uint64_t> first_aex_at;
  std::uint64_t exit_value = 0;
  std::uint64_t retired = 0;
  std::uint64_t program_retired = 0;  // excluding the start routine
  std::uint64_t window_begin = 0, window_end = 0;
  std::uint64_t crash_site = 0, crash_address = 0;
  std::string crash_instruction;
  std::uint64_t data_hash = 0;
};

TrialResult run_trial(const LinkedProgram& image, const AttackSchedule& sched,
                      std::uint64_t seed, const TrialOptions& opts = {});
TrialResult run_trial(const Program& p, const SecondStackPlan& plan,
                      const InstrumentationConfig& cfg, const AttackSchedule& sched,
                      std::uint64_t seed, const TrialOptions& opts = {});

// Overwrite probability of the o-bit offset scheme.
struct RegModel {
  enum class Kind : std::uint8_t { kUniform64, kAddressLike, kMixture };
  Kind kind = Kind::kUniform64;
  double p = 0.5;  // mixture: probability of an address-like value
  static RegModel uniform64() { return {Kind::kUniform64, 0.0}; }
  static RegModel address_like() { return {Kind::kAddressLike, 1.0}; }
  static RegModel mixture(double p) { return {Kind::kMixture, p}; }
  static RegModel from_string(const std::string& s);
  std::string to_string() const;
};

struct ProbabilityEstimate {
  std::uint64_t samples = 0;
  std::uint64_t non_canonical = 0;
  double rate() const { return samples ? double(non_canonical) / double(samples) : 0.0; }
};

// Stores a canonical address in a slot shifted by o bits, overwrites the two
// covering register words with values from reg_model, and counts the slots
// that come out non-canonical.
ProbabilityEstimate mc_overwrite_probability(AddressingMode mode, int o, RegModel model,
                                             std::uint64_t samples, std::uint64_t seed);

// Exact count over all 2^(u+1) patterns of the bits deciding canonicality.
struct ExactOracle {
  std::uint64_t patterns = 0;
  std::uint64_t canonical = 0;
  double non_canonical_fraction() const {
    return 1.0 - double(canonical) / double(patterns);
  }
};
ExactOracle exact_overwrite_oracle(AddressingMode mode);

// Builds the slot value seen after the overwrite: bytes [shift, shift+8) of
// lo||hi (little endian), where shift = (8 - (o/8) % 8) % 8.
std::uint64_t overlapped_slot(std::uint64_t lo, std::uint64_t hi, int o);

}  // namespace qshield
