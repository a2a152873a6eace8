#pragma once

// State Save Area model and second-stack planning.
//
// The SSA frame is XSAVE | MISC | GPRSGX (176 bytes) | PAD, padded to a
// page multiple. Extended-feature state is written into XSAVE+MISC on every
// exit; the bytes belonging to feature classes the program never touches
// therefore receive whatever the loader primed those registers with, which
// is where the second stack is placed.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "qshield/asm_ir.hpp"

namespace qshield {

class LayoutError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AddressingMode {
  enum class Name : std::uint8_t { kLA48, kLA57 };
  Name name = Name::kLA48;

  constexpr int v() const { return name == Name::kLA48 ? 48 : 57; }
  constexpr int u() const { return 64 - v(); }
  std::string to_string() const { return name == Name::kLA48 ? "LA48" : "LA57"; }

  static constexpr AddressingMode la48() { return {Name::kLA48}; }
  static constexpr AddressingMode la57() { return {Name::kLA57}; }
  static AddressingMode from_string(const std::string& s);
  friend bool operator==(const AddressingMode&, const AddressingMode&) = default;
};

// True iff bits [v, 63] of addr all equal bit v-1.
constexpr bool is_canonical(std::uint64_t addr, AddressingMode mode) {
  const int v = mode.v();
  const auto top = static_cast<std::int64_t>(addr) >> (v - 1);
  return top == 0 || top == -1;
}

enum class RegionName : std::uint8_t { kXsave, kMisc, kGprsgx, kPad };
std::string to_string(RegionName r);

struct ByteRange {
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t end() const { return offset + size; }
  bool overlaps(const ByteRange& o) const {
    return offset < o.end() && o.offset < end();
  }
  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

enum class FeatureClass : std::uint8_t { kFpMmx, kXmm, kYmmHigh, kZmm, kOpmask };
inline constexpr FeatureClass kAllFeatureClasses[] = {
    FeatureClass::kFpMmx, FeatureClass::kXmm, FeatureClass::kYmmHigh,
    FeatureClass::kZmm, FeatureClass::kOpmask};
std::string to_string(FeatureClass c);

// Bytes of register image each class contributes on an exit.
std::size_t feature_image_bytes(FeatureClass c);

struct SsaRegion {
  RegionName name;
  ByteRange range;
};

struct SsaLayout {
  std::vector<SsaRegion> regions;  // XSAVE, MISC, GPRSGX, PAD in order
  std::size_t total_size = 0;
  // Where each feature class's state lands inside XSAVE+MISC. A class may
  // own several ranges; its register image is written cyclically across
  // them. Synthetic, configurable sub-layout.
  std::map<FeatureClass, std::vector<ByteRange>> feature_ranges;

  static constexpr std::size_t kGprsgxSize = 176;

  const SsaRegion& region(RegionName n) const;
  std::size_t xsave_size() const { return region(RegionName::kXsave).range.size; }
  std::size_t misc_size() const { return region(RegionName::kMisc).range.size; }
  std::size_t gprsgx_offset() const { return region(RegionName::kGprsgx).range.offset; }
  void validate() const;
};

SsaLayout default_ssa_layout(std::size_t xsave_bytes = 2048, std::size_t misc_bytes = 512);

struct FeatureSet {
  std::set<FeatureClass> used;
  bool uses(FeatureClass c) const { return used.count(c) != 0; }
  bool all_used() const { return used.size() == std::size(kAllFeatureClasses); }
  // SSA byte ranges holding the program's own extended state.
  std::vector<ByteRange> used_ranges(const SsaLayout& layout) const;
};

FeatureSet scan_used_features(const Program& p);

struct SecondStackPlan {
  std::size_t s = 0;         // offset of the chosen region within the SSA
  std::size_t N = 0;         // usable bytes from the stack start
  int o = 0;                 // bit offset (0 unless fallback)
  AddressingMode mode;
  Register reserved_register = reg::gpr64(reg::kR14);
  std::map<std::string, std::size_t> frame_bytes;  // per function
  bool fallback_mode = false;
  std::size_t P = 64;
  std::size_t xsave_bytes = 2048;
  std::size_t misc_bytes = 512;

  // Byte shift applied inside the region so a stored slot's top u bits line
  // up with bits [64-o-u, 64-o) of the word written after it.
  std::size_t slot_shift() const {
    return static_cast<std::size_t>((8 - (o / 8) % 8) % 8);
  }
  std::size_t stack_start() const { return s + slot_shift(); }
  ByteRange stack_range() const { return {stack_start(), N}; }
};

SecondStackPlan plan_second_stack(const SsaLayout& layout, const FeatureSet& feats,
                                  AddressingMode mode, std::optional<int> o_req = {});

struct FrameSizeInputs {
  std::size_t M = 0;  // generic memory references in the function
  std::size_t N = 0;  // second-stack bytes
  std::size_t P = 1;  // maximum call depth
};

struct FrameSize {
  std::size_t bytes = 0;
  std::size_t stored_generic_count = 0;
};

// 8*min(M+1, floor(N/8P)) bytes; throws LayoutError when floor(N/8P) == 0.
FrameSize frame_size(const FrameSizeInputs& in);

// Plan (de)serialization; the JSON carries s, N, o, mode, reserved register,
// per-function frame bytes and the SSA sizing it was computed against.
std::string plan_to_json(const SecondStackPlan& plan);
SecondStackPlan plan_from_json(const std::string& text);
std::uint64_t plan_hash(const SecondStackPlan& plan);

}  // namespace qshield
