#include "qshield/ssa_layout.hpp"

#include <algorithm>

#include <json.hpp>

namespace qshield {

AddressingMode AddressingMode::from_string(const std::string& s) {
  if (s == "LA48" || s == "la48") return la48();
  if (s == "LA57" || s == "la57") return la57();
  throw LayoutError("unknown addressing mode '" + s + "'");
}

std::string to_string(RegionName r) {
  switch (r) {
    case RegionName::kXsave: return "XSAVE";
    case RegionName::kMisc: return "MISC";
    case RegionName::kGprsgx: return "GPRSGX";
    case RegionName::kPad: return "PAD";
  }
  return "?";
}

std::string to_string(FeatureClass c) {
  switch (c) {
    case FeatureClass::kFpMmx: return "FP/MMX";
    case FeatureClass::kXmm: return "XMM0-15";
    case FeatureClass::kYmmHigh: return "YMM-high";
    case FeatureClass::kZmm: return "ZMM";
    case FeatureClass::kOpmask: return "opmask";
  }
  return "?";
}

std::size_t feature_image_bytes(FeatureClass c) {
  switch (c) {
    case FeatureClass::kFpMmx: return 8 * 16;        // mm0-7, 16-byte slots
    case FeatureClass::kXmm: return 16 * 16;         // xmm0-15
    case FeatureClass::kYmmHigh: return 16 * 16;     // ymm0-15 bits 128-255
    case FeatureClass::kZmm: return 16 * 32 + 16 * 64;  // zmm0-15 hi256, zmm16-31
    case FeatureClass::kOpmask: return 8 * 8;        // k0-7
  }
  return 0;
}

const SsaRegion& SsaLayout::region(RegionName n) const {
  for (const auto& r : regions)
    if (r.name == n) return r;
  throw LayoutError("layout has no " + to_string(n) + " region");
}

void SsaLayout::validate() const {
  std::size_t at = 0;
  for (const auto& r : regions) {
    if (r.range.offset != at) throw LayoutError("SSA regions are not contiguous");
    at = r.range.end();
  }
  if (at != total_size) throw LayoutError("SSA regions do not cover the frame");
  if (total_size % 4096 != 0) throw LayoutError("SSA size is not a page multiple");
  if (region(RegionName::kGprsgx).range.size != kGprsgxSize)
    throw LayoutError("GPRSGX must be 176 bytes");
  if (xsave_size() < 2048 || xsave_size() > 3072)
    throw LayoutError("XSAVE size out of range [2048, 3072]");
  if (misc_size() < 512 || misc_size() > 1024)
    throw LayoutError("MISC size out of range [512, 1024]");
  const ByteRange ext{0, xsave_size() + misc_size()};
  std::vector<ByteRange> all;
  for (const auto& [cls, ranges] : feature_ranges) {
    std::size_t bytes = 0;
    for (const auto& r : ranges) {
      if (r.offset < ext.offset || r.end() > ext.end())
        throw LayoutError("feature range outside XSAVE+MISC");
      bytes += r.size;
      all.push_back(r);
    }
    if (bytes < feature_image_bytes(cls))
      throw LayoutError("feature range too small for " + to_string(cls));
  }
  std::sort(all.begin(), all.end(),
            [](const ByteRange& a, const ByteRange& b) { return a.offset < b.offset; });
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i - 1].overlaps(all[i])) throw LayoutError("feature ranges overlap");
}

SsaLayout default_ssa_layout(std::size_t xsave_bytes, std::size_t misc_bytes) {
  if (xsave_bytes < 2048 || xsave_bytes > 3072)
    throw LayoutError("XSAVE size " + std::to_string(xsave_bytes) +
                      " out of range [2048, 3072]");
  if (misc_bytes < 512 || misc_bytes > 1024)
    throw LayoutError("MISC size " + std::to_string(misc_bytes) +
                      " out of range [512, 1024]");
  SsaLayout l;
  std::size_t at = 0;
  auto add = [&](RegionName n, std::size_t size) {
    l.regions.push_back({n, {at, size}});
    at += size;
  };
  add(RegionName::kXsave, xsave_bytes);
  add(RegionName::kMisc, misc_bytes);
  add(RegionName::kGprsgx, SsaLayout::kGprsgxSize);
  const std::size_t total = (at + 4095) / 4096 * 4096;
  add(RegionName::kPad, total - at);
  l.total_size = total;

  // x87/XMM block, YMM-high block, AVX-512 block, opmask block. MISC is
  // treated as spill space for the AVX-512 image so that every byte of
  // XSAVE+MISC is rewritten on an exit.
  const std::size_t opmask_at = xsave_bytes - 64;
  l.feature_ranges[FeatureClass::kFpMmx] = {{0, 128}};
  l.feature_ranges[FeatureClass::kXmm] = {{128, 256}};
  l.feature_ranges[FeatureClass::kYmmHigh] = {{384, 256}};
  l.feature_ranges[FeatureClass::kZmm] = {{640, opmask_at - 640},
                                          {xsave_bytes, misc_bytes}};
  l.feature_ranges[FeatureClass::kOpmask] = {{opmask_at, 64}};
  l.validate();
  return l;
}

std::vector<ByteRange> FeatureSet::used_ranges(const SsaLayout& layout) const {
  std::vector<ByteRange> out;
  for (auto c : used) {
    auto it = layout.feature_ranges.find(c);
    if (it == layout.feature_ranges.end()) continue;
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

FeatureSet scan_used_features(const Program& p) {
  FeatureSet fs;
  auto mark = [&](const Register& r) {
    switch (r.cls) {
      case RegClass::kXmm: fs.used.insert(FeatureClass::kXmm); break;
      case RegClass::kYmm:
        fs.used.insert(FeatureClass::kXmm);
        fs.used.insert(FeatureClass::kYmmHigh);
        break;
      case RegClass::kZmm:
        if (r.index < 16) {
          fs.used.insert(FeatureClass::kXmm);
          fs.used.insert(FeatureClass::kYmmHigh);
        }
        fs.used.insert(FeatureClass::kZmm);
        break;
      case RegClass::kMmx: fs.used.insert(FeatureClass::kFpMmx); break;
      case RegClass::kOpmask: fs.used.insert(FeatureClass::kOpmask); break;
      default: break;
    }
  };
  for (const auto& f : p.functions)
    for (const auto& b : f.blocks)
      for (const auto& in : b.items)
        for (const auto& op : in.operands)
          if (const auto* r = std::get_if<Register>(&op)) mark(*r);
  return fs;
}

SecondStackPlan plan_second_stack(const SsaLayout& layout, const FeatureSet& feats,
                                  AddressingMode mode, std::optional<int> o_req) {
  layout.validate();
  SecondStackPlan plan;
  plan.mode = mode;
  plan.xsave_bytes = layout.xsave_size();
  plan.misc_bytes = layout.misc_size();

  // Eligible bytes: written on every exit (some class owns them) and not
  // holding any state the program itself uses.
  const std::size_t ext = layout.xsave_size() + layout.misc_size();
  std::vector<bool> eligible(ext, false);
  for (const auto& [cls, ranges] : layout.feature_ranges) {
    if (feats.uses(cls)) continue;
    for (const auto& r : ranges)
      for (std::size_t i = r.offset; i < r.end(); ++i) eligible[i] = true;
  }
  // Largest 8-byte-aligned contiguous run.
  std::size_t best_at = 0, best_len = 0;
  for (std::size_t i = 0; i < ext;) {
    if (!eligible[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < ext && eligible[j]) ++j;
    const std::size_t start = (i + 7) / 8 * 8;
    const std::size_t len = j > start ? (j - start) / 8 * 8 : 0;
    if (len > best_len) {
      best_at = start;
      best_len = len;
    }
    i = j;
  }

  if (best_len >= 8) {
    plan.s = best_at;
    plan.N = best_len;
    plan.o = 0;
    plan.fallback_mode = false;
    return plan;
  }

  // Every feature is in use: fall back to GPRSGX with an o-bit offset.
  const int u = mode.u(), v = mode.v();
  int o = o_req.value_or(16);
  o = std::clamp(o, u, v);
  o = (o + 7) / 8 * 8;
  if (o > v) o -= 8;
  plan.fallback_mode = true;
  plan.o = o;
  const auto& g = layout.region(RegionName::kGprsgx).range;
  plan.s = g.offset;
  const std::size_t shift = plan.slot_shift();
  if (g.size < shift + 8) throw LayoutError("SSA too small to host an 8-byte slot");
  plan.N = g.size - shift;
  return plan;
}

FrameSize frame_size(const FrameSizeInputs& in) {
  if (in.P < 1) throw LayoutError("call depth bound P must be >= 1");
  if (in.N == 0) throw LayoutError("second stack has no capacity");
  const std::size_t per_frame_slots = in.N / (8 * in.P);
  if (per_frame_slots == 0)
    throw LayoutError("second stack of " + std::to_string(in.N) +
                      " bytes cannot hold one slot per frame at call depth " +
                      std::to_string(in.P));
  FrameSize fs;
  fs.bytes = 8 * std::min(in.M + 1, per_frame_slots);
  fs.stored_generic_count = std::min(in.M, per_frame_slots - 1);
  return fs;
}

std::string plan_to_json(const SecondStackPlan& plan) {
  nlohmann::ordered_json j;
  j["s"] = plan.s;
  j["N"] = plan.N;
  j["o"] = plan.o;
  j["mode"] = plan.mode.to_string();
  j["reserved_register"] = plan.reserved_register.name();
  j["fallback_mode"] = plan.fallback_mode;
  j["P"] = plan.P;
  j["xsave_bytes"] = plan.xsave_bytes;
  j["misc_bytes"] = plan.misc_bytes;
  nlohmann::ordered_json frames = nlohmann::ordered_json::object();
  for (const auto& [f, b] : plan.frame_bytes) frames[f] = b;
  j["frame_bytes"] = frames;
  return j.dump(2);
}

SecondStackPlan plan_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LayoutError(std::string("bad plan file: ") + e.what());
  }
  SecondStackPlan p;
  try {
    p.s = j.at("s").get<std::size_t>();
    p.N = j.at("N").get<std::size_t>();
    p.o = j.at("o").get<int>();
    p.mode = AddressingMode::from_string(j.at("mode").get<std::string>());
    auto r = parse_register(j.at("reserved_register").get<std::string>());
    if (!r || r->cls != RegClass::kGpr64) throw LayoutError("bad reserved register");
    p.reserved_register = *r;
    p.fallback_mode = j.value("fallback_mode", false);
    p.P = j.value("P", std::size_t{64});
    p.xsave_bytes = j.value("xsave_bytes", std::size_t{2048});
    p.misc_bytes = j.value("misc_bytes", std::size_t{512});
    if (j.contains("frame_bytes"))
      for (auto& [k, v] : j["frame_bytes"].items()) p.frame_bytes[k] = v.get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LayoutError(std::string("bad plan file: ") + e.what());
  }
  return p;
}

std::uint64_t plan_hash(const SecondStackPlan& plan) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : plan_to_json(plan)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace qshield
