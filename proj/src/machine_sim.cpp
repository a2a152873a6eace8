#include "qshield/machine_sim.hpp"

#include <algorithm>
#include <cstring>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>

namespace qshield {
namespace {

struct Fault {
  CrashReason reason;
  std::uint64_t address;
};

std::uint64_t width_mask(int w) {
  return w >= 8 ? ~0ULL : (1ULL << (8 * w)) - 1;
}

std::uint64_t sign_bit(int w) { return 1ULL << (8 * std::min(w, 8) - 1); }

std::int64_t sign_extend(std::uint64_t v, int w) {
  if (w >= 8) return static_cast<std::int64_t>(v);
  const int sh = 64 - 8 * w;
  return static_cast<std::int64_t>(v << sh) >> sh;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string start_routine(const InstrumentationConfig& cfg, const std::string& entry) {
  std::ostringstream s;
  s << "\t.text\n" << LinkedProgram::kStartSymbol << ":\n";
  const bool qs = cfg.is_second_stack();
  const std::string r14 = "%" + cfg.reserved_register.name();
  if (qs) s << "\taddq\t$8, " << r14 << "\t;injected\n";
  s << "\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n";
  if (qs) s << "\tmovq\t%rbp, (" << r14 << ")\t;injected\n";
  s << "\tsubq\t$16, %rsp\n\tcallq\t" << entry << "\n";
  if (qs) s << "\tmovq\t(" << r14 << "), %rbp\t;injected\n";
  if (cfg.mode == Mode::kVarys) {
    s << "\tmovq\t" << kSentinelSymbol << "(%rip), %r11\t;injected\n"
      << "\tcmpq\t" << kSentinelInitSymbol << "(%rip), %r11\t;injected\n"
      << "\tjne\t" << kAbortStub << "\t;injected\n";
  }
  // The caller touches its frame after main returns, as libc would.
  s << "\tmovq\t%rax, -8(%rbp)\n\tmovq\t-8(%rbp), %rax\n"
    << "\taddq\t$16, %rsp\n\tpopq\t%rbp\n";
  if (qs) s << "\tsubq\t$8, " << r14 << "\t;injected\n";
  s << "\tretq\n";
  return s.str();
}

bool is_reserved(const Register& r, const InstrumentationConfig& cfg) {
  return r.is_gpr() && r.index == cfg.reserved_register.index;
}

}  // namespace

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::kRunning: return "running";
    case Outcome::kCleanExit: return "clean_exit";
    case Outcome::kCrash: return "crash";
  }
  return "?";
}

std::string to_string(CrashReason r) {
  switch (r) {
    case CrashReason::kNonCanonicalAccess: return "non_canonical_access";
    case CrashReason::kUnmappedAccess: return "unmapped_access";
    case CrashReason::kVarysAbort: return "varys_abort";
    case CrashReason::kDepthOverflow: return "depth_overflow";
  }
  return "?";
}

std::uint64_t Flags::to_rflags() const {
  return (cf ? 1ULL : 0) | 2ULL | (zf ? 1ULL << 6 : 0) | (sf ? 1ULL << 7 : 0) |
         (of ? 1ULL << 11 : 0);
}

Flags Flags::from_rflags(std::uint64_t v) {
  return {(v >> 6 & 1) != 0, (v >> 7 & 1) != 0, (v & 1) != 0, (v >> 11 & 1) != 0};
}

ExtendedLanes::ExtendedLanes() {
  for (auto c : kAllFeatureClasses) of(c).assign(feature_image_bytes(c) / 8, 0);
}

std::uint64_t& ExtendedLanes::lane(const Register& r, std::size_t i) {
  switch (r.cls) {
    case RegClass::kMmx: return of(FeatureClass::kFpMmx).at(2 * r.index + i);
    case RegClass::kOpmask: return of(FeatureClass::kOpmask).at(r.index + i);
    case RegClass::kXmm:
    case RegClass::kYmm:
    case RegClass::kZmm:
      if (i >= 8) break;
      if (r.index >= 16) return of(FeatureClass::kZmm).at(64 + 8 * (r.index - 16) + i);
      if (i < 2) return of(FeatureClass::kXmm).at(2 * r.index + i);
      if (i < 4) return of(FeatureClass::kYmmHigh).at(2 * r.index + i - 2);
      return of(FeatureClass::kZmm).at(4 * r.index + i - 4);
    default: break;
  }
  throw SimError("no lane " + std::to_string(i) + " in %" + r.name());
}

std::uint64_t ExtendedLanes::lane(const Register& r, std::size_t i) const {
  return const_cast<ExtendedLanes*>(this)->lane(r, i);
}

MemoryRegion& MachineState::region(const std::string& name) {
  for (auto& r : memory)
    if (r.name == name) return r;
  throw SimError("no memory region '" + name + "'");
}

const MemoryRegion& MachineState::region(const std::string& name) const {
  return const_cast<MachineState*>(this)->region(name);
}

std::uint64_t MachineState::read_u64(std::uint64_t addr) const {
  for (const auto& r : memory)
    if (r.contains(addr, 8)) {
      std::uint64_t v;
      std::memcpy(&v, &r.bytes[addr - r.base], 8);
      return v;
    }
  throw SimError("read of unmapped address");
}

void MachineState::write_u64(std::uint64_t addr, std::uint64_t v) {
  for (auto& r : memory)
    if (r.contains(addr, 8)) {
      std::memcpy(&r.bytes[addr - r.base], &v, 8);
      return;
    }
  throw SimError("write to unmapped address");
}

std::uint64_t MachineState::reserved_register_value() const {
  return gpr[image->cfg.reserved_register.index];
}

LinkedProgram link_program(const Program& p, const SecondStackPlan& plan,
                           const InstrumentationConfig& cfg, const SsaLayout& layout) {
  if (p.functions.empty()) throw SimError("program has no functions");
  const std::string entry = p.entry.empty() ? p.functions.front().name : p.entry;
  if (!p.find(entry)) throw SimError("entry function '" + entry + "' not found");
  if (cfg.mode == Mode::kVarys && !p.find(kAbortStub))
    throw SimError("baseline mode needs an instrumented program (no abort stub)");

  if (cfg.is_second_stack()) {
    for (const auto& f : p.functions) {
      if (!plan.frame_bytes.count(f.name))
        throw SimError("plan has no frame size for function '" + f.name + "'");
      for (const auto& b : f.blocks)
        for (const auto& in : b.items)
          if (!in.is_directive() && in.provenance == Provenance::kOriginal &&
              in.mentions_register(cfg.reserved_register.index))
            throw SimError("reserved register %" + cfg.reserved_register.name() +
                           " is used by original code in " + f.name);
    }
    if (!(plan.mode == cfg.addressing))
      throw SimError("plan addressing mode differs from configuration");
    if (plan.stack_range().end() > layout.total_size)
      throw SimError("second stack extends past the SSA frame");
  }

  LinkedProgram img;
  img.program = parse_program(emit_asm(p) + start_routine(cfg, entry));
  img.program.entry = LinkedProgram::kStartSymbol;
  img.plan = plan;
  img.cfg = cfg;
  img.layout = layout;
  img.features = scan_used_features(p);
  img.data = data_objects(img.program);

  std::vector<std::map<std::string, std::size_t>> labels(img.program.functions.size());
  std::uint32_t block_id = 0;
  for (std::uint32_t fi = 0; fi < img.program.functions.size(); ++fi) {
    const auto& f = img.program.functions[fi];
    img.function_entry[f.name] = img.code.size();
    const bool runtime = f.name == LinkedProgram::kStartSymbol;
    for (const auto& b : f.blocks) {
      if (!b.label.empty()) labels[fi][b.label] = img.code.size();
      bool first = true;
      for (const auto& in : b.items) {
        if (in.is_directive()) continue;
        LinkedProgram::Decoded d;
        d.in = &in;
        d.function = fi;
        d.block = block_id;
        d.block_start = first;
        d.runtime = runtime;
        img.code.push_back(d);
        first = false;
      }
      ++block_id;
    }
  }

  std::map<std::string, bool> symbols;
  for (const auto& o : img.data) symbols[o.name] = true;
  for (const auto& f : img.program.functions) symbols[f.name] = true;
  symbols[kSentinelSymbol] = true;
  for (const auto& o : img.data)
    for (const auto& r : o.relocs)
      if (!symbols.count(r.symbol)) throw SimError("undefined symbol '" + r.symbol + "'");

  for (auto& d : img.code) {
    const auto& in = *d.in;
    if (const MemOperand* m = in.memory_operand(); m && !m->symbol.empty() &&
                                                   !symbols.count(m->symbol))
      throw SimError("undefined symbol '" + m->symbol + "' at line " +
                     std::to_string(in.source_line));
    if (in.op != Op::kJmp && in.op != Op::kJcc && in.op != Op::kCall) continue;
    const auto& target = std::get<LabelRef>(in.operands[0]).name;
    if (in.op != Op::kCall) {
      if (auto it = labels[d.function].find(target); it != labels[d.function].end()) {
        d.target = it->second;
        continue;
      }
    }
    auto it = img.function_entry.find(target);
    if (it == img.function_entry.end()) throw SimError("unresolved target '" + target + "'");
    d.target = it->second;
  }
  img.start = img.function_entry.at(LinkedProgram::kStartSymbol);
  return img;
}

MachineState load(const LinkedProgram& image, std::size_t stack_bytes, std::uint64_t seed) {
  if (stack_bytes < 4096 || stack_bytes % 8) throw SimError("bad stack size");
  MachineState st;
  st.image = &image;
  std::mt19937_64 rng(seed);
  // Region r lives in its own 1 TiB slab; page-aligned, canonical in both modes.
  auto base_for = [&](int r) {
    return (static_cast<std::uint64_t>(r + 1) << 40) + (rng() % (1ULL << 26)) * 4096;
  };

  MemoryRegion stack{"stack", base_for(0), std::vector<std::uint8_t>(stack_bytes, 0)};

  MemoryRegion data{"data", base_for(1), {}};
  std::vector<std::uint64_t> offsets;
  std::size_t at = 0;
  for (const auto& o : image.data) {
    const std::size_t a = std::max<std::size_t>(o.alignment, 1);
    at = (at + a - 1) / a * a;
    offsets.push_back(at);
    at += o.bytes.size();
  }
  data.bytes.assign(std::max<std::size_t>((at + 4095) / 4096 * 4096, 4096), 0);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    std::copy(image.data[i].bytes.begin(), image.data[i].bytes.end(),
              data.bytes.begin() + static_cast<std::ptrdiff_t>(offsets[i]));
    st.symbols[image.data[i].name] = data.base + offsets[i];
  }

  MemoryRegion ssa{"ssa", base_for(2), std::vector<std::uint8_t>(image.layout.total_size, 0)};
  st.ssa_base = ssa.base;
  for (const auto& [name, idx] : image.function_entry)
    st.symbols[name] = LinkedProgram::code_address(idx);
  st.symbols[kSentinelSymbol] = ssa.base + image.layout.gprsgx_offset();

  st.memory.push_back(std::move(stack));
  st.memory.push_back(std::move(data));
  st.memory.push_back(std::move(ssa));

  for (std::size_t i = 0; i < image.data.size(); ++i)
    for (const auto& r : image.data[i].relocs)
      st.write_u64(st.symbols.at(image.data[i].name) + r.offset,
                   st.symbols.at(r.symbol) + static_cast<std::uint64_t>(r.addend));

  const auto& stk = st.region("stack");
  st.gpr[reg::kRsp] = stk.base + stk.bytes.size() - 8;
  st.write_u64(st.gpr[reg::kRsp], LinkedProgram::kExitAddress);

  const auto& cfg = image.cfg;
  if (cfg.is_second_stack()) {
    st.gpr[cfg.reserved_register.index] = st.ssa_base + image.plan.stack_start();
    for (auto c : kAllFeatureClasses)
      if (!image.features.uses(c)) std::fill(st.ext.of(c).begin(), st.ext.of(c).end(), kPrimeValue);
  }
  if (cfg.mode == Mode::kVarys) st.write_u64(st.symbols.at(kSentinelSymbol), kSentinelValue);
  st.rip = image.start;
  return st;
}

MachineState load(const Program& p, const SecondStackPlan& plan, const InstrumentationConfig& cfg,
                  std::size_t stack_bytes, std::uint64_t seed) {
  auto image = std::make_shared<const LinkedProgram>(link_program(p, plan, cfg));
  MachineState st = load(*image, stack_bytes, seed);
  st.owned_image = std::move(image);
  return st;
}

namespace {

class Exec {
 public:
  Exec(MachineState& st, const LinkedProgram::Decoded& d) : st_(st), d_(d), in_(*d.in) {}

  // Returns kRunning or kCleanExit; crashes are thrown as Fault.
  Outcome run() {
    next_ = st_.rip + 1;
    const int w = in_.width;
    const auto& ops = in_.operands;
    auto& f = st_.flags;
    switch (in_.op) {
      case Op::kMov:
        write(ops[1], w, read(ops[0], w));
        break;
      case Op::kMovabs:
        write(ops[1], 8, static_cast<std::uint64_t>(std::get<Immediate>(ops[0]).value));
        break;
      case Op::kMovsx:
        write(ops[1], 8, static_cast<std::uint64_t>(sign_extend(read(ops[0], 4), 4)));
        break;
      case Op::kMovzx:
        write(ops[1], w, read(ops[0], 1));
        break;
      case Op::kLea:
        write(ops[1], w, address(std::get<MemOperand>(ops[0])) & width_mask(w));
        break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kCmp: {
        const std::uint64_t s = read(ops[0], w), a = read(ops[1], w), m = width_mask(w);
        const bool add = in_.op == Op::kAdd;
        const std::uint64_t r = (add ? a + s : a - s) & m;
        f.cf = add ? r < a : a < s;
        f.of = add ? ((a ^ r) & (s ^ r) & sign_bit(w)) != 0
                   : ((a ^ s) & (a ^ r) & sign_bit(w)) != 0;
        set_zs(r, w);
        if (in_.op != Op::kCmp) {
          if (add && in_.provenance == Provenance::kInjected && is_reserved_dst(ops[1]))
            check_depth(r);
          write(ops[1], w, r);
        }
        break;
      }
      case Op::kAnd:
      case Op::kOr:
      case Op::kXor:
      case Op::kTest: {
        const std::uint64_t s = read(ops[0], w), a = read(ops[1], w);
        const std::uint64_t r = in_.op == Op::kOr ? (a | s) : in_.op == Op::kXor ? (a ^ s) : (a & s);
        f.cf = f.of = false;
        set_zs(r, w);
        if (in_.op != Op::kTest) write(ops[1], w, r);
        break;
      }
      case Op::kImul: {
        const Operand& dst = ops.back();
        const std::int64_t x = sign_extend(read(ops.size() == 3 ? ops[1] : ops[0], w), w);
        const std::int64_t y = ops.size() == 3 ? std::get<Immediate>(ops[0]).value
                                               : sign_extend(read(dst, w), w);
        const __int128 full = static_cast<__int128>(x) * y;
        const std::uint64_t r = static_cast<std::uint64_t>(full) & width_mask(w);
        f.cf = f.of = static_cast<__int128>(sign_extend(r, w)) != full;
        set_zs(r, w);
        write(dst, w, r);
        break;
      }
      case Op::kShl:
      case Op::kShr:
      case Op::kSar: {
        const Operand& dst = ops.back();
        std::uint64_t c = ops.size() == 1 ? 1 : read(ops[0], 1);
        c &= w == 8 ? 63 : 31;
        if (c == 0) break;
        const std::uint64_t a = read(dst, w), m = width_mask(w);
        const unsigned bits = 8 * static_cast<unsigned>(w);
        std::uint64_t r;
        if (in_.op == Op::kShl) {
          r = c >= bits ? 0 : (a << c) & m;
          f.cf = c <= bits && ((a >> (bits - c)) & 1);
          f.of = ((r & sign_bit(w)) != 0) != f.cf;
        } else if (in_.op == Op::kShr) {
          r = c >= bits ? 0 : a >> c;
          f.cf = (a >> (c - 1)) & 1;
          f.of = (a & sign_bit(w)) != 0;
        } else {
          const std::int64_t sa = sign_extend(a, w);
          r = static_cast<std::uint64_t>(sa >> std::min<std::uint64_t>(c, 63)) & m;
          f.cf = (static_cast<std::uint64_t>(sa >> std::min<std::uint64_t>(c - 1, 63))) & 1;
          f.of = false;
        }
        set_zs(r, w);
        write(dst, w, r);
        break;
      }
      case Op::kPush: {
        const std::uint64_t v = read(ops[0], 8);
        push(v);
        break;
      }
      case Op::kPop: {
        const std::uint64_t v = load(st_.gpr[reg::kRsp], 8);
        st_.gpr[reg::kRsp] += 8;
        write(ops[0], 8, v);
        break;
      }
      case Op::kCall:
        push(LinkedProgram::code_address(st_.rip + 1));
        next_ = d_.target;
        break;
      case Op::kRet: {
        const std::uint64_t ra = load(st_.gpr[reg::kRsp], 8);
        st_.gpr[reg::kRsp] += 8;
        if (ra == LinkedProgram::kExitAddress) return Outcome::kCleanExit;
        next_ = code_index(ra);
        break;
      }
      case Op::kJmp:
        next_ = d_.target;
        break;
      case Op::kJcc:
        if (condition(in_.cond)) next_ = d_.target;
        break;
      case Op::kNop:
        break;
      case Op::kUd2:
        throw Fault{CrashReason::kVarysAbort, 0};
      case Op::kVecMov:
        write_lanes(ops[1], w, read_lanes(ops[0], w));
        break;
      case Op::kVecXor: {
        const auto a = read_lanes(ops[0], w);
        const auto b = read_lanes(ops[1], w);
        std::array<std::uint64_t, 8> r{};
        for (int i = 0; i < 8; ++i) r[i] = a[i] ^ b[i];
        write_lanes(ops.back(), w, r);
        break;
      }
    }
    return Outcome::kRunning;
  }

  std::size_t next() const { return next_; }

 private:
  MachineState& st_;
  const LinkedProgram::Decoded& d_;
  const Instruction& in_;
  std::size_t next_ = 0;

  AddressingMode mode() const { return st_.image->cfg.addressing; }

  std::uint64_t address(const MemOperand& m) const {
    std::uint64_t a = 0;
    if (m.rip_relative()) {
      a = m.symbol.empty() ? LinkedProgram::code_address(st_.rip + 1) : st_.symbols.at(m.symbol);
    } else if (m.base) {
      a = st_.gpr[m.base->index];
    }
    if (m.index) a += st_.gpr[m.index->index] * m.scale;
    return a + static_cast<std::uint64_t>(static_cast<std::int64_t>(m.displacement));
  }

  std::uint8_t* access(std::uint64_t addr, std::size_t n) {
    if (!is_canonical(addr, mode())) throw Fault{CrashReason::kNonCanonicalAccess, addr};
    for (auto& r : st_.memory)
      if (r.contains(addr, n)) return &r.bytes[addr - r.base];
    throw Fault{CrashReason::kUnmappedAccess, addr};
  }

  std::uint64_t load(std::uint64_t addr, int w) {
    std::uint64_t v = 0;
    std::memcpy(&v, access(addr, static_cast<std::size_t>(w)), static_cast<std::size_t>(w));
    return v;
  }

  void store(std::uint64_t addr, int w, std::uint64_t v) {
    std::memcpy(access(addr, static_cast<std::size_t>(w)), &v, static_cast<std::size_t>(w));
  }

  void push(std::uint64_t v) {
    const std::uint64_t sp = st_.gpr[reg::kRsp] - 8;
    store(sp, 8, v);
    st_.gpr[reg::kRsp] = sp;
  }

  std::uint64_t read_reg(const Register& r) const {
    const std::uint64_t v = st_.gpr[r.index];
    return v & width_mask(r.width());
  }

  void write_reg(const Register& r, std::uint64_t v) {
    auto& g = st_.gpr[r.index];
    switch (r.cls) {
      case RegClass::kGpr64: g = v; break;
      case RegClass::kGpr32: g = v & 0xffffffffULL; break;
      case RegClass::kGpr16: g = (g & ~0xffffULL) | (v & 0xffff); break;
      case RegClass::kGpr8: g = (g & ~0xffULL) | (v & 0xff); break;
      default: throw SimError("not a general-purpose register: %" + r.name());
    }
  }

  std::uint64_t read(const Operand& op, int w) {
    if (const auto* r = std::get_if<Register>(&op)) {
      if (!r->is_gpr()) throw SimError("unexpected register %" + r->name());
      return read_reg(*r) & width_mask(w);
    }
    if (const auto* i = std::get_if<Immediate>(&op))
      return static_cast<std::uint64_t>(i->value) & width_mask(w);
    if (const auto* m = std::get_if<MemOperand>(&op)) return load(address(*m), w);
    throw SimError("label used as a value");
  }

  void write(const Operand& op, int w, std::uint64_t v) {
    if (const auto* r = std::get_if<Register>(&op)) return write_reg(*r, v);
    if (const auto* m = std::get_if<MemOperand>(&op)) return store(address(*m), w, v);
    throw SimError("bad destination operand");
  }

  std::array<std::uint64_t, 8> read_lanes(const Operand& op, int w) {
    std::array<std::uint64_t, 8> v{};
    const int n = std::max(1, w / 8);
    if (const auto* r = std::get_if<Register>(&op)) {
      if (r->is_gpr()) v[0] = read_reg(*r);
      else
        for (int i = 0; i < n; ++i) v[i] = st_.ext.lane(*r, static_cast<std::size_t>(i));
    } else if (const auto* m = std::get_if<MemOperand>(&op)) {
      const std::uint64_t a = address(*m);
      std::memcpy(v.data(), access(a, static_cast<std::size_t>(8 * n)), static_cast<std::size_t>(8 * n));
    }
    return v;
  }

  void write_lanes(const Operand& op, int w, const std::array<std::uint64_t, 8>& v) {
    const int n = std::max(1, w / 8);
    if (const auto* r = std::get_if<Register>(&op)) {
      if (r->is_gpr()) write_reg(*r, v[0]);
      else
        for (int i = 0; i < n; ++i) st_.ext.lane(*r, static_cast<std::size_t>(i)) = v[i];
    } else if (const auto* m = std::get_if<MemOperand>(&op)) {
      const std::uint64_t a = address(*m);
      std::memcpy(access(a, static_cast<std::size_t>(8 * n)), v.data(), static_cast<std::size_t>(8 * n));
    }
  }

  void set_zs(std::uint64_t r, int w) {
    st_.flags.zf = r == 0;
    st_.flags.sf = (r & sign_bit(w)) != 0;
  }

  bool condition(Cond c) const {
    const auto& f = st_.flags;
    switch (c) {
      case Cond::kE: return f.zf;
      case Cond::kNe: return !f.zf;
      case Cond::kL: return f.sf != f.of;
      case Cond::kLe: return f.zf || f.sf != f.of;
      case Cond::kG: return !f.zf && f.sf == f.of;
      case Cond::kGe: return f.sf == f.of;
      case Cond::kB: return f.cf;
      case Cond::kBe: return f.cf || f.zf;
      case Cond::kA: return !f.cf && !f.zf;
      case Cond::kAe: return !f.cf;
      case Cond::kS: return f.sf;
      case Cond::kNs: return !f.sf;
      case Cond::kNone: break;
    }
    return true;
  }

  std::size_t code_index(std::uint64_t addr) const {
    if (!is_canonical(addr, st_.image->cfg.addressing))
      throw Fault{CrashReason::kNonCanonicalAccess, addr};
    const auto& code = st_.image->code;
    if (addr < LinkedProgram::kTextBase || (addr - LinkedProgram::kTextBase) % 16 ||
        (addr - LinkedProgram::kTextBase) / 16 >= code.size())
      throw Fault{CrashReason::kUnmappedAccess, addr};
    return (addr - LinkedProgram::kTextBase) / 16;
  }

  bool is_reserved_dst(const Operand& op) const {
    const auto* r = std::get_if<Register>(&op);
    return r && st_.image->cfg.is_second_stack() && is_reserved(*r, st_.image->cfg);
  }

  // A frame slot at the new top must still lie inside the second stack.
  void check_depth(std::uint64_t r14) const {
    const auto& plan = st_.image->plan;
    const std::uint64_t end = st_.ssa_base + plan.stack_start() + plan.N;
    if (r14 + 8 > end) throw Fault{CrashReason::kDepthOverflow, r14};
  }
};

}  // namespace

StepOutcome step(MachineState& st) {
  if (!st.image) throw SimError("machine not loaded");
  const auto& code = st.image->code;
  if (st.rip >= code.size()) throw SimError("execution ran off the end of the text");
  const auto& d = code[st.rip];

  if (d.block_start && st.aex_count > 0) {
    if (!st.successor_entered) {
      st.successor_entered = true;
    } else {
      st.in_later_block = true;
    }
  }

  StepOutcome out;
  out.site = LinkedProgram::code_address(st.rip);
  Exec ex(st, d);
  try {
    out.outcome = ex.run();
  } catch (const Fault& f) {
    out.outcome = Outcome::kCrash;
    out.reason = f.reason;
    out.address = f.address;
    return out;
  }
  ++st.retired;
  if (!d.runtime) ++st.program_retired;
  if (st.in_later_block && d.in->provenance == Provenance::kOriginal)
    st.entered_block_after_attacked = true;
  if (out.outcome == Outcome::kRunning) st.rip = ex.next();
  return out;
}

void deliver_aex(MachineState& st) {
  if (!st.image) throw SimError("machine not loaded");
  const auto& layout = st.image->layout;
  auto& ssa = st.region("ssa").bytes;
  std::uint8_t* g = ssa.data() + layout.gprsgx_offset();

  std::array<std::uint64_t, 22> words{};
  for (int i = 0; i < 16; ++i) words[i] = st.gpr[i];
  words[static_cast<int>(GprsgxField::kRflags)] = st.flags.to_rflags();
  words[static_cast<int>(GprsgxField::kRip)] = LinkedProgram::code_address(st.rip);
  std::memcpy(g, words.data(), sizeof(words));

  for (auto c : kAllFeatureClasses) {
    const auto& lanes = st.ext.of(c);
    const auto* image = reinterpret_cast<const std::uint8_t*>(lanes.data());
    const std::size_t n = lanes.size() * 8;
    std::size_t k = 0;
    for (const auto& r : layout.feature_ranges.at(c))
      for (std::size_t i = r.offset; i < r.end(); ++i, ++k) ssa[i] = image[k % n];
  }

  // ERESUME: reload everything from the frame just written.
  std::memcpy(words.data(), g, sizeof(words));
  for (int i = 0; i < 16; ++i) st.gpr[i] = words[i];
  st.flags = Flags::from_rflags(words[static_cast<int>(GprsgxField::kRflags)]);
  st.rip = (words[static_cast<int>(GprsgxField::kRip)] - LinkedProgram::kTextBase) / 16;
  for (auto c : kAllFeatureClasses) {
    auto& lanes = st.ext.of(c);
    auto* image = reinterpret_cast<std::uint8_t*>(lanes.data());
    const std::size_t n = lanes.size() * 8;
    std::size_t k = 0;
    for (const auto& r : layout.feature_ranges.at(c))
      for (std::size_t i = r.offset; i < r.end() && k < n; ++i, ++k) image[k] = ssa[i];
  }
  ++st.aex_count;
}

namespace {

void trace_line(std::ostream* os, std::uint64_t retired, std::size_t rip, const char* event) {
  if (!os) return;
  *os << retired << " 0x" << std::hex << LinkedProgram::code_address(rip) << std::dec << " "
      << event << "\n";
}

}  // namespace

TrialResult run_trial(const LinkedProgram& image, const AttackSchedule& sched,
                      std::uint64_t seed, const TrialOptions& opts) {
  if (sched.interval < 1) throw SimError("attack interval must be >= 1");
  std::optional<std::uint64_t> first = sched.first_aex_at;
  if (sched.random_start) {
    auto window = opts.window;
    if (!window) {
      TrialOptions pre = opts;
      pre.trace = nullptr;
      const auto benign = run_trial(image, AttackSchedule::none(), seed, pre);
      window = {benign.window_begin, benign.window_end};
    }
    if (window->second <= window->first) throw SimError("empty attack window");
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    first = window->first + rng() % (window->second - window->first);
  }

  MachineState st = load(image, opts.stack_bytes, seed);
  TrialResult res;
  bool window_open = false;
  std::optional<std::uint64_t> last_aex_at;
  while (true) {
    if (st.retired >= opts.budget)
      throw BudgetExceeded("instruction budget of " + std::to_string(opts.budget) +
                           " exceeded");
    if (first && st.aex_count < sched.max_aex && st.retired >= *first &&
        (st.retired - *first) % sched.interval == 0 && last_aex_at != st.retired) {
      trace_line(opts.trace, st.retired, st.rip, "aex");
      deliver_aex(st);
      last_aex_at = st.retired;
      if (!res.first_aex_at) res.first_aex_at = st.retired;
    }
    const auto& d = image.code[st.rip];
    const std::uint64_t before = st.retired;
    const std::size_t rip = st.rip;
    const auto out = step(st);
    if (out.outcome == Outcome::kCrash) {
      trace_line(opts.trace, before, rip, "crash");
      res.outcome = Outcome::kCrash;
      res.crash_reason = out.reason;
      res.crash_site = out.site;
      res.crash_address = out.address;
      res.crash_instruction = d.in->text();
      res.aex_before_crash = st.aex_count;
      break;
    }
    trace_line(opts.trace, before, rip, "exec");
    if (st.aex_count > 0) ++res.instructions_after_first_aex;
    if (!d.runtime) {
      if (!window_open) {
        res.window_begin = before;
        window_open = true;
      }
      res.window_end = st.retired;
    }
    if (out.outcome == Outcome::kCleanExit) {
      res.outcome = Outcome::kCleanExit;
      res.exit_value = st.gpr[reg::kRax];
      break;
    }
  }
  res.aex_count = st.aex_count;
  res.entered_block_after_attacked = st.entered_block_after_attacked;
  res.retired = st.retired;
  res.program_retired = st.program_retired;
  res.data_hash = fnv1a(st.region("data").bytes);
  return res;
}

TrialResult run_trial(const Program& p, const SecondStackPlan& plan,
                      const InstrumentationConfig& cfg, const AttackSchedule& sched,
                      std::uint64_t seed, const TrialOptions& opts) {
  const auto image = link_program(p, plan, cfg);
  return run_trial(image, sched, seed, opts);
}

RegModel RegModel::from_string(const std::string& s) {
  if (s == "uniform64") return uniform64();
  if (s == "address_like" || s == "address-like") return address_like();
  for (const char* prefix : {"mixture:", "mixture("}) {
    const std::string pre(prefix);
    if (s.rfind(pre, 0) == 0) {
      std::string num = s.substr(pre.size());
      if (!num.empty() && num.back() == ')') num.pop_back();
      double p;
      try {
        p = std::stod(num);
      } catch (const std::exception&) {
        throw SimError("bad mixture weight in '" + s + "'");
      }
      if (p < 0 || p > 1) throw SimError("mixture weight must be in [0,1]");
      return mixture(p);
    }
  }
  throw SimError("unknown register model '" + s + "'");
}

std::string RegModel::to_string() const {
  switch (kind) {
    case Kind::kUniform64: return "uniform64";
    case Kind::kAddressLike: return "address_like";
    case Kind::kMixture: {
      std::ostringstream s;
      s << "mixture(" << p << ")";
      return s.str();
    }
  }
  return "?";
}

std::uint64_t overlapped_slot(std::uint64_t lo, std::uint64_t hi, int o) {
  const int shift = (8 - (o / 8) % 8) % 8;
  if (shift == 0) return lo;
  return (lo >> (8 * shift)) | (hi << (8 * (8 - shift)));
}

ProbabilityEstimate mc_overwrite_probability(AddressingMode mode, int o, RegModel model,
                                             std::uint64_t samples, std::uint64_t seed) {
  if (samples < 1) throw SimError("samples must be >= 1");
  std::mt19937_64 rng(seed);
  const std::uint64_t low_mask = (1ULL << (mode.v() - 1)) - 1;
  auto draw = [&]() -> std::uint64_t {
    bool addr = model.kind == RegModel::Kind::kAddressLike;
    if (model.kind == RegModel::Kind::kMixture)
      addr = static_cast<double>(rng() >> 11) * 0x1.0p-53 < model.p;
    const std::uint64_t w = rng();
    return addr ? (w & low_mask) : w;
  };
  ProbabilityEstimate e;
  e.samples = samples;
  for (std::uint64_t i = 0; i < samples; ++i) {
    const std::uint64_t lo = draw();
    const std::uint64_t hi = o % 64 ? draw() : lo;
    if (!is_canonical(overlapped_slot(lo, hi, o), mode)) ++e.non_canonical;
  }
  return e;
}

ExactOracle exact_overwrite_oracle(AddressingMode mode) {
  const int bits = mode.u() + 1;
  ExactOracle o;
  o.patterns = 1ULL << bits;
  for (std::uint64_t x = 0; x < o.patterns; ++x)
    if (is_canonical(x << (mode.v() - 1), mode)) ++o.canonical;
  return o;
}

}  // namespace qshield
