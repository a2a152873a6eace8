#include "qshield/asm_ir.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>
#include <unordered_map>

namespace qshield {
namespace {

constexpr std::array<const char*, 16> kGpr64Names = {
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};
constexpr std::array<const char*, 16> kGpr32Names = {
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"};
constexpr std::array<const char*, 16> kGpr16Names = {
    "ax",  "cx",  "dx",   "bx",   "sp",   "bp",   "si",   "di",
    "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w"};
constexpr std::array<const char*, 16> kGpr8Names = {
    "al",  "cl",  "dl",   "bl",   "spl",  "bpl",  "sil",  "dil",
    "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"};

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
    s.remove_suffix(1);
  return s;
}

bool starts_with(std::string_view s, std::string_view p) {
  return s.substr(0, p.size()) == p;
}

bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.' ||
         c == '$';
}
bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' ||
         c == '$';
}
bool is_identifier(std::string_view s) {
  if (s.empty() || !is_ident_start(s[0])) return false;
  return std::all_of(s.begin(), s.end(), is_ident_char);
}

// Parses decimal or 0x-prefixed integers with an optional sign. Values up
// to 2^64-1 are accepted and wrap to the two's complement representation.
std::optional<std::int64_t> parse_integer(std::string_view s) {
  s = trim(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  if (s.empty()) return std::nullopt;
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  std::int64_t r = static_cast<std::int64_t>(v);
  return neg ? -r : r;
}

struct MnemonicInfo {
  Op op;
  Cond cond;
  int width;  // 0 = infer from register operands
};

const std::unordered_map<std::string, MnemonicInfo>& mnemonic_table() {
  static const auto table = [] {
    std::unordered_map<std::string, MnemonicInfo> t;
    const std::pair<const char*, Op> sized[] = {
        {"mov", Op::kMov}, {"add", Op::kAdd},   {"sub", Op::kSub},
        {"and", Op::kAnd}, {"or", Op::kOr},     {"xor", Op::kXor},
        {"cmp", Op::kCmp}, {"test", Op::kTest}, {"shl", Op::kShl},
        {"shr", Op::kShr}, {"sar", Op::kSar},   {"imul", Op::kImul},
    };
    const std::pair<const char*, int> suffixes[] = {
        {"", 0}, {"b", 1}, {"w", 2}, {"l", 4}, {"q", 8}};
    for (auto [base, op] : sized)
      for (auto [suf, w] : suffixes)
        t[std::string(base) + suf] = {op, Cond::kNone, w};
    t["lea"] = {Op::kLea, Cond::kNone, 0};
    t["leal"] = {Op::kLea, Cond::kNone, 4};
    t["leaq"] = {Op::kLea, Cond::kNone, 8};
    t["push"] = t["pushq"] = {Op::kPush, Cond::kNone, 8};
    t["pop"] = t["popq"] = {Op::kPop, Cond::kNone, 8};
    t["movabsq"] = {Op::kMovabs, Cond::kNone, 8};
    t["movslq"] = {Op::kMovsx, Cond::kNone, 8};
    t["movzbl"] = {Op::kMovzx, Cond::kNone, 4};
    t["movzbq"] = {Op::kMovzx, Cond::kNone, 8};
    t["call"] = t["callq"] = {Op::kCall, Cond::kNone, 8};
    t["ret"] = t["retq"] = {Op::kRet, Cond::kNone, 8};
    t["jmp"] = t["jmpq"] = {Op::kJmp, Cond::kNone, 8};
    t["nop"] = {Op::kNop, Cond::kNone, 0};
    t["ud2"] = {Op::kUd2, Cond::kNone, 0};
    const std::pair<const char*, Cond> jcc[] = {
        {"je", Cond::kE},    {"jz", Cond::kE},    {"jne", Cond::kNe},
        {"jnz", Cond::kNe},  {"jl", Cond::kL},    {"jnge", Cond::kL},
        {"jle", Cond::kLe},  {"jng", Cond::kLe},  {"jg", Cond::kG},
        {"jnle", Cond::kG},  {"jge", Cond::kGe},  {"jnl", Cond::kGe},
        {"jb", Cond::kB},    {"jc", Cond::kB},    {"jnae", Cond::kB},
        {"jbe", Cond::kBe},  {"jna", Cond::kBe},  {"ja", Cond::kA},
        {"jnbe", Cond::kA},  {"jae", Cond::kAe},  {"jnb", Cond::kAe},
        {"jnc", Cond::kAe},  {"js", Cond::kS},    {"jns", Cond::kNs},
    };
    for (auto [name, c] : jcc) t[name] = {Op::kJcc, c, 8};
    for (const char* m : {"movaps", "movups", "movdqa", "movdqu"})
      t[m] = {Op::kVecMov, Cond::kNone, 16};
    for (const char* m : {"vmovaps", "vmovups", "vmovdqa", "vmovdqu",
                          "vmovdqa64", "vmovdqu64"})
      t[m] = {Op::kVecMov, Cond::kNone, 0};
    t["kmovq"] = {Op::kVecMov, Cond::kNone, 8};
    t["pxor"] = {Op::kVecXor, Cond::kNone, 16};
    t["vpxor"] = t["vpxorq"] = {Op::kVecXor, Cond::kNone, 0};
    return t;
  }();
  return table;
}

int vector_width(const Register& r) {
  switch (r.cls) {
    case RegClass::kXmm: return 16;
    case RegClass::kYmm: return 32;
    case RegClass::kZmm: return 64;
    case RegClass::kMmx:
    case RegClass::kOpmask: return 8;
    default: return r.width();
  }
}

bool is_ext(const Register& r) {
  return r.is_vector() || r.cls == RegClass::kMmx || r.cls == RegClass::kOpmask;
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ParseError(line, msg);
}

void validate(Instruction& in) {
  const int line = in.source_line;
  auto& ops = in.operands;
  auto is_reg = [&](std::size_t i) {
    return std::holds_alternative<Register>(ops[i]);
  };
  auto is_mem = [&](std::size_t i) {
    return std::holds_alternative<MemOperand>(ops[i]);
  };
  auto is_imm = [&](std::size_t i) {
    return std::holds_alternative<Immediate>(ops[i]);
  };
  auto is_label = [&](std::size_t i) {
    return std::holds_alternative<LabelRef>(ops[i]);
  };
  auto bad = [&](const std::string& why) {
    fail(line, "invalid operands for '" + in.mnemonic + "': " + why);
  };
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (ops.size() < lo || ops.size() > hi)
      bad("expected " + std::to_string(lo) +
          (hi != lo ? "-" + std::to_string(hi) : "") + " operand(s)");
  };
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (is_label(i) && in.op != Op::kCall && in.op != Op::kJmp &&
        in.op != Op::kJcc) {
      fail(line, "bare identifier operand '" + std::get<LabelRef>(ops[i]).name +
                     "' (Intel syntax is not supported)");
    }
    if (is_reg(i) && std::get<Register>(ops[i]).cls == RegClass::kRip)
      bad("%rip is only valid as a memory base");
  }

  // Any vector/mmx/opmask operand turns a plain mov into a lane move.
  if (in.op == Op::kMov) {
    for (std::size_t i = 0; i < ops.size(); ++i)
      if (is_reg(i) && is_ext(std::get<Register>(ops[i]))) {
        in.op = Op::kVecMov;
        in.width = 8;
      }
  }

  auto gpr_width = [&]() {
    int w = 0;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      if (!is_reg(i)) continue;
      const auto& r = std::get<Register>(ops[i]);
      if (!r.is_gpr()) continue;
      if (w == 0) w = r.width();
      else if (w != r.width()) bad("mixed register sizes");
    }
    return w;
  };

  switch (in.op) {
    case Op::kMov:
    case Op::kAdd:
    case Op::kSub:
    case Op::kAnd:
    case Op::kOr:
    case Op::kXor:
    case Op::kCmp:
    case Op::kTest: {
      need(2, 2);
      if (is_imm(1) || is_label(1)) bad("destination must be register or memory");
      if (is_mem(0) && is_mem(1)) bad("two memory operands");
      const int w = gpr_width();
      if (in.width == 0) in.width = w;
      if (in.width == 0) bad("ambiguous operand size");
      if (w != 0 && w != in.width) bad("register size does not match suffix");
      if (is_imm(0) && in.width == 8) {
        auto v = std::get<Immediate>(ops[0]).value;
        if (v < INT32_MIN || v > INT32_MAX)
          bad("immediate does not fit in 32 bits (use movabsq)");
      }
      break;
    }
    case Op::kMovabs:
      need(2, 2);
      if (!is_imm(0) || !is_reg(1) ||
          std::get<Register>(ops[1]).cls != RegClass::kGpr64)
        bad("expected $imm64, %reg64");
      break;
    case Op::kMovsx:
    case Op::kMovzx: {
      need(2, 2);
      if (!is_reg(1) || !std::get<Register>(ops[1]).is_gpr())
        bad("destination must be a general register");
      if (std::get<Register>(ops[1]).width() != in.width)
        bad("destination size does not match suffix");
      if (!(is_reg(0) || is_mem(0))) bad("source must be register or memory");
      break;
    }
    case Op::kLea:
      need(2, 2);
      if (!is_mem(0) || !is_reg(1) || !std::get<Register>(ops[1]).is_gpr())
        bad("expected memory, %reg");
      if (in.width == 0) in.width = std::get<Register>(ops[1]).width();
      break;
    case Op::kImul: {
      need(2, 3);
      if (!is_reg(ops.size() - 1)) bad("destination must be a register");
      if (ops.size() == 3 && !is_imm(0)) bad("three-operand form needs $imm");
      const int w = gpr_width();
      if (in.width == 0) in.width = w;
      if (in.width == 0) bad("ambiguous operand size");
      break;
    }
    case Op::kShl:
    case Op::kShr:
    case Op::kSar: {
      need(1, 2);
      const std::size_t dst = ops.size() - 1;
      if (!(is_reg(dst) || is_mem(dst))) bad("destination must be register or memory");
      if (ops.size() == 2) {
        const bool cl = is_reg(0) && std::get<Register>(ops[0]) ==
                                         Register{RegClass::kGpr8, reg::kRcx};
        if (!is_imm(0) && !cl) bad("shift count must be $imm or %cl");
      }
      if (in.width == 0 && is_reg(dst)) in.width = std::get<Register>(ops[dst]).width();
      if (in.width == 0) bad("ambiguous operand size");
      break;
    }
    case Op::kPush:
      need(1, 1);
      if (is_reg(0) && std::get<Register>(ops[0]).cls != RegClass::kGpr64)
        bad("push needs a 64-bit register");
      break;
    case Op::kPop:
      need(1, 1);
      if (is_imm(0)) bad("cannot pop into an immediate");
      if (is_reg(0) && std::get<Register>(ops[0]).cls != RegClass::kGpr64)
        bad("pop needs a 64-bit register");
      break;
    case Op::kCall:
    case Op::kJmp:
    case Op::kJcc:
      need(1, 1);
      if (!is_label(0)) bad("only direct label targets are supported");
      break;
    case Op::kRet:
    case Op::kNop:
    case Op::kUd2:
      need(0, 0);
      break;
    case Op::kVecMov: {
      need(2, 2);
      if (is_imm(0) || is_imm(1)) bad("immediates not allowed");
      if (is_mem(0) && is_mem(1)) bad("two memory operands");
      int w = 0;
      for (std::size_t i = 0; i < 2; ++i)
        if (is_reg(i) && is_ext(std::get<Register>(ops[i])))
          w = std::max(w, vector_width(std::get<Register>(ops[i])));
      if (w == 0) bad("lane move needs an extended register");
      if (in.width == 0 || in.width > w) in.width = w;
      break;
    }
    case Op::kVecXor: {
      need(2, 3);
      int w = 0;
      for (std::size_t i = 0; i < ops.size(); ++i) {
        if (!is_reg(i) || !std::get<Register>(ops[i]).is_vector())
          bad("operands must be vector registers");
        w = std::max(w, vector_width(std::get<Register>(ops[i])));
      }
      in.width = w;
      break;
    }
  }
}

std::vector<std::string> split_operands(std::string_view s) {
  std::vector<std::string> out;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.emplace_back(trim(cur));
  return out;
}

Register expect_register(std::string_view tok, int line) {
  tok = trim(tok);
  if (tok.empty() || tok[0] != '%')
    fail(line, "expected register, got '" + std::string(tok) + "'");
  auto r = parse_register(tok.substr(1));
  if (!r) fail(line, "unknown register '" + std::string(tok) + "'");
  return *r;
}

Operand parse_operand(std::string_view tok, int line) {
  tok = trim(tok);
  if (tok.empty()) fail(line, "empty operand");
  if (tok[0] == '%') return expect_register(tok, line);
  if (tok[0] == '$') {
    auto v = parse_integer(tok.substr(1));
    if (!v) fail(line, "bad immediate '" + std::string(tok) + "'");
    return Immediate{*v};
  }
  if (tok[0] == '*') fail(line, "indirect branches are not supported");
  const auto lp = tok.find('(');
  if (lp == std::string_view::npos) {
    if (is_identifier(tok)) return LabelRef{std::string(tok)};
    if (parse_integer(tok))
      fail(line, "absolute memory operand '" + std::string(tok) +
                     "' is not supported");
    fail(line, "bad token '" + std::string(tok) + "'");
  }
  if (tok.back() != ')') fail(line, "bad memory operand '" + std::string(tok) + "'");
  MemOperand m;
  std::string_view disp = trim(tok.substr(0, lp));
  std::string_view inner = tok.substr(lp + 1, tok.size() - lp - 2);
  auto parts = split_operands(inner);
  if (parts.empty() || parts.size() > 3)
    fail(line, "bad memory operand '" + std::string(tok) + "'");
  if (!parts[0].empty()) m.base = expect_register(parts[0], line);
  if (parts.size() >= 2 && !parts[1].empty()) {
    m.index = expect_register(parts[1], line);
    if (m.index->cls != RegClass::kGpr64) fail(line, "index must be a 64-bit register");
  }
  if (parts.size() == 3) {
    auto sc = parse_integer(parts[2]);
    if (!sc || (*sc != 1 && *sc != 2 && *sc != 4 && *sc != 8))
      fail(line, "scale must be 1, 2, 4 or 8");
    m.scale = static_cast<std::uint8_t>(*sc);
  }
  if (m.base && m.base->cls != RegClass::kGpr64 && m.base->cls != RegClass::kRip)
    fail(line, "base must be a 64-bit register");
  if (!disp.empty()) {
    if (auto v = parse_integer(disp)) {
      if (*v < INT32_MIN || *v > INT32_MAX) fail(line, "displacement out of range");
      m.displacement = static_cast<std::int32_t>(*v);
    } else {
      // symbol[+-offset]
      std::size_t cut = disp.find_first_of("+-", 1);
      std::string_view sym = disp.substr(0, cut);
      if (!is_identifier(sym)) fail(line, "bad displacement '" + std::string(disp) + "'");
      m.symbol = std::string(sym);
      if (cut != std::string_view::npos) {
        auto off = parse_integer(disp.substr(cut));
        if (!off) fail(line, "bad displacement '" + std::string(disp) + "'");
        m.displacement = static_cast<std::int32_t>(*off);
      }
      if (!m.rip_relative())
        fail(line, "symbolic displacement requires a %rip base");
    }
  }
  if (!m.base && !m.index && disp.empty())
    fail(line, "memory operand has neither base nor displacement");
  if (m.rip_relative() && m.index) fail(line, "%rip-relative operand cannot have an index");
  return m;
}

std::string quote_aware_strip(std::string_view line, std::string* semicolon_tail) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (in_str) continue;
    if (c == '#') return std::string(line.substr(0, i));
    if (c == ';') {
      if (semicolon_tail) *semicolon_tail = std::string(trim(line.substr(i + 1)));
      return std::string(line.substr(0, i));
    }
  }
  return std::string(line);
}

bool is_text_section_directive(std::string_view d, bool* is_text) {
  if (d == ".text") {
    *is_text = true;
    return true;
  }
  if (d == ".data" || d == ".bss") {
    *is_text = false;
    return true;
  }
  if (starts_with(d, ".section")) {
    std::string_view rest = trim(d.substr(8));
    *is_text = starts_with(rest, ".text");
    return true;
  }
  return false;
}

std::size_t count_if_instr(const std::vector<Instruction>& items, bool original_only) {
  return static_cast<std::size_t>(std::count_if(
      items.begin(), items.end(), [&](const Instruction& i) {
        return !i.is_directive() &&
               (!original_only || i.provenance == Provenance::kOriginal);
      }));
}

}  // namespace

int Register::width() const {
  switch (cls) {
    case RegClass::kGpr64: return 8;
    case RegClass::kGpr32: return 4;
    case RegClass::kGpr16: return 2;
    case RegClass::kGpr8: return 1;
    case RegClass::kXmm: return 16;
    case RegClass::kYmm: return 32;
    case RegClass::kZmm: return 64;
    case RegClass::kMmx:
    case RegClass::kOpmask:
    case RegClass::kRip: return 8;
  }
  return 8;
}

std::string Register::name() const {
  switch (cls) {
    case RegClass::kGpr64: return kGpr64Names[index];
    case RegClass::kGpr32: return kGpr32Names[index];
    case RegClass::kGpr16: return kGpr16Names[index];
    case RegClass::kGpr8: return kGpr8Names[index];
    case RegClass::kXmm: return "xmm" + std::to_string(index);
    case RegClass::kYmm: return "ymm" + std::to_string(index);
    case RegClass::kZmm: return "zmm" + std::to_string(index);
    case RegClass::kMmx: return "mm" + std::to_string(index);
    case RegClass::kOpmask: return "k" + std::to_string(index);
    case RegClass::kRip: return "rip";
  }
  return "?";
}

std::optional<Register> parse_register(std::string_view name) {
  if (!name.empty() && name.front() == '%') name.remove_prefix(1);
  auto find_in = [&](const auto& names) -> int {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (name == names[i]) return static_cast<int>(i);
    return -1;
  };
  if (int i = find_in(kGpr64Names); i >= 0)
    return Register{RegClass::kGpr64, static_cast<std::uint8_t>(i)};
  if (int i = find_in(kGpr32Names); i >= 0)
    return Register{RegClass::kGpr32, static_cast<std::uint8_t>(i)};
  if (int i = find_in(kGpr16Names); i >= 0)
    return Register{RegClass::kGpr16, static_cast<std::uint8_t>(i)};
  if (int i = find_in(kGpr8Names); i >= 0)
    return Register{RegClass::kGpr8, static_cast<std::uint8_t>(i)};
  if (name == "rip") return Register{RegClass::kRip, 0};
  auto numbered = [&](std::string_view prefix, RegClass cls,
                      int limit) -> std::optional<Register> {
    if (!starts_with(name, prefix) || name.size() == prefix.size())
      return std::nullopt;
    int v = 0;
    auto digits = name.substr(prefix.size());
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    if (ec != std::errc() || p != digits.data() + digits.size()) return std::nullopt;
    if (digits.size() > 1 && digits[0] == '0') return std::nullopt;
    if (v < 0 || v >= limit) return std::nullopt;
    return Register{cls, static_cast<std::uint8_t>(v)};
  };
  if (auto r = numbered("xmm", RegClass::kXmm, 16)) return r;
  if (auto r = numbered("ymm", RegClass::kYmm, 16)) return r;
  if (auto r = numbered("zmm", RegClass::kZmm, 32)) return r;
  if (auto r = numbered("mm", RegClass::kMmx, 8)) return r;
  if (auto r = numbered("k", RegClass::kOpmask, 8)) return r;
  return std::nullopt;
}

std::string format_operand(const Operand& op) {
  struct V {
    std::string operator()(const Register& r) const { return "%" + r.name(); }
    std::string operator()(const Immediate& i) const {
      return "$" + std::to_string(i.value);
    }
    std::string operator()(const LabelRef& l) const { return l.name; }
    std::string operator()(const MemOperand& m) const {
      std::string s;
      if (!m.symbol.empty()) {
        s = m.symbol;
        if (m.displacement > 0) s += "+" + std::to_string(m.displacement);
        if (m.displacement < 0) s += std::to_string(m.displacement);
      } else if (m.displacement != 0 || (!m.base && !m.index)) {
        s = std::to_string(m.displacement);
      }
      if (m.base || m.index) {
        s += "(";
        if (m.base) s += "%" + m.base->name();
        if (m.index) {
          s += ",%" + m.index->name();
          s += "," + std::to_string(m.scale);
        }
        s += ")";
      }
      return s;
    }
  };
  return std::visit(V{}, op);
}

bool Instruction::is_terminator() const {
  if (is_directive()) return false;
  switch (op) {
    case Op::kJmp:
    case Op::kJcc:
    case Op::kRet:
    case Op::kCall:
    case Op::kUd2: return true;
    default: return false;
  }
}

bool Instruction::writes_flags() const {
  if (is_directive()) return false;
  switch (op) {
    case Op::kAdd:
    case Op::kSub:
    case Op::kImul:
    case Op::kAnd:
    case Op::kOr:
    case Op::kXor:
    case Op::kShl:
    case Op::kShr:
    case Op::kSar:
    case Op::kCmp:
    case Op::kTest: return true;
    default: return false;
  }
}

const MemOperand* Instruction::memory_operand() const {
  for (const auto& o : operands)
    if (auto* m = std::get_if<MemOperand>(&o)) return m;
  return nullptr;
}

MemOperand* Instruction::memory_operand() {
  for (auto& o : operands)
    if (auto* m = std::get_if<MemOperand>(&o)) return m;
  return nullptr;
}

bool Instruction::writes_register(std::uint8_t gpr) const {
  if (is_directive() || operands.empty()) return false;
  if (op == Op::kCall) return gpr == reg::kRsp || gpr == reg::kRax;
  if (op == Op::kPush || op == Op::kRet) return gpr == reg::kRsp;
  if (op == Op::kCmp || op == Op::kTest || op == Op::kJmp || op == Op::kJcc)
    return false;
  if (op == Op::kPop && gpr == reg::kRsp) return true;
  const auto* r = std::get_if<Register>(&operands.back());
  return r && r->is_gpr() && r->index == gpr;
}

bool Instruction::mentions_register(std::uint8_t gpr) const {
  for (const auto& o : operands) {
    if (auto* r = std::get_if<Register>(&o); r && r->is_gpr() && r->index == gpr)
      return true;
    if (auto* m = std::get_if<MemOperand>(&o)) {
      if (m->based_on(gpr)) return true;
      if (m->index && m->index->index == gpr) return true;
    }
  }
  return false;
}

std::string Instruction::text() const {
  if (is_directive()) return mnemonic;
  std::string s = mnemonic;
  for (std::size_t i = 0; i < operands.size(); ++i) {
    s += (i == 0 ? "\t" : ", ");
    s += format_operand(operands[i]);
  }
  return s;
}

Instruction make_instruction(std::string_view mnemonic, std::vector<Operand> operands,
                             Provenance provenance, int source_line) {
  const auto& table = mnemonic_table();
  auto it = table.find(std::string(mnemonic));
  if (it == table.end())
    fail(source_line, "unsupported mnemonic '" + std::string(mnemonic) + "'");
  Instruction in;
  in.mnemonic = std::string(mnemonic);
  in.operands = std::move(operands);
  in.provenance = provenance;
  in.source_line = source_line;
  in.op = it->second.op;
  in.cond = it->second.cond;
  in.width = it->second.width;
  validate(in);
  return in;
}

std::string_view to_string(TerminatorKind k) {
  switch (k) {
    case TerminatorKind::kFallthrough: return "fallthrough";
    case TerminatorKind::kJmp: return "jmp";
    case TerminatorKind::kJcc: return "jcc";
    case TerminatorKind::kRet: return "ret";
    case TerminatorKind::kCallReturn: return "call-return-continuation";
    case TerminatorKind::kTrap: return "trap";
  }
  return "?";
}

std::size_t BasicBlock::instruction_count() const {
  return count_if_instr(items, false);
}
std::size_t BasicBlock::original_count() const {
  return count_if_instr(items, true);
}
std::size_t BasicBlock::item_of_instruction(std::size_t n) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].is_directive()) continue;
    if (n == 0) return i;
    --n;
  }
  return items.size();
}
const Instruction* BasicBlock::first_instruction() const {
  for (const auto& i : items)
    if (!i.is_directive()) return &i;
  return nullptr;
}
const Instruction* BasicBlock::last_instruction() const {
  for (auto it = items.rbegin(); it != items.rend(); ++it)
    if (!it->is_directive()) return &*it;
  return nullptr;
}

std::size_t Function::instruction_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.instruction_count();
  return n;
}

const Function* Program::find(std::string_view name) const {
  for (const auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}
Function* Program::find(std::string_view name) {
  for (auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}
std::size_t Program::block_count() const {
  std::size_t n = 0;
  for (const auto& f : functions)
    for (const auto& b : f.blocks) n += b.instruction_count() > 0;
  return n;
}

bool structurally_equal(const Program& a, const Program& b) {
  if (a.entry != b.entry || a.functions.size() != b.functions.size() ||
      a.items.size() != b.items.size())
    return false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    const auto& x = a.items[i];
    const auto& y = b.items[i];
    if (x.kind != y.kind || x.function != y.function) return false;
    if (x.kind == TopLevelItem::Kind::kLine && trim(x.text) != trim(y.text))
      return false;
  }
  for (std::size_t f = 0; f < a.functions.size(); ++f) {
    const auto& fa = a.functions[f];
    const auto& fb = b.functions[f];
    if (fa.name != fb.name || fa.blocks.size() != fb.blocks.size()) return false;
    for (std::size_t k = 0; k < fa.blocks.size(); ++k) {
      const auto& ba = fa.blocks[k];
      const auto& bb = fb.blocks[k];
      if (ba.label_kind != bb.label_kind || ba.terminator != bb.terminator ||
          ba.items.size() != bb.items.size())
        return false;
      if (ba.label_kind != LabelKind::kNone && ba.label != bb.label) return false;
      for (std::size_t i = 0; i < ba.items.size(); ++i) {
        const auto& ia = ba.items[i];
        const auto& ib = bb.items[i];
        if (ia.kind != ib.kind || ia.mnemonic != ib.mnemonic ||
            ia.operands != ib.operands || ia.provenance != ib.provenance)
          return false;
      }
    }
  }
  return true;
}

Function build_cfg(Function f, const std::vector<std::string>& known_functions) {
  std::vector<BasicBlock> out;
  int implicit = 0;
  auto current_terminated = [&]() {
    const Instruction* last = out.back().last_instruction();
    return last && last->is_terminator();
  };
  for (auto& b : f.blocks) {
    if (out.empty()) {
      BasicBlock nb;
      nb.label = b.label;
      nb.label_kind = b.label_kind;
      nb.label_after = b.label_after;
      out.push_back(std::move(nb));
    } else if (b.label_kind != LabelKind::kNone) {
      BasicBlock nb;
      nb.label = b.label;
      nb.label_kind = b.label_kind;
      out.push_back(std::move(nb));
    }
    for (auto& item : b.items) {
      if (!item.is_directive() && current_terminated()) {
        BasicBlock nb;
        out.push_back(std::move(nb));
      }
      out.back().items.push_back(std::move(item));
    }
  }
  if (out.empty()) out.emplace_back();

  std::set<std::string> labels;
  for (auto& b : out) {
    if (b.label_kind == LabelKind::kNone)
      b.label = f.name + ".bb" + std::to_string(implicit++);
    if (b.label_kind == LabelKind::kNamed && !labels.insert(b.label).second)
      fail(f.source_line, "duplicate label '" + b.label + "'");
    const Instruction* last = b.last_instruction();
    b.terminator = TerminatorKind::kFallthrough;
    if (last && last->is_terminator()) {
      switch (last->op) {
        case Op::kJmp: b.terminator = TerminatorKind::kJmp; break;
        case Op::kJcc: b.terminator = TerminatorKind::kJcc; break;
        case Op::kRet: b.terminator = TerminatorKind::kRet; break;
        case Op::kCall: b.terminator = TerminatorKind::kCallReturn; break;
        default: b.terminator = TerminatorKind::kTrap; break;
      }
    }
  }
  auto is_function = [&](const std::string& n) {
    return std::find(known_functions.begin(), known_functions.end(), n) !=
           known_functions.end();
  };
  for (const auto& b : out) {
    for (const auto& in : b.items) {
      if (in.is_directive()) continue;
      if (in.op != Op::kJmp && in.op != Op::kJcc && in.op != Op::kCall) continue;
      const auto& target = std::get<LabelRef>(in.operands[0]).name;
      const bool ok = in.op == Op::kCall ? is_function(target)
                                          : (labels.count(target) || is_function(target));
      if (!ok) fail(in.source_line, "unresolved label '" + target + "'");
    }
  }
  f.blocks = std::move(out);
  return f;
}

Program parse_program(std::string_view text) {
  Program p;
  bool in_text = true;
  std::optional<std::size_t> fn;  // index of the open function
  std::vector<std::pair<std::string, int>> pending;  // directives awaiting placement
  std::set<std::string> all_labels;

  auto flush_pending_top = [&]() {
    for (auto& [line, _] : pending)
      p.items.push_back({TopLevelItem::Kind::kLine, line, 0});
    pending.clear();
  };
  auto cur_block = [&]() -> BasicBlock& { return p.functions[*fn].blocks.back(); };
  auto flush_pending_block = [&]() {
    for (auto& [line, no] : pending) {
      Instruction d;
      d.kind = Instruction::Kind::kDirective;
      d.mnemonic = std::string(trim(line));
      d.source_line = no;
      cur_block().items.push_back(std::move(d));
    }
    pending.clear();
  };
  auto close_function = [&]() {
    fn.reset();
    flush_pending_top();
  };

  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    std::string_view view = raw;

    // clang block markers ("# %bb.3:") delimit unlabeled blocks.
    {
      auto t = trim(view);
      if (starts_with(t, "#")) {
        auto rest = trim(t.substr(1));
        if (starts_with(rest, "%bb.")) {
          auto colon = rest.find(':');
          if (colon != std::string_view::npos && fn) {
            std::string label(rest.substr(0, colon));
            auto& f = p.functions[*fn];
            auto& b = f.blocks.back();
            const bool merge_into_entry = f.blocks.size() == 1 &&
                                          b.label_kind == LabelKind::kNone &&
                                          b.instruction_count() == 0;
            if (merge_into_entry) {
              flush_pending_block();
              b.label = label;
              b.label_kind = LabelKind::kMarker;
              b.label_after = b.items.size();
            } else {
              flush_pending_block();
              BasicBlock nb;
              nb.label = label;
              nb.label_kind = LabelKind::kMarker;
              f.blocks.push_back(std::move(nb));
            }
          }
          continue;
        }
      }
    }

    std::string tail;
    std::string body = quote_aware_strip(view, &tail);
    Provenance prov = Provenance::kOriginal;
    if (starts_with(tail, "injected")) prov = Provenance::kInjected;
    if (starts_with(tail, "modified")) prov = Provenance::kModified;
    std::string_view line = trim(body);
    if (line.empty()) continue;

    // Labels, possibly followed by a statement on the same line.
    while (true) {
      auto colon = line.find(':');
      if (colon == std::string_view::npos) break;
      auto name = trim(line.substr(0, colon));
      if (!is_identifier(name)) break;
      std::string label(name);
      if (!all_labels.insert(label).second)
        fail(line_no, "duplicate label '" + label + "'");
      if (!in_text) {
        p.items.push_back({TopLevelItem::Kind::kLine, std::string(name) + ":", 0});
      } else if (starts_with(label, ".L")) {
        if (!fn) fail(line_no, "label '" + label + "' outside any function");
        flush_pending_block();
        BasicBlock nb;
        nb.label = label;
        nb.label_kind = LabelKind::kNamed;
        p.functions[*fn].blocks.push_back(std::move(nb));
      } else {
        close_function();
        Function f;
        f.name = label;
        f.source_line = line_no;
        f.blocks.emplace_back();
        p.functions.push_back(std::move(f));
        fn = p.functions.size() - 1;
        p.items.push_back({TopLevelItem::Kind::kFunction, {}, *fn});
      }
      line = trim(line.substr(colon + 1));
    }
    if (line.empty()) continue;

    if (line[0] == '.') {
      if (starts_with(line, ".intel_syntax"))
        fail(line_no, "Intel syntax is not supported");
      bool to_text = in_text;
      if (is_text_section_directive(line, &to_text)) {
        if (fn) close_function();
        flush_pending_top();
        in_text = to_text;
        p.items.push_back({TopLevelItem::Kind::kLine, std::string(trim(raw)), 0});
        continue;
      }
      if (!in_text || !fn) {
        flush_pending_top();
        p.items.push_back({TopLevelItem::Kind::kLine, std::string(line), 0});
      } else {
        pending.emplace_back(std::string(line), line_no);
      }
      continue;
    }

    // Instruction.
    if (!in_text) fail(line_no, "instruction in a data section");
    if (!fn) fail(line_no, "instruction outside any function (no enclosing function label)");
    flush_pending_block();
    auto sp = line.find_first_of(" \t");
    std::string_view mnemonic = line.substr(0, sp);
    std::string_view rest =
        sp == std::string_view::npos ? std::string_view{} : trim(line.substr(sp));
    std::vector<Operand> ops;
    for (const auto& tok : split_operands(rest)) ops.push_back(parse_operand(tok, line_no));
    cur_block().items.push_back(make_instruction(mnemonic, std::move(ops), prov, line_no));
  }
  if (fn) close_function();
  flush_pending_top();

  std::vector<std::string> names;
  for (const auto& f : p.functions) {
    if (std::find(names.begin(), names.end(), f.name) != names.end())
      fail(f.source_line, "duplicate function '" + f.name + "'");
    names.push_back(f.name);
  }
  for (auto& f : p.functions) {
    f = build_cfg(std::move(f), names);
    for (const auto& b : f.blocks)
      for (const auto& i : b.items)
        if (i.provenance != Provenance::kOriginal) f.is_instrumented = true;
  }
  if (!p.functions.empty())
    p.entry = p.find("main") ? "main" : p.functions.front().name;
  return p;
}

std::string emit_asm(const Program& p) {
  std::string out;
  auto emit_item = [&](const Instruction& in) {
    out += '\t';
    out += in.text();
    if (in.provenance == Provenance::kInjected) out += "\t;injected";
    if (in.provenance == Provenance::kModified) out += "\t;modified";
    out += '\n';
  };
  for (const auto& item : p.items) {
    if (item.kind == TopLevelItem::Kind::kLine) {
      if (!item.text.empty() && item.text[0] == '.' && item.text.back() != ':') out += '\t';
      out += item.text;
      out += '\n';
      continue;
    }
    const auto& f = p.functions[item.function];
    out += f.name + ":\n";
    for (const auto& b : f.blocks) {
      const std::size_t before = std::min(b.label_after, b.items.size());
      for (std::size_t i = 0; i < before; ++i) emit_item(b.items[i]);
      if (b.label_kind == LabelKind::kNamed) out += b.label + ":\n";
      if (b.label_kind == LabelKind::kMarker) out += "# " + b.label + ":\n";
      for (std::size_t i = before; i < b.items.size(); ++i) emit_item(b.items[i]);
    }
  }
  return out;
}

std::vector<BlockStats> block_stats(const Program& p) {
  std::vector<BlockStats> out;
  for (const auto& f : p.functions) {
    BlockStats s;
    s.function = f.name;
    // Label-only blocks (.Lfunc_end and the like) never execute.
    for (const auto& b : f.blocks) {
      if (b.instruction_count() > 0) ++s.block_count;
      s.original_instructions += b.original_count();
    }
    s.avg_block_size = s.block_count ? static_cast<double>(s.original_instructions) /
                                           static_cast<double>(s.block_count)
                                     : 0.0;
    s.degenerate = s.original_instructions == 0;
    out.push_back(s);
  }
  return out;
}

BlockStats program_block_stats(const Program& p) {
  BlockStats total;
  for (const auto& s : block_stats(p)) {
    total.block_count += s.block_count;
    total.original_instructions += s.original_instructions;
  }
  total.avg_block_size =
      total.block_count ? static_cast<double>(total.original_instructions) /
                              static_cast<double>(total.block_count)
                        : 0.0;
  total.degenerate = total.original_instructions == 0;
  return total;
}

std::vector<DataObject> data_objects(const Program& p) {
  std::vector<DataObject> out;
  bool in_text = true;
  std::size_t pending_align = 8;
  auto cur = [&]() -> DataObject& {
    if (out.empty()) throw ParseError(0, "data directive before any data label");
    return out.back();
  };
  auto put = [&](std::uint64_t v, int bytes) {
    auto& o = cur();
    for (int i = 0; i < bytes; ++i) o.bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (const auto& item : p.items) {
    if (item.kind != TopLevelItem::Kind::kLine) continue;
    std::string_view line = trim(item.text);
    bool t = in_text;
    if (is_text_section_directive(line, &t)) {
      in_text = t;
      continue;
    }
    if (in_text) continue;
    if (!line.empty() && line.back() == ':') {
      DataObject o;
      o.name = std::string(line.substr(0, line.size() - 1));
      o.alignment = pending_align;
      pending_align = 8;
      out.push_back(std::move(o));
      continue;
    }
    auto sp = line.find_first_of(" \t");
    std::string_view d = line.substr(0, sp);
    std::string_view args = sp == std::string_view::npos ? "" : trim(line.substr(sp));
    auto values = [&]() { return split_operands(args); };
    if (d == ".p2align" || d == ".align" || d == ".balign") {
      auto v = parse_integer(values().at(0));
      std::size_t a = v ? static_cast<std::size_t>(*v) : 8;
      pending_align = d == ".p2align" ? (std::size_t{1} << a) : a;
    } else if (d == ".quad" || d == ".long" || d == ".short" || d == ".word" ||
               d == ".byte") {
      const int w = d == ".quad" ? 8 : d == ".long" ? 4 : d == ".byte" ? 1 : 2;
      for (const auto& v : values()) {
        if (auto n = parse_integer(v)) {
          put(static_cast<std::uint64_t>(*n), w);
        } else if (w == 8) {
          std::string_view s = trim(v);
          std::size_t cut = s.find_first_of("+-", 1);
          std::int64_t add = 0;
          if (cut != std::string_view::npos) add = parse_integer(s.substr(cut)).value_or(0);
          cur().relocs.push_back({cur().bytes.size(), std::string(s.substr(0, cut)), add});
          put(0, 8);
        } else {
          throw ParseError(0, "bad data value '" + v + "'");
        }
      }
    } else if (d == ".zero" || d == ".space" || d == ".skip") {
      auto n = parse_integer(values().at(0));
      if (!n || *n < 0) throw ParseError(0, "bad size in '" + std::string(line) + "'");
      cur().bytes.insert(cur().bytes.end(), static_cast<std::size_t>(*n), 0);
    } else if (d == ".ascii" || d == ".asciz" || d == ".string") {
      auto q1 = args.find('"');
      auto q2 = args.rfind('"');
      if (q1 == std::string_view::npos || q2 == q1)
        throw ParseError(0, "bad string in '" + std::string(line) + "'");
      std::string_view s = args.substr(q1 + 1, q2 - q1 - 1);
      for (std::size_t i = 0; i < s.size(); ++i) {
        char c = s[i];
        if (c == '\\' && i + 1 < s.size()) {
          char e = s[++i];
          c = e == 'n' ? '\n' : e == 't' ? '\t' : e == '0' ? '\0' : e;
        }
        cur().bytes.push_back(static_cast<std::uint8_t>(c));
      }
      if (d != ".ascii") cur().bytes.push_back(0);
    }
    // .globl/.type/.size and friends carry no bytes.
  }
  return out;
}

}  // namespace qshield
