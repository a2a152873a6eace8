#include "qshield/instrument.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

namespace qshield {
namespace {

bool is_rbp_slot(const MemOperand& m) {
  return m.based_on(reg::kRbp) && !m.index && m.symbol.empty();
}

bool is_stack_slot_load(const Instruction& in, std::uint8_t dst) {
  if (in.op != Op::kMov || in.width != 8 || in.operands.size() != 2) return false;
  const auto* src = std::get_if<MemOperand>(&in.operands[0]);
  const auto* r = std::get_if<Register>(&in.operands[1]);
  return src && r && r->cls == RegClass::kGpr64 && r->index == dst && is_rbp_slot(*src);
}

// A slot can be relocated only if nothing else in the frame can alias it:
// no address-taken or indexed rbp access at or below it, and every direct
// access uses exactly its 8 bytes.
bool slot_relocatable(const Function& f, std::int32_t disp) {
  for (const auto& b : f.blocks)
    for (const auto& in : b.items) {
      if (in.is_directive()) continue;
      const MemOperand* m = in.memory_operand();
      if (!m || !m->based_on(reg::kRbp)) continue;
      if (in.op == Op::kLea || m->index) {
        if (m->displacement <= disp) return false;
        continue;
      }
      const int w = in.op == Op::kMovsx ? 4 : in.op == Op::kMovzx ? 1 : in.width;
      const std::int64_t lo = m->displacement, hi = lo + w;
      if (lo == disp) {
        if (w != 8) return false;
      } else if (lo < disp + 8 && disp < hi) {
        return false;
      }
    }
  return true;
}

bool program_mentions(const Program& p, std::uint8_t gpr) {
  for (const auto& f : p.functions)
    for (const auto& b : f.blocks)
      for (const auto& in : b.items)
        if (!in.is_directive() && in.mentions_register(gpr)) return true;
  return false;
}

std::uint8_t pick_scratch(const Program& p, std::initializer_list<std::uint8_t> prefs,
                          std::uint8_t reserved) {
  for (auto r : prefs)
    if (r != reserved && !program_mentions(p, r)) return r;
  throw InstrumentError("no free scratch register for injected code");
}

Instruction injected(std::string_view mnemonic, std::vector<Operand> ops) {
  return make_instruction(mnemonic, std::move(ops), Provenance::kInjected);
}

MemOperand mem(Register base, std::int32_t disp) {
  MemOperand m;
  m.base = base;
  m.displacement = disp;
  return m;
}

MemOperand rip_symbol(const std::string& sym) {
  MemOperand m;
  m.base = Register{RegClass::kRip, 0};
  m.symbol = sym;
  return m;
}

bool has_rbp_memory_access(const Instruction& in) {
  if (in.op == Op::kLea) return false;
  const MemOperand* m = in.memory_operand();
  return m && m->based_on(reg::kRbp);
}

bool is_frame_setup(const Instruction& in) {
  return in.op == Op::kMov && in.width == 8 && in.operands.size() == 2 &&
         std::get_if<Register>(&in.operands[0]) &&
         std::get<Register>(in.operands[0]) == reg::gpr64(reg::kRsp) &&
         std::get_if<Register>(&in.operands[1]) &&
         std::get<Register>(in.operands[1]) == reg::gpr64(reg::kRbp);
}

std::optional<std::int64_t> frame_allocation(const Function& f) {
  for (const auto& in : f.entry().items) {
    if (in.is_directive() || in.op != Op::kSub || in.operands.size() != 2) continue;
    const auto* imm = std::get_if<Immediate>(&in.operands[0]);
    const auto* r = std::get_if<Register>(&in.operands[1]);
    if (imm && r && *r == reg::gpr64(reg::kRsp)) return imm->value;
  }
  return std::nullopt;
}

std::string header_for(const InstrumentationConfig& cfg, const SecondStackPlan* plan) {
  std::ostringstream h;
  h << "# qshield mode=" << cfg.label() << " seed=" << cfg.seed;
  if (plan) {
    h << " plan=" << std::hex << plan_hash(*plan) << std::dec << " s=" << plan->s
      << " N=" << plan->N << " o=" << plan->o;
  }
  h << "\n";
  return h.str();
}

std::size_t executable_blocks(const Function& f) {
  return static_cast<std::size_t>(std::count_if(f.blocks.begin(), f.blocks.end(), [](const BasicBlock& b) {
    return b.instruction_count() > 0;
  }));
}

}  // namespace

std::string InstrumentationConfig::label() const {
  switch (mode) {
    case Mode::kNone: return "none";
    case Mode::kQsBlock: return "qs-block";
    case Mode::kQsIntra: return "qs-intra";
    case Mode::kVarys: return "varys(" + std::to_string(varys_interval) + ")";
  }
  return "?";
}

InstrumentationConfig InstrumentationConfig::parse(const std::string& mode, int interval) {
  InstrumentationConfig c;
  c.varys_interval = interval;
  if (mode == "qs-block") {
    c.mode = Mode::kQsBlock;
  } else if (mode == "qs-intra") {
    c.mode = Mode::kQsIntra;
  } else if (mode == "none") {
    c.mode = Mode::kNone;
  } else if (mode == "varys") {
    c.mode = Mode::kVarys;
  } else if (mode.rfind("varys:", 0) == 0 ||
             (mode.rfind("varys(", 0) == 0 && mode.back() == ')')) {
    c.mode = Mode::kVarys;
    std::string digits = mode.substr(6);
    if (!digits.empty() && digits.back() == ')') digits.pop_back();
    try {
      c.varys_interval = std::stoi(digits);
    } catch (const std::exception&) {
      throw InstrumentError("bad baseline interval in '" + mode + "'");
    }
  } else {
    throw InstrumentError("unknown mode '" + mode + "'");
  }
  if (c.mode == Mode::kVarys && c.varys_interval < 1)
    throw InstrumentError("baseline interval I must be >= 1");
  return c;
}

MemRefAnalysis identify_memory_refs(const Function& f, Register reserved) {
  MemRefAnalysis a;
  a.function = f.name;
  std::map<std::int32_t, std::size_t> seen;
  for (const auto& b : f.blocks) {
    for (std::size_t i = 0; i < b.items.size(); ++i) {
      const auto& use = b.items[i];
      if (use.is_directive() || use.op == Op::kLea) continue;
      const MemOperand* m = use.memory_operand();
      if (!m || !m->base || m->base->cls != RegClass::kGpr64) continue;
      const std::uint8_t base = m->base->index;
      if (base == reg::kRbp || base == reg::kRsp || base == reserved.index) continue;
      // Most recent definition of the base register within the block.
      const Instruction* def = nullptr;
      for (std::size_t j = i; j-- > 0;) {
        const auto& cand = b.items[j];
        if (!cand.is_directive() && cand.writes_register(base)) {
          def = &cand;
          break;
        }
      }
      if (!def || !is_stack_slot_load(*def, base)) continue;
      const auto& slot = std::get<MemOperand>(def->operands[0]);
      if (seen.count(slot.displacement)) continue;
      if (!slot_relocatable(f, slot.displacement)) continue;
      seen[slot.displacement] = a.refs.size();
      a.refs.push_back({reg::gpr64(base), slot, def->source_line});
    }
  }
  return a;
}

void assign_frames(SecondStackPlan& plan, const Program& p, std::size_t P, Register reserved) {
  plan.P = P;
  plan.frame_bytes.clear();
  for (const auto& f : p.functions) {
    const auto a = identify_memory_refs(f, reserved);
    plan.frame_bytes[f.name] = frame_size({a.M(), plan.N, P}).bytes;
  }
}

SecondStackPlan plan_for(const Program& p, const InstrumentationConfig& cfg,
                         const SsaLayout& layout, std::optional<int> o_req) {
  auto plan = plan_second_stack(layout, scan_used_features(p), cfg.addressing, o_req);
  plan.reserved_register = cfg.reserved_register;
  assign_frames(plan, p, cfg.P, cfg.reserved_register);
  return plan;
}

InstrumentResult instrument_second_stack(const Program& p, SecondStackPlan plan,
                                       const InstrumentationConfig& cfg) {
  if (!cfg.is_second_stack()) throw InstrumentError("not a second-stack mode");
  const Register r14 = cfg.reserved_register;
  if (r14.cls != RegClass::kGpr64) throw InstrumentError("reserved register must be a GPR");
  if (program_mentions(p, r14.index))
    throw InstrumentError("reserved register %" + r14.name() + " is used by the program");
  plan.reserved_register = r14;
  if (plan.frame_bytes.empty()) assign_frames(plan, p, cfg.P, r14);

  const bool block_mode = cfg.mode == Mode::kQsBlock;
  const std::uint8_t scratch = pick_scratch(
      p, {reg::kR10, reg::kR11, reg::kR9, reg::kR8, reg::kR15, reg::kR13, reg::kR12},
      r14.index);
  std::mt19937_64 rng(cfg.seed);

  InstrumentResult res;
  res.program = p;
  auto& stats = res.stats;
  for (auto& f : res.program.functions) {
    FunctionOverhead fo;
    fo.function = f.name;
    fo.blocks = executable_blocks(f);
    for (const auto& b : f.blocks) fo.original += b.original_count();

    const auto analysis = identify_memory_refs(f, r14);
    const auto fs = frame_size({analysis.M(), plan.N, plan.P});
    if (auto it = plan.frame_bytes.find(f.name);
        it != plan.frame_bytes.end() && it->second != fs.bytes)
      throw InstrumentError("plan frame size for " + f.name + " disagrees with analysis");
    plan.frame_bytes[f.name] = fs.bytes;
    fo.frame_bytes = fs.bytes;
    const auto F = static_cast<std::int64_t>(fs.bytes);

    // Pick which generic references get second-frame slots.
    std::vector<std::size_t> order(analysis.refs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (order.size() > fs.stored_generic_count) {
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[rng() % (i + 1)]);
      order.resize(fs.stored_generic_count);
      std::sort(order.begin(), order.end());
    }
    std::map<std::int32_t, std::int32_t> slot_map;  // rbp disp -> r14 disp
    for (std::size_t k = 0; k < order.size(); ++k)
      slot_map[analysis.refs[order[k]].source_slot.displacement] =
          -8 * static_cast<std::int32_t>(k + 1);

    bool has_frame = false;
    for (const auto& b : f.blocks)
      for (const auto& in : b.items)
        if (!in.is_directive() && is_frame_setup(in)) has_frame = true;
    fo.unprotected_leaf = !has_frame;
    const auto alloc = frame_allocation(f);
    const std::int32_t dummy_disp =
        (alloc && *alloc >= 8) ? cfg.dummy_displacement : 0;

    for (std::size_t bi = 0; bi < f.blocks.size(); ++bi) {
      auto& b = f.blocks[bi];
      if (b.instruction_count() == 0) continue;  // e.g. .Lfunc_end labels
      std::vector<Instruction> out;
      const std::size_t first = b.item_of_instruction(0);
      const Instruction* first_in = b.first_instruction();
      for (std::size_t i = 0; i <= b.items.size(); ++i) {
        if (i == std::min(first, b.items.size()) ||
            (first >= b.items.size() && i == b.items.size())) {
          if (bi == 0) {
            out.push_back(injected("addq", {Immediate{F}, r14}));
            ++fo.injected;
          } else if (block_mode && has_frame) {
            out.push_back(injected("movq", {mem(r14, 0), reg::gpr64(reg::kRbp)}));
            ++fo.injected;
            // A slot moved to the second frame no longer goes through rbp.
            const MemOperand* fm = first_in ? first_in->memory_operand() : nullptr;
            const bool relocated = fm && first_in->op != Op::kLea && is_rbp_slot(*fm) &&
                                   slot_map.count(fm->displacement);
            if (!first_in || !has_rbp_memory_access(*first_in) || relocated) {
              out.push_back(injected("movq", {mem(reg::gpr64(reg::kRbp), dummy_disp),
                                              reg::gpr64(scratch)}));
              ++fo.injected;
            }
          }
        }
        if (i == b.items.size()) break;
        Instruction in = b.items[i];
        if (in.is_directive()) {
          out.push_back(std::move(in));
          continue;
        }
        if (in.op == Op::kRet) {
          out.push_back(injected("subq", {Immediate{F}, r14}));
          ++fo.injected;
          ++fo.returns;
        }
        if (MemOperand* m = in.memory_operand();
            m && in.op != Op::kLea && is_rbp_slot(*m) && slot_map.count(m->displacement)) {
          m->displacement = slot_map.at(m->displacement);
          m->base = r14;
          in.provenance = Provenance::kModified;
          ++fo.modified;
        }
        const bool setup = is_frame_setup(in);
        out.push_back(std::move(in));
        if (setup) {
          out.push_back(injected("movq", {reg::gpr64(reg::kRbp), mem(r14, 0)}));
          ++fo.injected;
        }
      }
      // Leading directives stay ahead of the label line.
      b.items = std::move(out);
    }
    f.is_instrumented = true;
    stats.original += fo.original;
    stats.injected += fo.injected;
    stats.modified += fo.modified;
    stats.block_count += fo.blocks;
    stats.functions.push_back(fo);
  }
  stats.function_count = res.program.functions.size();
  res.plan = plan;
  res.header = header_for(cfg, &plan);
  return res;
}

InstrumentResult instrument_varys(const Program& p, int interval) {
  if (interval < 1) throw InstrumentError("baseline interval I must be >= 1");
  if (p.find(kAbortStub)) throw InstrumentError("program already carries an abort stub");
  const std::uint8_t scratch =
      pick_scratch(p, {reg::kR11, reg::kR10, reg::kR9, reg::kR8}, 0xff);

  InstrumentResult res;
  res.program = p;
  auto& stats = res.stats;
  std::vector<std::string> names;
  for (const auto& f : p.functions) names.push_back(f.name);
  names.push_back(kAbortStub);

  for (auto& f : res.program.functions) {
    FunctionOverhead fo;
    fo.function = f.name;
    fo.blocks = executable_blocks(f);
    for (auto& b : f.blocks) {
      fo.original += b.original_count();
      std::vector<std::size_t> instr_items;
      for (std::size_t i = 0; i < b.items.size(); ++i)
        if (!b.items[i].is_directive()) instr_items.push_back(i);
      const std::size_t n = instr_items.size();
      // Check sites: before instruction 0, I, 2I, ...; a site in front of a
      // flag consumer moves ahead of its flag producer.
      std::vector<std::size_t> sites;
      for (std::size_t j = 0; j < n; j += static_cast<std::size_t>(interval)) {
        std::size_t at = j;
        if (j > 0 && b.items[instr_items[j]].reads_flags() &&
            b.items[instr_items[j - 1]].writes_flags())
          at = j - 1;
        if (sites.empty() || sites.back() != at) sites.push_back(at);
      }
      std::vector<Instruction> out;
      std::size_t next_site = 0;
      std::size_t instr_no = 0;
      for (std::size_t i = 0; i < b.items.size(); ++i) {
        if (!b.items[i].is_directive()) {
          if (next_site < sites.size() && sites[next_site] == instr_no) {
            out.push_back(injected("movq", {rip_symbol(kSentinelSymbol), reg::gpr64(scratch)}));
            out.push_back(injected("cmpq", {rip_symbol(kSentinelInitSymbol), reg::gpr64(scratch)}));
            out.push_back(injected("jne", {LabelRef{kAbortStub}}));
            fo.injected += 3;
            ++fo.check_sites;
            ++next_site;
          }
          ++instr_no;
        }
        out.push_back(b.items[i]);
      }
      b.items = std::move(out);
    }
    f = build_cfg(std::move(f), names);
    f.is_instrumented = true;
    stats.original += fo.original;
    stats.injected += fo.injected;
    stats.check_sites += fo.check_sites;
    stats.block_count += fo.blocks;
    stats.functions.push_back(fo);
  }
  stats.function_count = res.program.functions.size();

  Function stub;
  stub.name = kAbortStub;
  stub.blocks.emplace_back();
  stub.blocks[0].items.push_back(injected("ud2", {}));
  stub = build_cfg(std::move(stub), names);
  stub.is_instrumented = true;
  res.program.items.push_back({TopLevelItem::Kind::kLine, "\t.text", 0});
  res.program.functions.push_back(std::move(stub));
  res.program.items.push_back(
      {TopLevelItem::Kind::kFunction, {}, res.program.functions.size() - 1});
  res.program.items.push_back({TopLevelItem::Kind::kLine, "\t.data", 0});
  res.program.items.push_back({TopLevelItem::Kind::kLine, "\t.p2align\t3", 0});
  res.program.items.push_back(
      {TopLevelItem::Kind::kLine, std::string(kSentinelInitSymbol) + ":", 0});
  res.program.items.push_back(
      {TopLevelItem::Kind::kLine,
       "\t.quad\t" + std::to_string(static_cast<std::int64_t>(kSentinelValue)), 0});
  stats.stub_instructions = 1;

  InstrumentationConfig cfg;
  cfg.mode = Mode::kVarys;
  cfg.varys_interval = interval;
  cfg.seed = 0;
  res.header = header_for(cfg, nullptr);
  return res;
}

InstrumentResult instrument(const Program& p, const SecondStackPlan& plan,
                            const InstrumentationConfig& cfg) {
  switch (cfg.mode) {
    case Mode::kNone: {
      InstrumentResult r;
      r.program = p;
      r.plan = plan;
      r.stats.original = program_block_stats(p).original_instructions;
      r.stats.block_count = p.block_count();
      r.stats.function_count = p.functions.size();
      r.header = header_for(cfg, nullptr);
      return r;
    }
    case Mode::kQsBlock:
    case Mode::kQsIntra: return instrument_second_stack(p, plan, cfg);
    case Mode::kVarys: return instrument_varys(p, cfg.varys_interval);
  }
  throw InstrumentError("unknown mode");
}

}  // namespace qshield
