// qshield: instrument, simulate and attack AT&T x86-64 assembly.
//
// Exit codes: 0 all checked properties held, 1 a property was violated,
// 2 usage or input error.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "qshield/harness.hpp"

#ifndef QSHIELD_CORPUS_DIR
#define QSHIELD_CORPUS_DIR "corpus"
#endif

using namespace qshield;

namespace {

constexpr int kOk = 0, kViolation = 1, kUsage = 2;

std::string slurp(const std::string& path) {
  if (path == "-") {
    std::ostringstream s;
    s << std::cin.rdbuf();
    return s.str();
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw HarnessError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_out(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw HarnessError("cannot write " + path);
  out << text;
}

std::uint64_t default_seed() {
  if (const char* s = std::getenv("QSHIELD_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw HarnessError("QSHIELD_SEED is not a number");
    }
  }
  return 1;
}

struct ModeOptions {
  std::string mode = "qs-block";
  int I = 4;
  std::size_t P = 0;
  std::string addressing = "LA48";
  std::string plan_path;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--mode", mode, "none | qs-block | qs-intra | varys | varys:N")
        ->capture_default_str();
    app->add_option("--I", I, "baseline check interval")->capture_default_str();
    app->add_option("--P", P, "maximum call depth (default 64)");
    app->add_option("--addressing", addressing, "LA48 | LA57")->capture_default_str();
    app->add_option("--plan", plan_path, "plan JSON (default: computed from the input)");
    app->add_option("--seed", seed, "PRNG seed (default: $QSHIELD_SEED or 1)");
  }

  InstrumentationConfig config() const {
    auto cfg = InstrumentationConfig::parse(mode, I);
    cfg.addressing = AddressingMode::from_string(addressing);
    if (P == 0 && cfg.is_second_stack() && plan_path.empty())
      std::cerr << "warning: --P not given, assuming a maximum call depth of 64\n";
    cfg.P = P ? P : 64;
    cfg.seed = seed ? seed : default_seed();
    return cfg;
  }

  SecondStackPlan plan(const Program& p, const InstrumentationConfig& cfg) const {
    if (plan_path.empty()) return plan_for(p, cfg);
    return plan_from_json(slurp(plan_path));
  }
};

Program load_program(const std::string& path) {
  auto p = parse_program(slurp(path));
  if (p.entry.empty()) p.entry = "main";
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Second-stack instrumentation and AEX attack simulator"};
  app.require_subcommand(1);

  // instrument
  auto* inst = app.add_subcommand("instrument", "instrument an assembly file");
  ModeOptions inst_mode;
  inst_mode.add(inst);
  std::string inst_in, inst_out;
  inst->add_option("input", inst_in, "input .s ('-' for stdin)")->required();
  inst->add_option("-o,--output", inst_out, "output .s (default stdout)");
  bool inst_stats = false;
  inst->add_flag("--stats", inst_stats, "print overhead counts to stderr");

  // plan
  auto* plan_cmd = app.add_subcommand("plan", "compute the second-stack plan as JSON");
  ModeOptions plan_mode;
  plan_mode.add(plan_cmd);
  std::string plan_in, plan_out;
  int plan_o = -1;
  plan_cmd->add_option("input", plan_in)->required();
  plan_cmd->add_option("--bit-offset", plan_o, "requested bit offset o");
  plan_cmd->add_option("-o,--output", plan_out);

  // simulate
  auto* sim = app.add_subcommand("simulate", "run one trial of an (instrumented) program");
  ModeOptions sim_mode;
  sim_mode.add(sim);
  std::string sim_in, sim_trace;
  std::optional<std::uint64_t> sim_aex_at;
  bool sim_random = false;
  std::uint64_t sim_interval = 1, sim_max_aex = 1000;
  bool sim_instrumented = false;
  sim->add_option("input", sim_in)->required();
  sim->add_option("--aex-at", sim_aex_at, "retired-instruction index of the first AEX");
  sim->add_flag("--random-start", sim_random, "draw the first AEX from the program window");
  sim->add_option("--interval", sim_interval)->capture_default_str();
  sim->add_option("--max-aex", sim_max_aex)->capture_default_str();
  sim->add_option("--trace", sim_trace, "write an execution trace to this file");
  sim->add_flag("--instrumented", sim_instrumented,
                "input is already instrumented in --mode (requires --plan for qs modes)");

  // attack
  auto* atk = app.add_subcommand("attack", "run a full experiment spec over the corpus");
  std::string atk_spec, atk_out, atk_format = "json", atk_corpus = QSHIELD_CORPUS_DIR;
  atk->add_option("--spec", atk_spec, "experiment spec JSON")->required();
  atk->add_option("--corpus", atk_corpus, "corpus directory")->capture_default_str();
  atk->add_option("--format", atk_format, "json | csv | markdown")->capture_default_str();
  atk->add_option("-o,--output", atk_out);
  bool atk_compare = false;
  atk->add_flag("--compare", atk_compare, "append the qs-block vs varys(4) comparison to stderr");

  // report
  auto* rep = app.add_subcommand("report", "re-render a JSON report");
  std::string rep_in, rep_out, rep_format = "markdown";
  rep->add_option("input", rep_in)->required();
  rep->add_option("--format", rep_format)->capture_default_str();
  rep->add_option("-o,--output", rep_out);
  bool rep_compare = false;
  rep->add_flag("--compare", rep_compare, "render the qs-block vs varys(4) comparison instead");

  // validate-prob
  auto* vp = app.add_subcommand("validate-prob", "Monte Carlo vs exact overwrite probability");
  std::string vp_addressing = "LA48", vp_model = "uniform64";
  int vp_o = 16;
  std::uint64_t vp_samples = 1'000'000, vp_seed = 0;
  vp->add_option("--addressing", vp_addressing)->capture_default_str();
  vp->add_option("--bit-offset", vp_o, "bit offset o")->capture_default_str();
  vp->add_option("--model", vp_model, "uniform64 | address_like | mixture:p")
      ->capture_default_str();
  vp->add_option("--samples", vp_samples)->capture_default_str();
  vp->add_option("--seed", vp_seed);

  // corpus list
  auto* corp = app.add_subcommand("corpus", "bundled corpus");
  auto* corp_list = corp->add_subcommand("list", "list corpus programs");
  corp->require_subcommand(1);
  std::string corp_dir = QSHIELD_CORPUS_DIR;
  corp_list->add_option("--dir", corp_dir)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*inst) {
      const auto p = load_program(inst_in);
      const auto cfg = inst_mode.config();
      const auto plan = inst_mode.plan(p, cfg);
      const auto r = instrument(p, plan, cfg);
      write_out(inst_out, r.header + emit_asm(r.program));
      if (inst_stats)
        std::cerr << "original=" << r.stats.original << " injected=" << r.stats.injected
                  << " modified=" << r.stats.modified << " check_sites=" << r.stats.check_sites
                  << " blocks=" << r.stats.block_count << "\n";
      return kOk;
    }

    if (*plan_cmd) {
      const auto p = load_program(plan_in);
      const auto cfg = plan_mode.config();
      std::optional<int> o;
      if (plan_o >= 0) o = plan_o;
      const auto plan = plan_for(p, cfg, default_ssa_layout(), o);
      write_out(plan_out, plan_to_json(plan) + "\n");
      return kOk;
    }

    if (*sim) {
      const auto p = load_program(sim_in);
      const auto cfg = sim_mode.config();
      AttackSchedule sched = AttackSchedule::none();
      if (sim_random) {
        sched = AttackSchedule::random(sim_interval, sim_max_aex);
      } else if (sim_aex_at) {
        sched = AttackSchedule::single_step(*sim_aex_at, sim_max_aex);
        sched.interval = sim_interval;
      }
      std::ofstream trace;
      TrialOptions opts;
      if (!sim_trace.empty()) {
        trace.open(sim_trace);
        if (!trace) throw HarnessError("cannot write " + sim_trace);
        opts.trace = &trace;
      }
      TrialResult r;
      if (sim_instrumented) {
        SecondStackPlan plan = sim_mode.plan_path.empty() ? SecondStackPlan{}
                                                          : plan_from_json(slurp(sim_mode.plan_path));
        if (sim_mode.plan_path.empty() && cfg.is_second_stack())
          throw HarnessError("--instrumented with a qs mode needs --plan");
        plan.mode = cfg.addressing;
        const auto image = link_program(p, plan, cfg);
        r = run_trial(image, sched, cfg.seed, opts);
      } else {
        const auto plan = sim_mode.plan(p, cfg);
        const auto ir = instrument(p, plan, cfg);
        r = run_trial(ir.program, ir.plan, cfg, sched, cfg.seed, opts);
      }
      std::cout << "outcome: " << to_string(r.outcome) << "\n";
      if (r.crash_reason) {
        std::cout << "reason: " << to_string(*r.crash_reason) << "\n"
                  << "delay: " << r.aex_before_crash << "\n"
                  << "crash_instruction: " << r.crash_instruction << "\n";
        std::ostringstream a;
        a << std::hex << "0x" << r.crash_address;
        std::cout << "crash_address: " << a.str() << "\n";
      } else {
        std::cout << "exit_value: " << r.exit_value << "\n";
      }
      if (r.first_aex_at) std::cout << "first_aex_at: " << *r.first_aex_at << "\n";
      std::cout << "aex_count: " << r.aex_count << "\n"
                << "retired: " << r.retired << "\n"
                << "program_retired: " << r.program_retired << "\n"
                << "entered_block_after_attacked: "
                << (r.entered_block_after_attacked ? "yes" : "no") << "\n";
      return kOk;
    }

    if (*atk) {
      const auto spec = ExperimentSpec::from_json(slurp(atk_spec));
      const auto format = report_format_from_string(atk_format);
      const auto corpus = load_corpus(atk_corpus);
      const auto report = run_experiment(spec, corpus);
      write_out(atk_out, render_report(report, format));
      bool ok = true;
      for (const auto& m : report.rows) {
        const auto cfg = InstrumentationConfig::parse(m.mode);
        if (m.false_positives) {
          std::cerr << m.program << " " << m.mode << ": " << m.false_positives
                    << " false positives\n";
          ok = false;
        }
        if (cfg.mode != Mode::kNone && m.crash_rate < 1.0) {
          std::cerr << m.program << " " << m.mode << ": crash rate " << m.crash_rate << "\n";
          ok = false;
        }
        if (cfg.mode == Mode::kQsBlock && m.block_violations) {
          std::cerr << m.program << " " << m.mode << ": " << m.block_violations
                    << " trials entered a later block\n";
          ok = false;
        }
      }
      if (atk_compare) {
        const auto modes = report.modes();
        if (std::find(modes.begin(), modes.end(), "qs-block") != modes.end() &&
            std::find(modes.begin(), modes.end(), "varys(4)") != modes.end())
          std::cerr << render_comparison(compare_modes(report));
      }
      return ok ? kOk : kViolation;
    }

    if (*rep) {
      const auto report = report_from_json(slurp(rep_in));
      if (rep_compare) {
        write_out(rep_out, render_comparison(compare_modes(report)));
      } else {
        write_out(rep_out, render_report(report, report_format_from_string(rep_format)));
      }
      return kOk;
    }

    if (*vp) {
      const auto mode = AddressingMode::from_string(vp_addressing);
      const auto model = RegModel::from_string(vp_model);
      const auto seed = vp_seed ? vp_seed : default_seed();
      const auto est = mc_overwrite_probability(mode, vp_o, model, vp_samples, seed);
      const auto oracle = exact_overwrite_oracle(mode);
      const double expect = oracle.non_canonical_fraction();
      const double sigma = std::sqrt(expect * (1 - expect) / double(vp_samples));
      const double tol = std::max(3 * sigma, 1.0 / double(vp_samples));
      std::cout << "addressing: " << mode.to_string() << "\n"
                << "o: " << vp_o << "\n"
                << "model: " << model.to_string() << "\n"
                << "samples: " << est.samples << "\n"
                << "mc_non_canonical: " << est.rate() << "\n"
                << "exact_non_canonical (uniform64): " << expect << "\n"
                << "exact_patterns: " << oracle.patterns << " canonical: " << oracle.canonical
                << "\n";
      if (model.kind != RegModel::Kind::kUniform64) return kOk;
      const bool ok = std::fabs(est.rate() - expect) <= tol;
      std::cout << (ok ? "agree" : "DISAGREE") << " (tolerance " << tol << ")\n";
      return ok ? kOk : kViolation;
    }

    if (*corp_list) {
      const auto corpus = load_corpus(corp_dir, false);
      std::cout << "name,functions,blocks,avg_block_size,expected_exit\n";
      for (const auto& e : corpus)
        std::cout << e.name << "," << e.function_count << "," << e.block_count << ","
                  << e.avg_block_size << "," << e.expected_exit << "\n";
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
