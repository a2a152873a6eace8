#include "qshield/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace qshield {
namespace {

using ojson = nlohmann::ordered_json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw HarnessError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double percentile(const std::vector<std::uint64_t>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return static_cast<double>(sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1]);
}

std::string format_number(double v) {
  if (std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 1e15) {
    std::ostringstream s;
    s << static_cast<long long>(v);
    return s.str();
  }
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

// Metric name, value accessor, shown in markdown.
struct MetricDef {
  const char* name;
  double (*get)(const ModeMetrics&);
  bool markdown;
};

const std::vector<MetricDef>& metric_defs() {
  static const std::vector<MetricDef> defs = {
      {"crash_rate", [](const ModeMetrics& m) { return m.crash_rate; }, true},
      {"mean_delay", [](const ModeMetrics& m) { return m.mean_delay; }, true},
      {"p50_delay", [](const ModeMetrics& m) { return m.p50_delay; }, false},
      {"p90_delay", [](const ModeMetrics& m) { return m.p90_delay; }, true},
      {"max_delay", [](const ModeMetrics& m) { return m.max_delay; }, false},
      {"entered_block_rate", [](const ModeMetrics& m) { return m.entered_block_rate; }, true},
      {"block_violations",
       [](const ModeMetrics& m) { return static_cast<double>(m.block_violations); }, false},
      {"static_overhead", [](const ModeMetrics& m) { return m.static_overhead; }, true},
      {"dynamic_overhead", [](const ModeMetrics& m) { return m.dynamic_overhead; }, true},
      {"false_positives",
       [](const ModeMetrics& m) { return static_cast<double>(m.false_positives); }, true},
      {"trials", [](const ModeMetrics& m) { return static_cast<double>(m.trials); }, false},
      {"benign_runs", [](const ModeMetrics& m) { return static_cast<double>(m.benign_runs); },
       false},
      {"injected", [](const ModeMetrics& m) { return static_cast<double>(m.injected); }, false},
      {"modified", [](const ModeMetrics& m) { return static_cast<double>(m.modified); }, false},
      {"check_sites", [](const ModeMetrics& m) { return static_cast<double>(m.check_sites); },
       false},
      {"block_count", [](const ModeMetrics& m) { return static_cast<double>(m.block_count); },
       false},
      {"function_count",
       [](const ModeMetrics& m) { return static_cast<double>(m.function_count); }, false},
      {"avg_block_size", [](const ModeMetrics& m) { return m.avg_block_size; }, false},
  };
  return defs;
}

ojson attack_to_json(const AttackSchedule& a) {
  ojson j;
  if (a.random_start) j["start"] = "random";
  else if (a.first_aex_at) j["start"] = *a.first_aex_at;
  else j["start"] = nullptr;
  j["interval"] = a.interval;
  j["max_aex"] = a.max_aex;
  return j;
}

AttackSchedule attack_from_json(const nlohmann::json& j) {
  AttackSchedule a;
  a.interval = j.value("interval", std::uint64_t{1});
  a.max_aex = j.value("max_aex", std::uint64_t{1000});
  if (j.contains("start")) {
    const auto& s = j["start"];
    if (s.is_string()) {
      if (s.get<std::string>() != "random") throw HarnessError("attack.start must be 'random' or an index");
      a.random_start = true;
    } else if (s.is_number_unsigned() || s.is_number_integer()) {
      a.first_aex_at = s.get<std::uint64_t>();
    }
  } else {
    a.random_start = true;
  }
  return a;
}

ojson spec_to_ojson(const ExperimentSpec& s) {
  ojson j;
  j["programs"] = s.programs;
  ojson modes = ojson::array();
  for (const auto& m : s.modes) modes.push_back(m.label());
  j["modes"] = modes;
  j["trials"] = s.trials;
  j["benign_runs"] = s.benign_runs;
  j["attack"] = attack_to_json(s.attack);
  j["seed"] = s.seed;
  j["addressing"] = s.addressing.to_string();
  j["P"] = s.P;
  j["stack_bytes"] = s.stack_bytes;
  j["budget"] = s.budget;
  return j;
}

ExperimentSpec spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  s.programs = j.value("programs", std::vector<std::string>{});
  s.addressing = AddressingMode::from_string(j.value("addressing", std::string("LA48")));
  s.P = j.value("P", std::size_t{64});
  for (const auto& m : j.value("modes", std::vector<std::string>{"qs-block", "varys:4"})) {
    auto cfg = InstrumentationConfig::parse(m);
    cfg.addressing = s.addressing;
    cfg.P = s.P;
    s.modes.push_back(cfg);
  }
  s.trials = j.value("trials", std::size_t{100});
  s.benign_runs = j.value("benign_runs", std::size_t{1000});
  if (j.contains("attack")) s.attack = attack_from_json(j["attack"]);
  s.seed = j.value("seed", std::uint64_t{1});
  s.stack_bytes = j.value("stack_bytes", std::size_t{64 * 1024});
  s.budget = j.value("budget", std::uint64_t{5'000'000});
  s.threads = j.value("threads", 0u);
  return s;
}

ojson metrics_to_ojson(const ModeMetrics& m) {
  ojson j;
  j["program"] = m.program;
  j["mode"] = m.mode;
  for (const auto& d : metric_defs()) j[d.name] = d.get(m);
  ojson reasons = ojson::object();
  for (const auto& [k, v] : m.crash_reasons) reasons[k] = v;
  j["crash_reasons"] = reasons;
  return j;
}

ModeMetrics metrics_from_json(const nlohmann::json& j) {
  ModeMetrics m;
  m.program = j.at("program").get<std::string>();
  m.mode = j.at("mode").get<std::string>();
  auto num = [&](const char* k) { return j.at(k).get<double>(); };
  auto count = [&](const char* k) { return static_cast<std::size_t>(j.at(k).get<double>()); };
  m.crash_rate = num("crash_rate");
  m.mean_delay = num("mean_delay");
  m.p50_delay = num("p50_delay");
  m.p90_delay = num("p90_delay");
  m.max_delay = num("max_delay");
  m.entered_block_rate = num("entered_block_rate");
  m.block_violations = count("block_violations");
  m.static_overhead = num("static_overhead");
  m.dynamic_overhead = num("dynamic_overhead");
  m.false_positives = count("false_positives");
  m.trials = count("trials");
  m.benign_runs = count("benign_runs");
  m.injected = count("injected");
  m.modified = count("modified");
  m.check_sites = count("check_sites");
  m.block_count = count("block_count");
  m.function_count = count("function_count");
  m.avg_block_size = num("avg_block_size");
  if (j.contains("crash_reasons"))
    for (auto& [k, v] : j["crash_reasons"].items()) m.crash_reasons[k] = v.get<std::size_t>();
  return m;
}

struct Unit {
  std::size_t program;
  std::size_t mode;
};

ModeMetrics run_unit(const ExperimentSpec& spec, const CorpusEntry& entry, std::size_t pi,
                     const InstrumentationConfig& cfg, std::size_t mi,
                     std::uint64_t baseline_retired, std::uint64_t baseline_exit) {
  ModeMetrics m;
  m.program = entry.name;
  m.mode = cfg.label();
  m.block_count = entry.block_count;
  m.function_count = entry.function_count;
  m.avg_block_size = entry.avg_block_size;

  const auto plan = plan_for(entry.program, cfg);
  const auto inst = instrument(entry.program, plan, cfg);
  m.injected = inst.stats.injected;
  m.modified = inst.stats.modified;
  m.check_sites = inst.stats.check_sites;
  m.static_overhead = inst.stats.static_size_ratio() - 1.0;
  const auto image = link_program(inst.program, inst.plan, cfg);

  TrialOptions opts;
  opts.stack_bytes = spec.stack_bytes;
  opts.budget = spec.budget;
  const auto benign = run_trial(image, AttackSchedule::none(), spec.seed, opts);
  if (benign.outcome != Outcome::kCleanExit)
    throw HarnessError("benign run does not exit cleanly");
  m.dynamic_overhead = baseline_retired
                           ? static_cast<double>(benign.program_retired) /
                                     static_cast<double>(baseline_retired) -
                                 1.0
                           : 0.0;
  opts.window = std::make_pair(benign.window_begin, benign.window_end);

  std::vector<std::uint64_t> delays;
  std::size_t crashes = 0;
  for (std::size_t t = 0; t < spec.trials; ++t) {
    const auto r = run_trial(image, spec.attack, trial_seed(spec.seed, pi, mi, t), opts);
    if (r.outcome == Outcome::kCrash) {
      ++crashes;
      delays.push_back(r.aex_before_crash);
      ++m.crash_reasons[to_string(*r.crash_reason)];
    }
    if (r.entered_block_after_attacked) ++m.block_violations;
  }
  m.trials = spec.trials;
  if (spec.trials) {
    m.crash_rate = static_cast<double>(crashes) / static_cast<double>(spec.trials);
    m.entered_block_rate =
        static_cast<double>(m.block_violations) / static_cast<double>(spec.trials);
  }
  std::sort(delays.begin(), delays.end());
  if (!delays.empty()) {
    double sum = 0;
    for (auto d : delays) sum += static_cast<double>(d);
    m.mean_delay = sum / static_cast<double>(delays.size());
    m.p50_delay = percentile(delays, 0.5);
    m.p90_delay = percentile(delays, 0.9);
    m.max_delay = static_cast<double>(delays.back());
  }

  opts.window.reset();
  for (std::size_t b = 0; b < spec.benign_runs; ++b) {
    const auto r = run_trial(image, AttackSchedule::none(),
                             trial_seed(spec.seed, pi, mi, (1ULL << 40) + b), opts);
    if (r.outcome != Outcome::kCleanExit || r.exit_value != baseline_exit) ++m.false_positives;
  }
  m.benign_runs = spec.benign_runs;
  return m;
}

}  // namespace

std::uint64_t trial_seed(std::uint64_t base, std::size_t program, std::size_t mode,
                         std::uint64_t trial) {
  std::uint64_t h = splitmix(base);
  h = splitmix(h ^ program);
  h = splitmix(h ^ (mode + 0x100));
  return splitmix(h ^ trial);
}

CorpusEntry load_corpus_entry(const std::string& path) {
  CorpusEntry e;
  e.source_path = path;
  e.name = std::filesystem::path(path).stem().string();
  const std::string text = read_file(path);
  bool have_expect = false;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("#", 0) != 0) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = line.substr(1, colon - 1);
    key.erase(0, key.find_first_not_of(' '));
    std::string value = line.substr(colon + 1);
    value.erase(0, value.find_first_not_of(' '));
    if (key == "expect-exit") {
      e.expected_exit = std::stoull(value);
      have_expect = true;
    } else if (key == "corpus") {
      e.name = value;
    } else if (key == "entry") {
      e.entry = value;
    }
  }
  if (!have_expect) throw HarnessError(path + ": missing '# expect-exit:' header");
  try {
    e.program = parse_program(text);
  } catch (const ParseError& err) {
    throw HarnessError(path + ": " + err.what());
  }
  if (!e.program.find(e.entry)) throw HarnessError(path + ": no function '" + e.entry + "'");
  e.program.entry = e.entry;
  const auto st = program_block_stats(e.program);
  e.block_count = st.block_count;
  e.avg_block_size = st.avg_block_size;
  e.function_count = e.program.functions.size();
  return e;
}

std::vector<CorpusEntry> load_corpus(const std::string& dir, bool verify) {
  std::vector<std::string> paths;
  std::error_code ec;
  for (const auto& f : std::filesystem::directory_iterator(dir, ec))
    if (f.is_regular_file() && f.path().extension() == ".s") paths.push_back(f.path().string());
  if (ec) throw HarnessError("cannot list corpus directory " + dir + ": " + ec.message());
  std::sort(paths.begin(), paths.end());
  std::vector<CorpusEntry> out;
  for (const auto& p : paths) {
    out.push_back(load_corpus_entry(p));
    if (!verify) continue;
    InstrumentationConfig none;
    none.mode = Mode::kNone;
    const auto r = run_trial(out.back().program, SecondStackPlan{}, none, AttackSchedule::none(), 1);
    if (r.outcome != Outcome::kCleanExit || (r.exit_value & 0xff) != out.back().expected_exit)
      throw HarnessError(out.back().name + ": uninstrumented run gives " +
                         std::to_string(r.exit_value) + ", expected " +
                         std::to_string(out.back().expected_exit));
  }
  return out;
}

void ExperimentSpec::validate() const {
  if (trials < 1) throw HarnessError("trials must be >= 1");
  if (modes.empty()) throw HarnessError("no modes to run");
  if (attack.interval < 1) throw HarnessError("attack interval must be >= 1");
  if (P < 1) throw HarnessError("P must be >= 1");
}

ExperimentSpec ExperimentSpec::from_json(const std::string& text) {
  try {
    auto s = spec_from_json(nlohmann::json::parse(text));
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw HarnessError(std::string("bad experiment spec: ") + e.what());
  } catch (const InstrumentError& e) {
    throw HarnessError(std::string("bad experiment spec: ") + e.what());
  } catch (const LayoutError& e) {
    throw HarnessError(std::string("bad experiment spec: ") + e.what());
  }
}

std::string ExperimentSpec::to_json() const { return spec_to_ojson(*this).dump(2); }

const ModeMetrics* ExperimentReport::find(const std::string& program,
                                          const std::string& mode) const {
  for (const auto& r : rows)
    if (r.program == program && r.mode == mode) return &r;
  return nullptr;
}

std::vector<std::string> ExperimentReport::programs() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.program) == out.end()) out.push_back(r.program);
  return out;
}

std::vector<std::string> ExperimentReport::modes() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.mode) == out.end()) out.push_back(r.mode);
  return out;
}

ExperimentReport run_experiment(const ExperimentSpec& spec,
                                const std::vector<CorpusEntry>& corpus) {
  spec.validate();
  std::vector<const CorpusEntry*> chosen;
  if (spec.programs.empty()) {
    for (const auto& e : corpus) chosen.push_back(&e);
  } else {
    for (const auto& name : spec.programs) {
      auto it = std::find_if(corpus.begin(), corpus.end(),
                             [&](const CorpusEntry& e) { return e.name == name; });
      if (it == corpus.end()) throw HarnessError("no corpus program '" + name + "'");
      chosen.push_back(&*it);
    }
  }

  std::vector<InstrumentationConfig> modes = spec.modes;
  for (auto& m : modes) {
    m.addressing = spec.addressing;
    m.P = spec.P;
  }

  // Uninstrumented baseline per program: executed instructions and exit value.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> baseline(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    InstrumentationConfig none;
    none.mode = Mode::kNone;
    none.addressing = spec.addressing;
    TrialOptions opts;
    opts.stack_bytes = spec.stack_bytes;
    opts.budget = spec.budget;
    const auto r = run_trial(chosen[i]->program, SecondStackPlan{}, none,
                             AttackSchedule::none(), spec.seed, opts);
    if (r.outcome != Outcome::kCleanExit)
      throw HarnessError(chosen[i]->name + ": uninstrumented run does not exit cleanly");
    baseline[i] = {r.program_retired, r.exit_value};
  }

  std::vector<Unit> units;
  for (std::size_t p = 0; p < chosen.size(); ++p)
    for (std::size_t m = 0; m < modes.size(); ++m) units.push_back({p, m});
  std::vector<ModeMetrics> results(units.size());

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::string first_error;
  auto worker = [&]() {
    for (std::size_t u; (u = next.fetch_add(1)) < units.size();) {
      const auto [p, m] = units[u];
      try {
        results[u] = run_unit(spec, *chosen[p], p, modes[m], m, baseline[p].first,
                              baseline[p].second);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (first_error.empty())
          first_error = "(" + chosen[p]->name + ", " + modes[m].label() + "): " + e.what();
        next = units.size();
      }
    }
  };
  unsigned n = spec.threads ? spec.threads : std::max(1u, std::thread::hardware_concurrency());
  n = std::min<unsigned>(n, static_cast<unsigned>(std::max<std::size_t>(units.size(), 1)));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (!first_error.empty()) throw HarnessError(first_error);

  ExperimentReport report;
  report.spec = spec;
  report.spec.modes = modes;
  report.rows = std::move(results);
  return report;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::kJson;
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "markdown" || s == "md") return ReportFormat::kMarkdown;
  throw HarnessError("unknown report format '" + s + "'");
}

std::string render_report(const ExperimentReport& r, ReportFormat f) {
  switch (f) {
    case ReportFormat::kJson: {
      ojson j;
      j["spec"] = spec_to_ojson(r.spec);
      j["notes"] = {"dynamic_overhead is an executed-instruction proxy, not wall-clock time",
                    "varys(I) columns model the AEX check only (no cache eviction or "
                    "co-location)"};
      ojson rows = ojson::array();
      for (const auto& m : r.rows) rows.push_back(metrics_to_ojson(m));
      j["results"] = rows;
      return j.dump(2) + "\n";
    }
    case ReportFormat::kCsv: {
      std::string out = "program,mode,metric,value\n";
      for (const auto& m : r.rows)
        for (const auto& d : metric_defs())
          out += m.program + "," + m.mode + "," + d.name + "," + format_number(d.get(m)) + "\n";
      return out;
    }
    case ReportFormat::kMarkdown: {
      std::ostringstream s;
      s << "# Experiment report\n\n"
        << "Dynamic overhead is an executed-instruction proxy. Varys columns model the AEX "
           "check only.\n";
      const auto programs = r.programs();
      const auto modes = r.modes();
      if (r.rows.empty()) return s.str();
      for (const auto& d : metric_defs()) {
        if (!d.markdown) continue;
        s << "\n## " << d.name << "\n\n| program | avg block |";
        for (const auto& m : modes) s << " " << m << " |";
        s << "\n|---|---:|";
        for (std::size_t i = 0; i < modes.size(); ++i) s << "---:|";
        s << "\n";
        for (const auto& p : programs) {
          const ModeMetrics* any = nullptr;
          for (const auto& m : modes)
            if ((any = r.find(p, m))) break;
          s << "| " << p << " | " << format_number(any ? any->avg_block_size : 0.0) << " |";
          for (const auto& m : modes) {
            const auto* row = r.find(p, m);
            s << " " << (row ? format_number(d.get(*row)) : "-") << " |";
          }
          s << "\n";
        }
      }
      return s.str();
    }
  }
  return {};
}

void emit_report(const ExperimentReport& r, ReportFormat f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw HarnessError("cannot write " + path);
  out << render_report(r, f);
  if (!out) throw HarnessError("write to " + path + " failed");
}

ExperimentReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ExperimentReport r;
    r.spec = spec_from_json(j.at("spec"));
    for (const auto& row : j.at("results")) r.rows.push_back(metrics_from_json(row));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw HarnessError(std::string("bad report: ") + e.what());
  }
}

std::vector<Comparison> compare_modes(const ExperimentReport& r, const std::string& qs_mode,
                                      const std::string& baseline_mode) {
  const auto modes = r.modes();
  for (const auto& m : {qs_mode, baseline_mode})
    if (std::find(modes.begin(), modes.end(), m) == modes.end())
      throw HarnessError("report has no '" + m + "' column");
  std::vector<Comparison> out;
  auto ratio = [](double a, double b) {
    if (a == b) return 1.0;
    return b == 0 ? std::numeric_limits<double>::infinity() : a / b;
  };
  for (const auto& p : r.programs()) {
    const auto* q = r.find(p, qs_mode);
    const auto* v = r.find(p, baseline_mode);
    if (!q || !v) continue;
    Comparison c;
    c.program = p;
    c.avg_block_size = q->avg_block_size;
    c.delay_qs = q->mean_delay;
    c.delay_varys = v->mean_delay;
    c.dyn_qs = q->dynamic_overhead;
    c.dyn_varys = v->dynamic_overhead;
    c.delay_ratio = ratio(c.delay_qs, c.delay_varys);
    c.overhead_ratio = ratio(c.dyn_qs, c.dyn_varys);
    c.verdict = c.delay_qs <= 1.5 * c.delay_varys && c.dyn_qs < c.dyn_varys;
    out.push_back(c);
  }
  return out;
}

std::string render_comparison(const std::vector<Comparison>& cs) {
  std::ostringstream s;
  s << "| program | avg block | delay qs | delay varys(4) | dyn qs | dyn varys(4) | verdict |\n"
    << "|---|---:|---:|---:|---:|---:|---|\n";
  for (const auto& c : cs)
    s << "| " << c.program << " | " << format_number(c.avg_block_size) << " | "
      << format_number(c.delay_qs) << " | " << format_number(c.delay_varys) << " | "
      << format_number(c.dyn_qs) << " | " << format_number(c.dyn_varys) << " | "
      << (c.verdict ? "comparable-security, lower-overhead" : "flagged") << " |\n";
  return s.str();
}

}  // namespace qshield
