#pragma once

// End-to-end experiments over the bundled corpus: attacked trials, benign
// (false-positive) runs and overhead proxies per (program, mode), plus
// report rendering and the mode comparison.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qshield/asm_ir.hpp"
#include "qshield/instrument.hpp"
#include "qshield/machine_sim.hpp"

namespace qshield {

class HarnessError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CorpusEntry {
  std::string name;
  std::string source_path;
  std::string entry = "main";
  std::uint64_t expected_exit = 0;  // from the "# expect-exit:" header
  std::size_t block_count = 0;
  double avg_block_size = 0.0;
  std::size_t function_count = 0;
  Program program;
};

CorpusEntry load_corpus_entry(const std::string& path);
// Every *.s under dir, sorted by name. Each expected value is checked
// against an uninstrumented run.
std::vector<CorpusEntry> load_corpus(const std::string& dir, bool verify = true);

struct ExperimentSpec {
  std::vector<std::string> programs;  // empty: whole corpus
  std::vector<InstrumentationConfig> modes;
  std::size_t trials = 100;
  std::size_t benign_runs = 1000;
  AttackSchedule attack = AttackSchedule::random(1, 1000);
  std::uint64_t seed = 1;
  AddressingMode addressing = AddressingMode::la48();
  std::size_t P = 64;
  std::size_t stack_bytes = 64 * 1024;
  std::uint64_t budget = 5'000'000;
  unsigned threads = 0;  // 0: hardware concurrency

  static ExperimentSpec from_json(const std::string& text);
  std::string to_json() const;
  void validate() const;
};

struct ModeMetrics {
  std::string program;
  std::string mode;
  std::size_t trials = 0;
  double crash_rate = 0.0;
  double mean_delay = 0.0;  // AEXs before the crash, over crashing trials
  double p50_delay = 0.0;
  double p90_delay = 0.0;
  double max_delay = 0.0;
  double entered_block_rate = 0.0;
  std::size_t block_violations = 0;
  std::map<std::string, std::size_t> crash_reasons;
  double static_overhead = 0.0;   // injected / original instructions
  double dynamic_overhead = 0.0;  // executed-instruction ratio vs none, minus 1
  std::size_t benign_runs = 0;
  std::size_t false_positives = 0;
  std::size_t injected = 0;
  std::size_t modified = 0;
  std::size_t check_sites = 0;
  std::size_t block_count = 0;
  std::size_t function_count = 0;
  double avg_block_size = 0.0;
};

struct ExperimentReport {
  ExperimentSpec spec;
  std::vector<ModeMetrics> rows;  // sorted by (program, mode order in spec)

  const ModeMetrics* find(const std::string& program, const std::string& mode) const;
  std::vector<std::string> programs() const;
  std::vector<std::string> modes() const;
};

ExperimentReport run_experiment(const ExperimentSpec& spec,
                                const std::vector<CorpusEntry>& corpus);

enum class ReportFormat : std::uint8_t { kJson, kCsv, kMarkdown };
ReportFormat report_format_from_string(const std::string& s);
std::string render_report(const ExperimentReport& r, ReportFormat f);
void emit_report(const ExperimentReport& r, ReportFormat f, const std::string& path);
ExperimentReport report_from_json(const std::string& text);

struct Comparison {
  std::string program;
  double avg_block_size = 0.0;
  double delay_qs = 0.0, delay_varys = 0.0;
  double dyn_qs = 0.0, dyn_varys = 0.0;
  double delay_ratio = 1.0;     // qs / varys
  double overhead_ratio = 1.0;  // qs / varys
  bool verdict = false;         // comparable security at lower overhead
};

// QS-block against Varys(4) for every program that has both columns.
std::vector<Comparison> compare_modes(const ExperimentReport& r,
                                      const std::string& qs_mode = "qs-block",
                                      const std::string& baseline_mode = "varys(4)");
std::string render_comparison(const std::vector<Comparison>& cs);

// Seed for trial `trial` of (program, mode); stable across runs and thread counts.
std::uint64_t trial_seed(std::uint64_t base, std::size_t program, std::size_t mode,
                         std::uint64_t trial);

}  // namespace qshield
