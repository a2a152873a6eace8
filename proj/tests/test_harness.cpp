#include <gtest/gtest.h>

#include <json.hpp>

#include "qshield/harness.hpp"
#include "test_util.hpp"

using namespace qshield;

namespace {

const std::vector<CorpusEntry>& corpus() {
  static const auto c = load_corpus(QSHIELD_CORPUS_DIR);
  return c;
}

ExperimentSpec small_spec() {
  ExperimentSpec s;
  s.programs = {"bitcount", "strscan"};
  s.modes = {InstrumentationConfig::parse("qs-block"), InstrumentationConfig::parse("varys:4")};
  s.trials = 20;
  s.benign_runs = 5;
  s.seed = 17;
  return s;
}

}  // namespace

TEST(Corpus, LoadsAndVerifies) {
  const auto& c = corpus();
  ASSERT_EQ(c.size(), 8u);
  EXPECT_TRUE(std::is_sorted(c.begin(), c.end(),
                             [](const auto& a, const auto& b) { return a.name < b.name; }));
  double lo = 1e9, hi = 0;
  for (const auto& e : c) {
    EXPECT_GT(e.block_count, 0u);
    EXPECT_EQ(e.entry, "main");
    lo = std::min(lo, e.avg_block_size);
    hi = std::max(hi, e.avg_block_size);
  }
  // The corpus spans small- and large-block profiles.
  EXPECT_LT(lo, 3.0);
  EXPECT_GT(hi, 25.0);
}

TEST(Corpus, MissingExpectationRejected) {
  const auto path = std::filesystem::temp_directory_path() / "qshield_no_expect.s";
  std::ofstream(path) << "main:\n\tmovq\t$1, %rax\n\tretq\n";
  EXPECT_THROW(load_corpus_entry(path.string()), HarnessError);
  std::filesystem::remove(path);
}

TEST(Corpus, WrongExpectationRejected) {
  const auto dir = std::filesystem::temp_directory_path() / "qshield_bad_corpus";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "one.s") << "# expect-exit: 2\nmain:\n\tmovq\t$1, %rax\n\tretq\n";
  EXPECT_THROW(load_corpus(dir.string()), HarnessError);
  EXPECT_EQ(load_corpus(dir.string(), false).size(), 1u);
  std::filesystem::remove_all(dir);
}

TEST(Spec, JsonRoundTrip) {
  auto s = small_spec();
  s.attack = AttackSchedule::random(3, 50);
  const auto back = ExperimentSpec::from_json(s.to_json());
  EXPECT_EQ(back.programs, s.programs);
  ASSERT_EQ(back.modes.size(), 2u);
  EXPECT_EQ(back.modes[1].label(), "varys(4)");
  EXPECT_EQ(back.trials, 20u);
  EXPECT_EQ(back.attack.interval, 3u);
  EXPECT_EQ(back.attack.max_aex, 50u);
  EXPECT_TRUE(back.attack.random_start);
  EXPECT_EQ(back.to_json(), s.to_json());
}

TEST(Spec, Validation) {
  EXPECT_THROW(ExperimentSpec::from_json("{\"trials\": 0}"), HarnessError);
  EXPECT_THROW(ExperimentSpec::from_json("{\"modes\": []}"), HarnessError);
  EXPECT_THROW(ExperimentSpec::from_json("{\"modes\": [\"bogus\"]}"), HarnessError);
  EXPECT_THROW(ExperimentSpec::from_json("{\"attack\": {\"interval\": 0}}"), HarnessError);
  EXPECT_THROW(ExperimentSpec::from_json("[1,2"), HarnessError);
  auto s = small_spec();
  s.programs = {"no_such_program"};
  EXPECT_THROW(run_experiment(s, corpus()), HarnessError);
}

TEST(Experiment, ReproducibleAcrossRunsAndThreads) {
  auto s = small_spec();
  s.threads = 1;
  const auto a = render_report(run_experiment(s, corpus()), ReportFormat::kJson);
  s.threads = 4;
  const auto b = render_report(run_experiment(s, corpus()), ReportFormat::kJson);
  EXPECT_EQ(a, b);
  s.seed = 18;
  EXPECT_NE(a, render_report(run_experiment(s, corpus()), ReportFormat::kJson));
}

TEST(Experiment, MetricsAreConsistent) {
  const auto r = run_experiment(small_spec(), corpus());
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.programs(), (std::vector<std::string>{"bitcount", "strscan"}));
  EXPECT_EQ(r.modes(), (std::vector<std::string>{"qs-block", "varys(4)"}));
  for (const auto& m : r.rows) {
    EXPECT_EQ(m.trials, 20u);
    EXPECT_DOUBLE_EQ(m.crash_rate, 1.0) << m.program << " " << m.mode;
    EXPECT_EQ(m.false_positives, 0u);
    EXPECT_LE(m.p50_delay, m.p90_delay);
    EXPECT_LE(m.p90_delay, m.max_delay);
    EXPECT_LE(m.mean_delay, m.max_delay);
    EXPECT_GT(m.dynamic_overhead, 0.0);
    std::size_t reasons = 0;
    for (const auto& [k, v] : m.crash_reasons) reasons += v;
    EXPECT_EQ(reasons, 20u);
  }
  EXPECT_EQ(r.find("bitcount", "varys(4)")->crash_reasons.count("varys_abort"), 1u);
  EXPECT_EQ(r.find("bitcount", "qs-block")->block_violations, 0u);
  EXPECT_EQ(r.find("bitcount", "qs-nothing"), nullptr);
}

TEST(Experiment, VarysDelayNonDecreasingInInterval) {
  ExperimentSpec s;
  s.programs = {"feistel"};
  for (const char* m : {"varys:1", "varys:4", "varys:16"})
    s.modes.push_back(InstrumentationConfig::parse(m));
  s.trials = 200;
  s.benign_runs = 1;
  const auto r = run_experiment(s, corpus());
  EXPECT_LE(r.find("feistel", "varys(1)")->mean_delay, r.find("feistel", "varys(4)")->mean_delay);
  EXPECT_LE(r.find("feistel", "varys(4)")->mean_delay, r.find("feistel", "varys(16)")->mean_delay);
}

TEST(Report, JsonRoundTripAndFormats) {
  const auto r = run_experiment(small_spec(), corpus());
  const auto json = render_report(r, ReportFormat::kJson);
  const auto back = report_from_json(json);
  EXPECT_EQ(render_report(back, ReportFormat::kJson), json);
  EXPECT_EQ(render_report(back, ReportFormat::kCsv), render_report(r, ReportFormat::kCsv));

  const auto j = nlohmann::json::parse(json);
  EXPECT_EQ(j["results"].size(), 4u);
  EXPECT_NE(j["notes"].dump().find("proxy"), std::string::npos);

  const auto csv = render_report(r, ReportFormat::kCsv);
  EXPECT_EQ(csv.rfind("program,mode,metric,value\n", 0), 0u);
  EXPECT_NE(csv.find("bitcount,qs-block,crash_rate,1\n"), std::string::npos);

  const auto md = render_report(r, ReportFormat::kMarkdown);
  EXPECT_NE(md.find("| program | avg block | qs-block | varys(4) |"), std::string::npos);
  EXPECT_NE(md.find("AEX check only"), std::string::npos);

  EXPECT_THROW(report_from_json("{}"), HarnessError);
  EXPECT_THROW(report_format_from_string("xml"), HarnessError);
}

TEST(Report, EmptyRendersHeaderOnly) {
  ExperimentReport empty;
  EXPECT_EQ(render_report(empty, ReportFormat::kCsv), "program,mode,metric,value\n");
  const auto md = render_report(empty, ReportFormat::kMarkdown);
  EXPECT_EQ(md.find("| program"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(render_report(empty, ReportFormat::kJson))["results"].size(),
            0u);
}

TEST(Compare, IdenticalColumnsGiveUnitRatios) {
  auto r = run_experiment(small_spec(), corpus());
  for (auto& m : r.rows)
    if (m.mode == "varys(4)") {
      const auto* q = r.find(m.program, "qs-block");
      const std::string keep = m.mode;
      m = *q;
      m.mode = keep;
    }
  for (const auto& c : compare_modes(r)) {
    EXPECT_DOUBLE_EQ(c.delay_ratio, 1.0);
    EXPECT_DOUBLE_EQ(c.overhead_ratio, 1.0);
    EXPECT_FALSE(c.verdict);  // overhead not strictly lower
  }
  EXPECT_THROW(compare_modes(r, "qs-block", "varys(8)"), HarnessError);
}

TEST(Compare, RendersVerdicts) {
  const auto r = run_experiment(small_spec(), corpus());
  const auto cs = compare_modes(r);
  ASSERT_EQ(cs.size(), 2u);
  const auto text = render_comparison(cs);
  EXPECT_NE(text.find("| bitcount |"), std::string::npos);
  for (const auto& c : cs) EXPECT_LT(c.dyn_qs, c.dyn_varys);
}

TEST(Seeds, StableAndDistinct) {
  EXPECT_EQ(trial_seed(1, 2, 3, 4), trial_seed(1, 2, 3, 4));
  std::set<std::uint64_t> seen;
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t m = 0; m < 4; ++m)
      for (std::uint64_t t = 0; t < 64; ++t) seen.insert(trial_seed(1, p, m, t));
  EXPECT_EQ(seen.size(), 4u * 4u * 64u);
}
