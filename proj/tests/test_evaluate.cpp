#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "memopt/evaluate.hpp"
#include "memopt/synthetic.hpp"

using namespace memopt;
using eval::AllocationClass;

TEST_CASE("allocation class boundaries follow the <=/< chain") {
  CHECK(eval::classify_allocation(120, 25) == AllocationClass::massive_over);  // 120 > 100
  CHECK(eval::classify_allocation(50, 25) == AllocationClass::well);           // set = 2*req
  CHECK(eval::classify_allocation(25, 25) == AllocationClass::well);           // set = req
  CHECK(eval::classify_allocation(75, 25) == AllocationClass::severe_over);    // set = 3*req
  CHECK(eval::classify_allocation(100, 25) == AllocationClass::extreme_over);  // set = 4*req
  CHECK(eval::classify_allocation(24.999, 25) == AllocationClass::under);
  CHECK(eval::classify_allocation(60, 25) == AllocationClass::severe_over);
}

TEST_CASE("non-positive req is rejected") {
  try {
    eval::classify_allocation(10, 0);
    FAIL("expected NonPositiveReq");
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::NonPositiveReq);
  }
}

TEST_CASE("the five classes partition (0, inf)") {
  Rng rng(10);
  for (int i = 0; i < 10000; ++i) {
    const double req = rng.uniform_real(0.001, 200);
    const double set = rng.uniform_real(0, 1000);
    const auto c = eval::classify_allocation(set, req);
    // Independent membership checks straight from the interval definitions.
    const bool in_under = set < req;
    const bool in_well = req <= set && set <= 2 * req;
    const bool in_severe = 2 * req < set && set <= 3 * req;
    const bool in_extreme = 3 * req < set && set <= 4 * req;
    const bool in_massive = set > 4 * req;
    CHECK(in_under + in_well + in_severe + in_extreme + in_massive == 1);
    switch (c) {
      case AllocationClass::under: CHECK(in_under); break;
      case AllocationClass::well: CHECK(in_well); break;
      case AllocationClass::severe_over: CHECK(in_severe); break;
      case AllocationClass::extreme_over: CHECK(in_extreme); break;
      case AllocationClass::massive_over: CHECK(in_massive); break;
    }
  }
}

namespace {

trace::TraceDataset five_record_dataset() {
  // req = 10 GB for every record; baseline varies.
  trace::TraceDataset ds;
  for (int i = 0; i < 5; ++i) {
    trace::BuildRecord r;
    r.time = 1000 + i;
    r.max_rss_bytes = static_cast<std::int64_t>(10.0 * trace::kBytesPerGb);
    r.baseline_assigned_gb = 64;
    r.duration_s = 3600.0;
    ds.records.push_back(r);
  }
  return ds;
}

predictor::RefinementDecision decision_with_final(double final_gb, double original_gb = 64) {
  predictor::RefinementDecision d;
  d.original_gb = original_gb;
  d.raw_prediction_gb = final_gb;
  d.safeguarded_gb = final_gb;
  d.final_gb = final_gb;
  d.strategy = predictor::Strategy::ensemble;
  return d;
}

}  // namespace

TEST_CASE("one record per class gives 0.2 shares each") {
  const auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions = {
      decision_with_final(5),   // under
      decision_with_final(15),  // well
      decision_with_final(25),  // severe
      decision_with_final(35),  // extreme
      decision_with_final(45),  // massive
  };
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2);
  for (int i = 0; i < 5; ++i) {
    CHECK(rep.refined.shares.share(static_cast<AllocationClass>(i)) == Catch::Approx(0.2));
  }
  // Shares sum to one.
  double total = 0;
  for (int i = 0; i < 5; ++i) total += rep.refined.shares.share(static_cast<AllocationClass>(i));
  CHECK(total == Catch::Approx(1.0));
  // Conservation: classified + zero_req = total records.
  CHECK(rep.refined.shares.classified + rep.zero_req_rows == 5);
}

TEST_CASE("zero-req records are reported separately, never classified") {
  auto ds = five_record_dataset();
  ds.records[2].max_rss_bytes = 0;
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(15));
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2);
  CHECK(rep.zero_req_rows == 1);
  CHECK(rep.refined.shares.classified == 4);
}

TEST_CASE("cardinality mismatch is rejected") {
  const auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions(3, decision_with_final(15));
  try {
    eval::evaluate_strategy(ds, decisions, 1.2);
    FAIL("expected CardinalityMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::CardinalityMismatch);
  }
}

TEST_CASE("passthrough decisions produce zero savings") {
  const auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions;
  for (const auto& r : ds.records) {
    decisions.push_back(predictor::passthrough_decision(r.baseline_assigned_gb, ""));
  }
  const auto s = eval::savings_summary(decisions, ds.records, 1.2);
  CHECK(s.mean_gb == 0.0);
  CHECK(s.sigma_gb == 0.0);
}

TEST_CASE("savings summary matches a naive per-row recomputation") {
  const auto ds = synth::make_trace({.n_rows = 300, .seed = 51});
  std::vector<predictor::RefinementDecision> decisions;
  Rng rng(4);
  for (const auto& r : ds.records) {
    decisions.push_back(
        decision_with_final(rng.uniform_real(0.5, r.baseline_assigned_gb), r.baseline_assigned_gb));
  }
  const double sf = 1.2;
  const auto s = eval::savings_summary(decisions, ds.records, sf);

  double sum = 0;
  std::vector<double> savings;
  double potential = 0;
  std::int64_t under = 0, classified = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const double sv = ds.records[i].baseline_assigned_gb - decisions[i].final_gb;
    savings.push_back(sv);
    sum += sv;
    const double req = ds.records[i].max_rss_gb();
    if (req > 0) {
      classified++;
      if (decisions[i].final_gb < req) under++;
      potential += std::max(decisions[i].final_gb - sf * req, 0.0);
    }
  }
  const double mean = sum / static_cast<double>(savings.size());
  double var = 0;
  for (double v : savings) var += (v - mean) * (v - mean);
  CHECK(s.mean_gb == Catch::Approx(mean));
  CHECK(s.sigma_gb == Catch::Approx(std::sqrt(var / static_cast<double>(savings.size()))));
  CHECK(s.remaining_potential_gb ==
        Catch::Approx(potential / static_cast<double>(decisions.size())));
  CHECK(s.underalloc_rate ==
        Catch::Approx(static_cast<double>(under) / static_cast<double>(classified)));
}

TEST_CASE("GB-hour arithmetic") {
  auto ds = five_record_dataset();
  // 40 GB saved over 1 h -> 40 GB·h.
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(24));  // 64-24 = 40
  const auto tl = eval::gbh_timeline(decisions, ds.records);
  REQUIRE(tl.points.size() == 5);
  CHECK(tl.points[0].gbh == Catch::Approx(40.0));
  CHECK(tl.total_gbh == Catch::Approx(200.0));
  for (std::size_t i = 1; i < tl.points.size(); ++i) {
    CHECK(tl.points[i].cumulative_gbh >= tl.points[i - 1].cumulative_gbh);
  }
}

TEST_CASE("zero savings yield a flat cumulative line") {
  auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(64));
  const auto tl = eval::gbh_timeline(decisions, ds.records);
  CHECK(tl.total_gbh == 0.0);
  for (const auto& p : tl.points) CHECK(p.cumulative_gbh == 0.0);
}

TEST_CASE("mixed durations: 10GBx2h + 5GBx1h + 0x5h = 25 GB·h") {
  trace::TraceDataset ds;
  const double durations[] = {7200, 3600, 18000};
  const double saved[] = {10, 5, 0};
  for (int i = 0; i < 3; ++i) {
    trace::BuildRecord r;
    r.time = 100 + i;
    r.max_rss_bytes = trace::kBytesPerGb;
    r.baseline_assigned_gb = 50;
    r.duration_s = durations[i];
    ds.records.push_back(r);
  }
  std::vector<predictor::RefinementDecision> decisions;
  for (int i = 0; i < 3; ++i) decisions.push_back(decision_with_final(50 - saved[i], 50));
  const auto tl = eval::gbh_timeline(decisions, ds.records);
  CHECK(tl.total_gbh == Catch::Approx(25.0));
}

TEST_CASE("records without durations are excluded and counted") {
  auto ds = five_record_dataset();
  ds.records[1].duration_s.reset();
  ds.records[3].duration_s.reset();
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(24));
  const auto tl = eval::gbh_timeline(decisions, ds.records);
  CHECK(tl.points.size() == 3);
  CHECK(tl.excluded_no_duration == 2);
}

TEST_CASE("plot bundles carry headers and per-record scatter rows") {
  const auto dir = std::filesystem::temp_directory_path() / "memopt_plot_test";
  std::filesystem::remove_all(dir);

  const auto ds = synth::make_trace({.n_rows = 120, .seed = 61});
  std::vector<predictor::RefinementDecision> decisions;
  for (const auto& r : ds.records) {
    auto d = decision_with_final(std::min(r.max_rss_gb() * 1.2, r.baseline_assigned_gb),
                                 r.baseline_assigned_gb);
    d.safeguarded_gb = r.max_rss_gb() * 1.2;
    decisions.push_back(d);
  }
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2);
  const auto tl = eval::gbh_timeline(decisions, ds.records);
  const auto files = eval::emit_plot_data(rep, ds, &tl, dir.string());
  CHECK(files.size() == 6);

  // Clipped scatter must never show set above the baseline.
  std::ifstream scatter(dir / "scatter_clipped.csv");
  std::string header;
  std::getline(scatter, header);
  CHECK(header == "actual_gb,set_gb");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(scatter, line)) {
    if (!line.empty()) rows++;
  }
  CHECK(rows == ds.records.size());

  std::filesystem::remove_all(dir);
}

TEST_CASE("an empty report yields header-only plot files") {
  const auto dir = std::filesystem::temp_directory_path() / "memopt_plot_empty";
  std::filesystem::remove_all(dir);
  eval::AllocationReport rep;
  rep.strategy_name = "ensemble";
  trace::TraceDataset empty;
  const auto files = eval::emit_plot_data(rep, empty, nullptr, dir.string());
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string header, extra;
    CHECK(static_cast<bool>(std::getline(in, header)));
    CHECK_FALSE(header.empty());
    CHECK_FALSE(static_cast<bool>(std::getline(in, extra)));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("rowwise set reduction never grows the over-allocated share") {
  // When every refined set is <= its baseline set, membership in each
  // over-allocation band is monotone, so the combined share cannot rise.
  Rng rng(71);
  const auto ds = synth::make_trace({.n_rows = 400, .seed = 81});
  std::vector<predictor::RefinementDecision> decisions;
  for (const auto& r : ds.records) {
    decisions.push_back(decision_with_final(
        r.baseline_assigned_gb * rng.uniform_real(0.1, 1.0), r.baseline_assigned_gb));
  }
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2);
  CHECK(rep.refined.shares.over_share() <= rep.baseline.shares.over_share() + 1e-12);
}

TEST_CASE("share table renders both columns") {
  const auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(15));
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2, "ensemble");
  const auto table = eval::render_share_table(rep);
  CHECK(table.find("Well allocating") != std::string::npos);
  CHECK(table.find("ensemble") != std::string::npos);
}

TEST_CASE("report JSON exposes shares, savings and reference fields") {
  const auto ds = five_record_dataset();
  std::vector<predictor::RefinementDecision> decisions(5, decision_with_final(15));
  const auto rep = eval::evaluate_strategy(ds, decisions, 1.2);
  const auto j = rep.to_json();
  CHECK(j.contains("baseline"));
  CHECK(j.contains("refined"));
  CHECK(j.contains("reference_production_study"));
  CHECK(j.at("reference_production_study").at("regression_mean_savings_gb").get<double>() == 37.0);
  CHECK(j.at("rows").size() == 5);
}
