// Writes a deterministic synthetic build trace in the export format, for
// demos and end-to-end runs when no real export is at hand.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "memopt/synthetic.hpp"
#include "memopt/trace.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic build-trace generator"};
  std::string out = "trace.csv";
  memopt::synth::SynthConfig cfg;
  bool no_duration = false;
  app.add_option("--out", out, "Output CSV path");
  app.add_option("--rows", cfg.n_rows, "Number of builds");
  app.add_option("--seed", cfg.seed, "Seed");
  app.add_option("--start-time", cfg.start_time, "First build epoch seconds");
  app.add_flag("--no-duration", no_duration, "Omit the duration column");
  CLI11_PARSE(app, argc, argv);

  cfg.include_duration = !no_duration;
  const auto ds = memopt::synth::make_trace(cfg);
  std::ofstream f(out, std::ios::binary);
  if (!f) {
    std::cerr << "cannot write " << out << "\n";
    return 1;
  }
  memopt::trace::write_canonical_csv(ds, f);
  std::cerr << "wrote " << ds.records.size() << " rows to " << out << "\n";
  return 0;
}
