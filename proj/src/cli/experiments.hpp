#pragma once

// Experiment drivers: each kind builds its inputs from the configuration,
// runs the corresponding module pipeline, writes artifacts plus a manifest
// into the output directory, and reports a verdict through the exit code.

#include "config.hpp"

namespace mflab {

// Exit code contract: 0 = success, 4 = the experiment ran but its
// verification verdict is FAIL. Validation problems throw
// mfl::ValidationError and numerical blow-ups throw mfl::DivergenceError;
// the caller maps those to exit codes 2 and 3.
int run_experiment(const ExperimentConfig& cfg);

// The m <= 6 permutation-oracle suite plus the dimension-1 sliced/exact
// agreement check. Prints one summary line; writes selftest.json when
// output_dir is nonempty. Returns 0 or 4.
int run_w2_selftest(const std::string& output_dir);

}  // namespace mflab
