#pragma once

// Run-directory summarizer: verdicts, fitted constants, text sparklines of
// the recorded curves, and the artifact inventory.

#include <string>

namespace mflab {

// Prints the summary to standard output. Throws mfl::ValidationError when
// the manifest is missing or corrupt. Returns the process exit code (0).
int report_run(const std::string& dir);

}  // namespace mflab
