#pragma once

namespace tadkd {

// Entry point for the command-line tool; returns the process exit code.
// Kept in the library so tests can drive commands in-process.
int cli_main(int argc, const char* const* argv);

}  // namespace tadkd
