#pragma once

#include <atomic>
#include <iosfwd>
#include <string>
#include <vector>

namespace fablelm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitCancelled = 130;

/// Runs one subcommand. `args` excludes the program name. Every completed
/// run writes a manifest next to its outputs.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Set by SIGINT/SIGTERM once install_signal_handlers() has run; long loops
/// poll it, stop, and flush what they have.
std::atomic<bool>& cancel_flag();
void install_signal_handlers();

}  // namespace fablelm::cli
