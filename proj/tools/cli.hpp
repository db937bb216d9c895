#pragma once

// The `sbc` command line: train, compress, eval, sweep, priors.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 bad configuration, flags or
// input data, 3 training diverged, 4 pruning would empty a layer.

#include <ostream>

namespace sbc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitBadInput = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitEmptyLayer = 4;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sbc::cli
