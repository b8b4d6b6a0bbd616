#pragma once

#include <iosfwd>

namespace learn {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point for the `learn` tool. Returns 0 on success, 1 on a domain
/// error and 2 on a usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace learn
