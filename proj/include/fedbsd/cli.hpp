#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fedbsd::cli {

enum ExitCode : int {
    kOk = 0,
    kConfigError = 1,
    kDiverged = 2,
    kGoldenMismatch = 3,
};

// Entry point behind the fedbsd executable. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::uint64_t fnv1a(const std::string& bytes) noexcept;

}  // namespace fedbsd::cli
