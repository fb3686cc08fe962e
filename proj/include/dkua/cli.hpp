#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dkua/data.hpp"

namespace dkua::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kNumerical = 3,
  kIntegrity = 4,
  kVerification = 5,
};

/// Domain specs for `synth` from JSON: {"domains": [{...}, ...]}. Missing
/// fields keep the DomainSpec defaults; unknown keys are rejected.
std::vector<DomainSpec> parse_synth_spec(const std::string& json_text);

/// Runs one command (argv[0] is the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace dkua::cli
