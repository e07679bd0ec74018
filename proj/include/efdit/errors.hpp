#pragma once

#include <stdexcept>
#include <string>

namespace efdit {

// Error taxonomy shared by the library and the CLI exit-code mapping:
//   ConfigError   -> exit 2   bad configuration value or file
//   IoError       -> exit 3   missing/truncated/malformed files
//   NumericError  -> exit 4   NaN/Inf or invalid numeric operand
//   ContractError -> exit 5   caller violated an operation contract
//   DimError      -> exit 5   shape mismatch (a contract violation)
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimError : ContractError {
    explicit DimError(const std::string& msg) : ContractError(msg) {}
};

}  // namespace efdit
