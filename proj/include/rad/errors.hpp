#pragma once

#include <stdexcept>
#include <string>

namespace rad {

// Root of every error the engine throws on a violated contract or bad input.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class CompatibilityError : public Error { using Error::Error; };
class EvaluationError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class InstrumentationError : public Error { using Error::Error; };

}  // namespace rad
