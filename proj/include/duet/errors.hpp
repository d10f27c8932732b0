#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace duet {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition (shape, range, schema).
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// Geometric input that has no well-defined result (zero or parallel 6D columns).
class DegeneracyError : public Error {
  public:
    using Error::Error;
};

/// Sequence too short for the requested operation, or context overflow.
class LengthError : public Error {
  public:
    using Error::Error;
};

/// Malformed motion span. `offset` is the token index of the first violation.
class GrammarError : public Error {
  public:
    GrammarError(std::size_t offset, const std::string& what)
        : Error("grammar error at token " + std::to_string(offset) + ": " + what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

  private:
    std::size_t offset_;
};

class TrainingError : public Error {
  public:
    TrainingError(long step, const std::string& what)
        : Error("training error at step " + std::to_string(step) + ": " + what), step_(step) {}
    long step() const noexcept { return step_; }

  private:
    long step_;
};

/// External client (LLM, text-to-motion) failed after exhausting retries.
class ClientError : public Error {
  public:
    using Error::Error;
};

/// Client returned text that does not follow the expected markup.
class ParseError : public Error {
  public:
    using Error::Error;
};

class JudgeError : public Error {
  public:
    using Error::Error;
};

class UsageError : public Error {
  public:
    using Error::Error;
};

}  // namespace duet
