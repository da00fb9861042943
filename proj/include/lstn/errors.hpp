#pragma once

#include <stdexcept>
#include <string>

namespace lstn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when a log-space quantity turns non-finite; carries the offending
// turn (or -1 when not turn-specific).
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, int turn = -1)
      : Error(turn >= 0 ? what + " (turn " + std::to_string(turn) + ")" : what),
        turn_(turn) {}
  int turn() const { return turn_; }

 private:
  int turn_;
};

class InferenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace lstn
