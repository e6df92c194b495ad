#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lmt {

// Base for every error raised by the library. `kind()` is stable and is what
// the command-line tool maps to exit codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { kInvalidArgument, kIo, kFormat, kNumeric };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(Kind::kInvalidArgument, what) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(Kind::kIo, path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Malformed input. `line` is 1-based; 0 when the problem is not tied to a line.
class FormatError : public Error {
 public:
  FormatError(const std::string& source, std::size_t line, const std::string& what)
      : Error(Kind::kFormat, line ? source + ":" + std::to_string(line) + ": " + what
                                  : source + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Kind::kNumeric, what) {}
};

}  // namespace lmt
