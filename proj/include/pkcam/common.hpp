#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pkcam {

// Error taxonomy. The CLI maps ConfigError -> exit 2 and FormatError -> exit 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches; message names the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Illegal module or run configuration (bad reduction ratio, even kernel, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API contract violations (double backward, empty stack, kernel/stack mismatch).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed input data (dataset bundles, checkpoints); carries the byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Non-finite values produced where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace pkcam
