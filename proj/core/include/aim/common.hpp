#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace aim {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or arity violation (names the operation and the offending shapes).
struct ShapeError : Error {
  using Error::Error;
};

/// NaN or Inf produced where only finite reals are allowed.
struct NumericError : Error {
  using Error::Error;
};

/// Bad argument value (label out of range, invalid enum string, ...).
struct ValueError : Error {
  using Error::Error;
};

/// Malformed text input; message carries the line number when known.
struct ParseError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Shortest decimal that round-trips the exact 64-bit value.
std::string format_double(double v);
double parse_double(const std::string& s);

/// Deterministic PRNG used for every stochastic choice in the project.
/// gaussian() is a hand-rolled Box-Muller over the raw 64-bit stream so the
/// draw sequence is pinned by this codebase, not by the platform's libstdc++.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();   // [0, 1)
  double gaussian();  // standard normal

  /// Independent child stream for a named purpose ("net", "data", ...).
  Rng derive(const std::string& tag) const;

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace aim
