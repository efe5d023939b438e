#pragma once

#include <stdexcept>
#include <string>

namespace sdi {

// Exception types map one-to-one onto CLI exit codes.

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed config, missing keys, inconsistent shapes.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// The requested physics cannot be represented on the grid (aliasing, etc).
class PhysicsError : public Error {
public:
  using Error::Error;
};

/// Position graph is disconnected or otherwise unsolvable.
class GraphError : public Error {
public:
  using Error::Error;
};

/// Iterative solver produced non-finite values or blew up.
class DivergenceError : public Error {
public:
  using Error::Error;
};

} // namespace sdi
