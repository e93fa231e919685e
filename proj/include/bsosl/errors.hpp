#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace bsosl {

/// Tensor or batch dimensions that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid experiment or component configuration. Maps to CLI exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure reading or writing a file; the message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Local training produced a non-finite loss. Maps to CLI exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::optional<std::size_t> client_id, std::size_t epoch)
      : std::runtime_error(describe(client_id, epoch)),
        client_id_(client_id),
        epoch_(epoch) {}

  std::optional<std::size_t> client_id() const { return client_id_; }
  std::size_t epoch() const { return epoch_; }

  DivergenceError with_client(std::size_t client_id) const {
    return DivergenceError(client_id, epoch_);
  }

 private:
  static std::string describe(std::optional<std::size_t> client_id,
                              std::size_t epoch) {
    std::string msg = "non-finite training loss";
    if (client_id) msg += " on client " + std::to_string(*client_id);
    msg += " in epoch " + std::to_string(epoch);
    return msg;
  }

  std::optional<std::size_t> client_id_;
  std::size_t epoch_;
};

}  // namespace bsosl
