#pragma once

#include <stdexcept>
#include <string>

namespace deas {

/// Array or tensor dimensions disagree with what an operation expects.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A hyperparameter or configuration value is out of range or unknown.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A file on disk could not be parsed.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a NaN or infinite loss.
struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(std::string which, long step)
      : std::runtime_error("non-finite " + which + " at step " + std::to_string(step)),
        loss_name(std::move(which)),
        step(step) {}
  std::string loss_name;
  long step;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace deas
