#pragma once

#include <stdexcept>
#include <string>

namespace mde {

/// Invalid tensor/network shapes (mismatched extents, non-divisible inputs).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration values (presets, loss constants, CLI options).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Problems with datasets, manifests and rasters.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Using stateful components before they are initialized.
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File format / serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training aborted (non-finite loss).
struct TrainAbort : std::runtime_error {
  TrainAbort(std::size_t step, const std::string& what)
      : std::runtime_error(what), step(step) {}
  std::size_t step;
};

}  // namespace mde
