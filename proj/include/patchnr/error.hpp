#pragma once

#include <stdexcept>
#include <string>

namespace patchnr {

/// Runtime failure tagged with the module that raised it.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

}  // namespace patchnr
