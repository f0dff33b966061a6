#include "chunkflow/core/rng.hpp"

#include <sstream>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << '\n' << normal_ << '\n' << uniform_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_ >> uniform_;
  if (!is) throw FormatError("corrupt RNG state");
}

}  // namespace chunkflow
