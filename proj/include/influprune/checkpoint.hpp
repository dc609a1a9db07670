#pragma once

#include "influprune/surrogate.hpp"
#include "influprune/target_model.hpp"

#include <string>

namespace influprune {

// Binary checkpoint: fixed header (magic, kind, shape, mode) followed by a
// little-endian array of 64-bit floats.

void save_surrogate(const SurrogateModel& model, const std::string& path);
SurrogateModel load_surrogate(const std::string& path);

void save_target(const TargetModel& model, const std::string& path);
TargetModel load_target(const std::string& path);

}  // namespace influprune
