#pragma once

#include <filesystem>
#include <iosfwd>

#include "fedbsd/nn.hpp"

namespace fedbsd {

// Text checkpoint of a SplitModel. Layout (one record per line):
//
//   fedbsd-checkpoint 1
//   backbone <num_layers>
//   layer <in> <out> <relu 0|1>
//   w <out*in values, row-major>
//   b <out values>
//   ... (one layer/w/b triple per backbone layer)
//   head <in> <out>
//   w <...>
//   b <...>
//
// Values use the shortest round-trip decimal form, so save/load is exact.
// Gradients and momentum buffers are not stored.
void save_checkpoint(const SplitModel& model, std::ostream& out);
SplitModel load_checkpoint(std::istream& in);

void save_checkpoint(const SplitModel& model, const std::filesystem::path& path);
SplitModel load_checkpoint(const std::filesystem::path& path);

}  // namespace fedbsd
