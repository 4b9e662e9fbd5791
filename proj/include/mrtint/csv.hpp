#pragma once

#include <iosfwd>
#include <string>

#include "mrtint/datamodel.hpp"

namespace mrtint {

// Dataset CSV schema, one row per randomization:
//   participant_id, study, t, x1..xK, a, y[, prob_h]
// (for multi-level treatments: prob_h1..prob_hJ). Header row required,
// study in {0,1}, '.' decimal point, UTF-8. Rows for one participant must
// be contiguous. Malformed content raises ValidationError naming row and
// column; filesystem failures raise IoError.
CombinedDataset read_dataset_csv(std::istream& in, const std::string& origin = "<stream>");
CombinedDataset read_dataset_csv_file(const std::string& path);

void write_dataset_csv(std::ostream& out, const CombinedDataset& dataset);
void write_dataset_csv_file(const std::string& path, const CombinedDataset& dataset);

}  // namespace mrtint
