#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace asl::cli {

// args excludes the program name. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct AblationRow {
  double weight = 0.0;
  double fid = 0.0;
  int rank = 0;
};

// Reads a ranked ablation table written by ablate-weights.
std::vector<AblationRow> read_ablation_table(const std::string& path);

}  // namespace asl::cli
