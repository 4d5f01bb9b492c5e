#pragma once

// Command-line entry point: train, eval, gradcheck, miCheck, ablate, gen-data.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "tcl/training.hpp"

namespace tcl::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

struct AblationRow {
  std::string name;
  std::function<void(training::TrainConfig&)> apply;
};

// Loss-gate rows: CMA+ITM+MLM, +IMC (w/o aug), +IMC, +IMC+LMI.
std::vector<AblationRow> gate_rows();
// LMI pooling on/off x last-layer/intermediate locals, all terms enabled.
std::vector<AblationRow> pooling_rows();
std::vector<AblationRow> momentum_rows(const std::vector<double>& values);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tcl::cli
