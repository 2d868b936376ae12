#pragma once

// Command-line surface: train | calibrate | attack | detect | eval |
// recon-grid | report. Every command writes a JSON manifest beside its
// outputs. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

namespace darccc {

int cli_main(int argc, char** argv);

}  // namespace darccc
