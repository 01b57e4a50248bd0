#pragma once

namespace sml {

// Full command-line front end; returns the process exit code.
// 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
int cli_main(int argc, char** argv);

}  // namespace sml
