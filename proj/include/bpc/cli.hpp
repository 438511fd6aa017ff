#pragma once

#include <string>
#include <vector>

namespace bpc {

// Full command-line front end, exposed so tests can drive it in process.
// args excludes the program name. Returns the process exit code: 0 on
// success, the error-class code otherwise (2 usage/config, 3 file, 4
// numeric, 5 contract, 6 insufficient data).
int cli_main(const std::vector<std::string>& args);

}  // namespace bpc
