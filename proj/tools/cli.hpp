#pragma once

namespace dfl {

// Exit codes: 0 ok, 2 usage, 3 data, 4 internal.
int run_cli(int argc, const char* const* argv);

}  // namespace dfl
