#include "cli.hpp"

int main(int argc, char** argv) { return dfl::run_cli(argc, argv); }
