#include "capsdense/cli.hpp"

int main(int argc, char** argv) { return capsdense::run_cli(argc, argv); }
