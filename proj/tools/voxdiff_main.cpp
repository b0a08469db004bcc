#include "voxdiff/cli.hpp"

int main(int argc, char** argv) { return voxdiff::run_cli(argc, argv); }
