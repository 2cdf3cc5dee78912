// voxsyn.cpp — CLI entry point; all behavior lives in voxsyn/cli.hpp.

#include <voxsyn/cli.hpp>

int main(int argc, char** argv) { return voxsyn::run_cli(argc, argv); }
