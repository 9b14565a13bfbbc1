#include "sinklab/cli.hpp"

int main(int argc, char** argv) { return sinklab::run_cli(argc, argv); }
