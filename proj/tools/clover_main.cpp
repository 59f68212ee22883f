#include "clover/cli.hpp"

int main(int argc, char** argv) { return clover::cli_dispatch(argc, argv); }
