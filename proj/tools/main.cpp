#include <iostream>

#include "featlab/cli.hpp"

int main(int argc, char** argv) { return featlab::run_cli(argc, argv, std::cout, std::cerr); }
