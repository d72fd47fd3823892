#include <iostream>

#include "fedsc/cli.hpp"

int main(int argc, char** argv) { return fedsc::run_cli(argc, argv, std::cout, std::cerr); }
