#include "ncasm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return ncasm::run_cli(argc, argv, std::cout, std::cerr); }
