#include "waves/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return waves::cli::main(argc, argv, std::cout, std::cerr); }
