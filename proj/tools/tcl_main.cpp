#include <iostream>

#include "tcl/cli.hpp"

int main(int argc, char** argv) { return tcl::cli::run(argc, argv, std::cout, std::cerr); }
