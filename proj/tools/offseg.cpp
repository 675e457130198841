#include <iostream>

#include "offseg/cli.hpp"

int main(int argc, char** argv) { return offseg::cli::run(argc, argv, std::cout, std::cerr); }
