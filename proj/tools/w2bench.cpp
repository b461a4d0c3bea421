#include <iostream>

#include "w2bench/harness.hpp"

int main(int argc, char** argv) { return w2bench::run_cli(argc, argv, std::cout, std::cerr); }
