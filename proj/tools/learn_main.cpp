#include <iostream>

#include "learn/cli.hpp"

int main(int argc, char** argv) { return learn::run_cli(argc, argv, std::cout, std::cerr); }
