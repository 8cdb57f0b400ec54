#include <iostream>

#include "sing/cli.hpp"

int main(int argc, char** argv) { return sing::run_cli(argc, argv, std::cout, std::cerr); }
