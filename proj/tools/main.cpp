#include <iostream>

#include "sdt/commands.hpp"

int main(int argc, char** argv) { return sdt::run_cli(argc, argv, std::cout, std::cerr); }
