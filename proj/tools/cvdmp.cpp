#include <iostream>

#include "cvdmp/cli.hpp"

int main(int argc, char** argv) { return cvdmp::run_cli(argc, argv, std::cout, std::cerr); }
