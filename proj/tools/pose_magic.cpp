#include <iostream>

#include "posemagic/cli.hpp"

int main(int argc, char** argv) { return posemagic::run_cli(argc, argv, std::cin, std::cout, std::cerr); }
