#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) { return vop::cli::run_cli(argc, argv, std::cerr); }
