#include "phydi/harness.hpp"

#include <iostream>

int main(int argc, char** argv) { return phydi::run_cli(argc, argv, std::cout, std::cerr); }
