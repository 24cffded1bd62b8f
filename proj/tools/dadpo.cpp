#include <iostream>

#include "dadpo/cli.hpp"

int main(int argc, char** argv) { return dadpo::run_cli(argc, argv, std::cout, std::cerr); }
