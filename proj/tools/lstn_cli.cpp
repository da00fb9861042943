#include <iostream>

#include "lstn/app/cli.hpp"

int main(int argc, char** argv) { return lstn::app::run_cli(argc, argv, std::cout, std::cerr); }
