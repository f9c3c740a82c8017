#include <iostream>

#include "fpvt/cli.hpp"

int main(int argc, char** argv) { return fpvt::run_cli({argv + 1, argv + argc}, std::cout, std::cerr); }
