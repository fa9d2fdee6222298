#include "mdreg/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return mdreg::run_cli(argc, argv, std::cout, std::cerr);
}
