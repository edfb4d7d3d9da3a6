#include <string>
#include <vector>

#include "sarjepa/cli.hpp"

int main(int argc, char** argv) { return sarjepa::run_cli(std::vector<std::string>(argv, argv + argc)); }
