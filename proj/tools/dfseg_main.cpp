#include "dfseg/cli.hpp"

int main(int argc, char** argv) { return dfseg::cli_main(argc, argv); }
