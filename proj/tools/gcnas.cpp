#include "gcnas/cli.hpp"

int main(int argc, char** argv) { return gcnas::cli_main(argc, argv); }
