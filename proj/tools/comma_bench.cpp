#include "comma/workbench/cli.hpp"

int main(int argc, char** argv) { return comma::cli_dispatch(argc, argv); }
