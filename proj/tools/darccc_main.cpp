#include "darccc/cli.hpp"

int main(int argc, char** argv) { return darccc::cli_main(argc, argv); }
