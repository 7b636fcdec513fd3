#include "tadkd/cli.hpp"

int main(int argc, char** argv) { return tadkd::cli_main(argc, argv); }
