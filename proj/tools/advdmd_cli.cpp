#include "advdmd/cli.hpp"

int main(int argc, char** argv) { return advdmd::cli_main(argc, argv); }
