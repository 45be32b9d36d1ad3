#include "hfdr/cli.hpp"

int main(int argc, char** argv) { return hfdr::cli_main(argc, argv); }
