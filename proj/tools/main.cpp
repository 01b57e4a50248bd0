#include "sml/cli.hpp"

int main(int argc, char** argv) { return sml::cli_main(argc, argv); }
