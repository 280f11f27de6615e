#include "cli.hpp"

int main(int argc, char** argv) { return tcv2::cli::run_cli(argc, argv); }
