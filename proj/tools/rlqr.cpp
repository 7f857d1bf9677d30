#include "rlqr/cli.hpp"

int main(int argc, char** argv) { return rlqr::cli::run(argc, argv); }
