#include "patchnr/cli.hpp"

int main(int argc, char** argv) { return patchnr::cli::run(argc, argv); }
