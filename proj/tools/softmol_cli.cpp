#include "softmol/cli.hpp"

int main(int argc, char** argv) { return softmol::cli::run(argc, argv); }
