#include "zssrt/cli.hpp"

int main(int argc, char** argv) { return zssrt::cli::run(argc, argv); }
