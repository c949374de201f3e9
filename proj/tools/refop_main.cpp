#include "refop/cli.hpp"

int main(int argc, char** argv) { return refop::cli::run(argc, argv); }
