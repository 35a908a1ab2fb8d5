#include "cect/cli.hpp"

int main(int argc, char** argv) { return cect::cli::run(argc, argv); }
