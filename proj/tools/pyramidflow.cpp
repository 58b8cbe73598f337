#include "pyramidflow/cli.hpp"

int main(int argc, char** argv) { return pyramidflow::cli::run(argc, argv); }
