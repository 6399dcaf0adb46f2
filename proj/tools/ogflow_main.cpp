#include "ogflow/cli.hpp"

int main(int argc, char** argv) { return ogflow::cli::run(argc, argv); }
