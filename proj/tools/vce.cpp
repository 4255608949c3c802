#include "vce/cli.hpp"

int main(int argc, char** argv) { return vce::cli::run(argc, argv); }
