#include "cli.hpp"

int main(int argc, char** argv) { return vblora::cli::run(argc, argv); }
