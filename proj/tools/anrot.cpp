#include "anrot/cli.hpp"

int main(int argc, char** argv) { return anrot::cli::run(argc, argv); }
