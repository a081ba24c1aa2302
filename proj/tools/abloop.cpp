#include "abloop/cli.hpp"

int main(int argc, char** argv) { return abloop::cli::run(argc, argv); }
