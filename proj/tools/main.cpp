#include "cli.hpp"

int main(int argc, char** argv) { return dida::cli::run(argc, argv); }
