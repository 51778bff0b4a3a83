#include "cli.hpp"

int main(int argc, char** argv) { return segcal::cli::run(argc, argv); }
