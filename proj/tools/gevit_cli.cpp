#include "gevit/cli.hpp"

int main(int argc, char** argv) { return gevit::cli::run(argc, argv); }
