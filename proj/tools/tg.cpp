#include "tg/cli.hpp"

int main(int argc, char** argv) { return tg::cli::run(argc, argv); }
