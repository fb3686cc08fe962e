#include "dkua/cli.hpp"

int main(int argc, char** argv) { return dkua::cli::run(argc, argv); }
