#include "personalize/cli.hpp"

int main(int argc, char** argv) { return personalize::cli_main(argc, argv); }
