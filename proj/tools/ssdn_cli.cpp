#include "ssdn/cli.hpp"

int main(int argc, char** argv) { return ssdn::cli_main(argc, argv); }
