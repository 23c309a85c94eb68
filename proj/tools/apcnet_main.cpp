#include "apcnet/harness.hpp"

int main(int argc, char** argv) { return apcnet::harness::run_cli(argc, argv); }
