#include "gcb/commands.hpp"

int main(int argc, char** argv) { return gcb::run_cli(argc, argv); }
