#include "nexus/commands.hpp"

int main(int argc, char** argv) { return nexus::run_cli(argc, argv); }
