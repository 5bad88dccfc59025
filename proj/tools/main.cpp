#include "ddpf/cli.hpp"

int main(int argc, char** argv) { return ddpf::cli_dispatch(argc, argv); }
