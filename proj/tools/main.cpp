#include "vox2bev/cli.hpp"

int main(int argc, char** argv) { return vox2bev::run_cli(argc, argv); }
