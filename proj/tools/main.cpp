#include "affmtl/cli.hpp"
int main(int argc, char** argv) { return affmtl::dispatch(argc, argv); }
