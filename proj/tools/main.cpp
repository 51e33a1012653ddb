#include "medmm/cli.hpp"

int main(int argc, char** argv) { return medmm::dispatch(argc, argv); }
