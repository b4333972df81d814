#include "medicat/cli.hpp"

int main(int argc, char** argv) { return medicat::cli::dispatch(argc, argv); }
