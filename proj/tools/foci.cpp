#include "foci/cli.hpp"

int main(int argc, char** argv) {
    return foci::run_cli({argv + 1, argv + argc});
}
