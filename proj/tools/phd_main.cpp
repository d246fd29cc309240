#include "phd/service.hpp"

int main(int argc, char** argv) { return phd::service::run_cli(argc, argv); }
