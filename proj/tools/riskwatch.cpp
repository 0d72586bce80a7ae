#include <iostream>

#include "riskwatch/cli.hpp"
#include "riskwatch/service.hpp"

int main(int argc, char** argv) {
    return riskwatch::cli::run(argc, argv, std::cout, std::cerr, riskwatch::service::ServiceConfig::environment());
}
