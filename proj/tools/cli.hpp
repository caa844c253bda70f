#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace CLI {
class App;
}

namespace neuronlens::cli {

enum ExitCode : int {
    kOk = 0,
    kUsage = 2,
    kData = 3,
    kNumerical = 4,
    kInternal = 1,
};

struct RunConfig;

// Owns the parser and the values it writes into.
struct Parser {
    std::unique_ptr<RunConfig> config;
    std::unique_ptr<CLI::App> app;

    Parser();
    Parser(Parser&&) noexcept;
    Parser& operator=(Parser&&) noexcept;
    ~Parser();
};

// The full flag registry; exposed so tests can reflect over it.
Parser make_parser();

// Parses `args` (without the program name) and runs the chosen subcommand.
// Primary output goes to `out` unless --out names a file.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace neuronlens::cli
