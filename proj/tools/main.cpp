#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "hierprobe/errors.hpp"

int main(int argc, char** argv) {
    using namespace hierprobe;
    using namespace hierprobe::cli;

    if (argc < 2) {
        print_usage();
        return 1;
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
        print_usage();
        return 0;
    }

    std::vector<std::string> args(argv + 2, argv + argc);
    try {
        Config cfg;
        cfg.parse_args(args);
        cfg.set("command", command);
        if (command == "train") return cmd_train(cfg);
        if (command == "probe") return cmd_probe(cfg);
        if (command == "attack") return cmd_attack(cfg);
        if (command == "da") return cmd_da(cfg);
        if (command == "features") return cmd_features(cfg);
        if (command == "convert") return cmd_convert(cfg);
        if (command == "synth") return cmd_synth(cfg);
        throw UsageError("unknown command '" + command + "'");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
