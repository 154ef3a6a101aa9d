#ifndef HIERPROBE_TOOLS_COMMANDS_HPP
#define HIERPROBE_TOOLS_COMMANDS_HPP

#include "config.hpp"

namespace hierprobe::cli {

int cmd_train(Config& cfg);
int cmd_probe(Config& cfg);
int cmd_attack(Config& cfg);
int cmd_da(Config& cfg);
int cmd_features(Config& cfg);
int cmd_convert(Config& cfg);
int cmd_synth(Config& cfg);

void print_usage();

} // namespace hierprobe::cli

#endif
