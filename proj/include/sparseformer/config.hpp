#pragma once

#include "sparseformer/bootstrap.hpp"

#include <string>

namespace sf {

struct RunConfig {
    BootstrapConfig bootstrap;
    ContinueConfig cont;
    std::string spec = "tiny";
    std::string images;
    std::string teacher;
    std::string out;
    std::string loss_csv;
    int image_size = 0;  // 0: the spec resolution
};

/// Parses `key = value` lines; '#' starts a comment. Unknown keys, repeated keys and
/// malformed values throw an Error naming the key and line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Applies one assignment to `cfg` with the same validation as the file parser.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

std::string format_run_config(const RunConfig& cfg);

}  // namespace sf
