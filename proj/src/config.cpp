#include "sparseformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace sf {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) {
        throw Error("config key '" + key + "': cannot parse '" + value + "' as a number");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") {
        return true;
    }
    if (value == "false" || value == "0" || value == "no") {
        return false;
    }
    throw Error("config key '" + key + "': expected true/false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"epochs", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.epochs = parse_number<int>(k, v); }},
        {"warmup_epochs", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.warmup_epochs = parse_number<int>(k, v); }},
        {"base_lr", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.base_lr = parse_number<double>(k, v); }},
        {"tunable_lr_multiplier",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.tunable_lr_multiplier = parse_number<double>(k, v); }},
        {"flip_prob", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.flip_prob = parse_number<double>(k, v); }},
        {"crop_scale_min",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.crop_scale_min = parse_number<double>(k, v); }},
        {"crop_scale_max",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.crop_scale_max = parse_number<double>(k, v); }},
        {"crop_aspect_min",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.crop_aspect_min = parse_number<double>(k, v); }},
        {"crop_aspect_max",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.crop_aspect_max = parse_number<double>(k, v); }},
        {"augment", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.augment = parse_bool(k, v); }},
        {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.batch_size = parse_number<int>(k, v); }},
        {"grad_clip", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.grad_clip = parse_number<double>(k, v); }},
        {"seed", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.seed = parse_number<std::uint64_t>(k, v); }},
        {"objective",
         [](RunConfig& c, auto& k, auto& v) {
             try {
                 c.bootstrap.objective = parse_objective(v);
             } catch (const Error& e) {
                 throw Error("config key '" + k + "': " + e.what());
             }
         }},
        {"cls_weight", [](RunConfig& c, auto& k, auto& v) { c.bootstrap.cls_weight = parse_number<double>(k, v); }},
        {"kl_temperature",
         [](RunConfig& c, auto& k, auto& v) { c.bootstrap.kl_temperature = parse_number<double>(k, v); }},
        {"continue_tokens", [](RunConfig& c, auto& k, auto& v) { c.cont.new_tokens = parse_number<int>(k, v); }},
        {"continue_epochs", [](RunConfig& c, auto& k, auto& v) { c.cont.epochs = parse_number<int>(k, v); }},
        {"continue_lr", [](RunConfig& c, auto& k, auto& v) { c.cont.base_lr = parse_number<double>(k, v); }},
        {"spec", [](RunConfig& c, auto&, auto& v) { c.spec = v; }},
        {"images", [](RunConfig& c, auto&, auto& v) { c.images = v; }},
        {"teacher", [](RunConfig& c, auto&, auto& v) { c.teacher = v; }},
        {"out", [](RunConfig& c, auto&, auto& v) { c.out = v; }},
        {"loss_csv", [](RunConfig& c, auto&, auto& v) { c.loss_csv = v; }},
        {"image_size", [](RunConfig& c, auto& k, auto& v) { c.image_size = parse_number<int>(k, v); }},
    };
    return table;
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = setters();
    auto it = table.find(key);
    if (it == table.end()) {
        throw Error("unknown config key '" + key + "'");
    }
    it->second(cfg, key, value);
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) {
            throw Error("config line " + std::to_string(lineno) + ": key '" + key + "' given twice");
        }
        try {
            set_config_value(cfg, key, value);
        } catch (const Error& e) {
            throw Error("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.bootstrap.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& cfg) {
    const auto& b = cfg.bootstrap;
    std::ostringstream out;
    out.precision(17);
    out << "epochs = " << b.epochs << "\nwarmup_epochs = " << b.warmup_epochs << "\nbase_lr = " << b.base_lr
        << "\ntunable_lr_multiplier = " << b.tunable_lr_multiplier << "\nflip_prob = " << b.flip_prob
        << "\ncrop_scale_min = " << b.crop_scale_min << "\ncrop_scale_max = " << b.crop_scale_max
        << "\ncrop_aspect_min = " << b.crop_aspect_min << "\ncrop_aspect_max = " << b.crop_aspect_max
        << "\naugment = " << (b.augment ? "true" : "false") << "\nbatch_size = " << b.batch_size
        << "\ngrad_clip = " << b.grad_clip << "\nseed = " << b.seed << "\nobjective = " << objective_name(b.objective)
        << "\ncls_weight = " << b.cls_weight << "\nkl_temperature = " << b.kl_temperature
        << "\ncontinue_tokens = " << cfg.cont.new_tokens << "\ncontinue_epochs = " << cfg.cont.epochs
        << "\ncontinue_lr = " << cfg.cont.base_lr << "\nspec = " << cfg.spec << "\nimage_size = " << cfg.image_size
        << '\n';
    for (auto [k, v] : {std::pair{"images", &cfg.images}, {"teacher", &cfg.teacher}, {"out", &cfg.out},
                        {"loss_csv", &cfg.loss_csv}}) {
        if (!v->empty()) {
            out << k << " = " << *v << '\n';
        }
    }
    return out.str();
}

}  // namespace sf
