#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/attacks.hpp"
#include "caf/denoiser.hpp"

namespace caf {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Experiment config of record: sectioned key = value text, strict schema
// (unknown keys are rejected), dotted-path overrides, and a fully resolved
// echo written into every run directory.
struct RunConfig {
    // [run]
    std::uint64_t seed = 7;
    std::string out_dir = "runs/dev";
    int threads = 0; // 0 = library default

    // [dataset]
    ShapeGenConfig dataset;
    double train_fraction = 0.6667;
    double val_fraction = 0.1333;
    double test_fraction = 0.2;
    std::string dataset_dir; // optional explicit location (defaults under out_dir)

    // [classifier]
    std::vector<int> clf_widths = {32, 64, 128, 128};
    ClassifierHyper clf;
    std::string clf_checkpoint; // optional explicit path

    // [attack]
    std::string attack_kind = "cafa"; // "none" disables the attack in eval
    AttackConfig attack;

    // [denoiser]
    CafdTrainConfig cafd;
    std::string denoiser_checkpoint;
    std::string craft_checkpoint; // gray-box: attack crafted against this one

    // [eval]
    std::int64_t eval_max_examples = 256;
    int grid_examples = 6;

    // [sweep]
    std::vector<double> sweep_eps_grid = {6.0 / 255, 8.0 / 255, 10.0 / 255, 12.0 / 255, 16.0 / 255};
    std::vector<std::string> sweep_attacks = {"pgd_ce", "pgd_ce_t", "cafa"};

    // [ablate]
    std::vector<std::string> ablate_variants = {"full", "no_adv", "no_caf", "msed"};
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v);

template <>
inline double parse_number<double>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse '" + v + "' as a number");
    }
}
template <>
inline int parse_number<int>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse '" + v + "' as an integer");
    }
}
template <>
inline std::int64_t parse_number<std::int64_t>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse '" + v + "' as an integer");
    }
}
template <>
inline std::uint64_t parse_number<std::uint64_t>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "': cannot parse '" + v + "' as a bool");
}

struct Binding {
    std::string key; // section.name
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::string fmt_config(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}
inline std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_config(v[i]);
    return s;
}

inline const std::vector<Binding>& bindings() {
    static const std::vector<Binding> b = [] {
        std::vector<Binding> v;
        auto add = [&v](std::string key, std::function<void(RunConfig&, const std::string&)> set,
                        std::function<std::string(const RunConfig&)> get) {
            v.push_back({std::move(key), std::move(set), std::move(get)});
        };
        auto fmt_int_list = [](const std::vector<int>& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
            return s;
        };
        auto fmt_str_list = [](const std::vector<std::string>& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + xs[i];
            return s;
        };
        auto parse_int_list = [](const std::string& key, const std::string& val) {
            std::vector<int> xs;
            for (const auto& item : split_list(val)) xs.push_back(parse_number<int>(key, item));
            if (xs.empty()) throw ConfigError("config: key '" + key + "': empty list");
            return xs;
        };
        auto parse_double_list = [](const std::string& key, const std::string& val) {
            std::vector<double> xs;
            for (const auto& item : split_list(val)) xs.push_back(parse_number<double>(key, item));
            if (xs.empty()) throw ConfigError("config: key '" + key + "': empty list");
            return xs;
        };

        // [run]
        add("run.seed", [](RunConfig& c, const std::string& s) { c.seed = parse_number<std::uint64_t>("run.seed", s); },
            [](const RunConfig& c) { return std::to_string(c.seed); });
        add("run.out_dir", [](RunConfig& c, const std::string& s) { c.out_dir = s; },
            [](const RunConfig& c) { return c.out_dir; });
        add("run.threads", [](RunConfig& c, const std::string& s) { c.threads = parse_number<int>("run.threads", s); },
            [](const RunConfig& c) { return std::to_string(c.threads); });

        // [dataset]
        add("dataset.num_classes",
            [](RunConfig& c, const std::string& s) { c.dataset.num_classes = parse_number<int>("dataset.num_classes", s); },
            [](const RunConfig& c) { return std::to_string(c.dataset.num_classes); });
        add("dataset.samples_per_class",
            [](RunConfig& c, const std::string& s) {
                c.dataset.samples_per_class = parse_number<int>("dataset.samples_per_class", s);
            },
            [](const RunConfig& c) { return std::to_string(c.dataset.samples_per_class); });
        add("dataset.image_size",
            [](RunConfig& c, const std::string& s) { c.dataset.image_size = parse_number<int>("dataset.image_size", s); },
            [](const RunConfig& c) { return std::to_string(c.dataset.image_size); });
        add("dataset.channels",
            [](RunConfig& c, const std::string& s) { c.dataset.channels = parse_number<int>("dataset.channels", s); },
            [](const RunConfig& c) { return std::to_string(c.dataset.channels); });
        add("dataset.noise_std",
            [](RunConfig& c, const std::string& s) { c.dataset.noise_std = parse_number<double>("dataset.noise_std", s); },
            [](const RunConfig& c) { return fmt_config(c.dataset.noise_std); });
        add("dataset.seed",
            [](RunConfig& c, const std::string& s) { c.dataset.seed = parse_number<std::uint64_t>("dataset.seed", s); },
            [](const RunConfig& c) { return std::to_string(c.dataset.seed); });
        add("dataset.train_fraction",
            [](RunConfig& c, const std::string& s) { c.train_fraction = parse_number<double>("dataset.train_fraction", s); },
            [](const RunConfig& c) { return fmt_config(c.train_fraction); });
        add("dataset.val_fraction",
            [](RunConfig& c, const std::string& s) { c.val_fraction = parse_number<double>("dataset.val_fraction", s); },
            [](const RunConfig& c) { return fmt_config(c.val_fraction); });
        add("dataset.test_fraction",
            [](RunConfig& c, const std::string& s) { c.test_fraction = parse_number<double>("dataset.test_fraction", s); },
            [](const RunConfig& c) { return fmt_config(c.test_fraction); });
        add("dataset.dir", [](RunConfig& c, const std::string& s) { c.dataset_dir = s; },
            [](const RunConfig& c) { return c.dataset_dir; });

        // [classifier]
        add("classifier.widths",
            [parse_int_list](RunConfig& c, const std::string& s) { c.clf_widths = parse_int_list("classifier.widths", s); },
            [fmt_int_list](const RunConfig& c) { return fmt_int_list(c.clf_widths); });
        add("classifier.epochs",
            [](RunConfig& c, const std::string& s) { c.clf.epochs = parse_number<int>("classifier.epochs", s); },
            [](const RunConfig& c) { return std::to_string(c.clf.epochs); });
        add("classifier.batch_size",
            [](RunConfig& c, const std::string& s) { c.clf.batch_size = parse_number<int>("classifier.batch_size", s); },
            [](const RunConfig& c) { return std::to_string(c.clf.batch_size); });
        add("classifier.lr", [](RunConfig& c, const std::string& s) { c.clf.lr = parse_number<double>("classifier.lr", s); },
            [](const RunConfig& c) { return fmt_config(c.clf.lr); });
        add("classifier.lr_final",
            [](RunConfig& c, const std::string& s) { c.clf.lr_final = parse_number<double>("classifier.lr_final", s); },
            [](const RunConfig& c) { return fmt_config(c.clf.lr_final); });
        add("classifier.seed",
            [](RunConfig& c, const std::string& s) { c.clf.seed = parse_number<std::uint64_t>("classifier.seed", s); },
            [](const RunConfig& c) { return std::to_string(c.clf.seed); });
        add("classifier.checkpoint", [](RunConfig& c, const std::string& s) { c.clf_checkpoint = s; },
            [](const RunConfig& c) { return c.clf_checkpoint; });

        // [attack]
        add("attack.kind",
            [](RunConfig& c, const std::string& s) {
                if (s != "none") attack_kind_from_name(s); // validate
                c.attack_kind = s;
            },
            [](const RunConfig& c) { return c.attack_kind; });
        add("attack.epsilon",
            [](RunConfig& c, const std::string& s) { c.attack.epsilon = parse_number<double>("attack.epsilon", s); },
            [](const RunConfig& c) { return fmt_config(c.attack.epsilon); });
        add("attack.step_size",
            [](RunConfig& c, const std::string& s) { c.attack.step_size = parse_number<double>("attack.step_size", s); },
            [](const RunConfig& c) { return fmt_config(c.attack.step_size); });
        add("attack.iterations",
            [](RunConfig& c, const std::string& s) { c.attack.iterations = parse_number<int>("attack.iterations", s); },
            [](const RunConfig& c) { return std::to_string(c.attack.iterations); });
        add("attack.targeted",
            [](RunConfig& c, const std::string& s) { c.attack.targeted = parse_bool("attack.targeted", s); },
            [](const RunConfig& c) { return c.attack.targeted ? "true" : "false"; });
        add("attack.target_class",
            [](RunConfig& c, const std::string& s) { c.attack.target_class = parse_number<int>("attack.target_class", s); },
            [](const RunConfig& c) { return std::to_string(c.attack.target_class); });
        add("attack.random_start",
            [](RunConfig& c, const std::string& s) { c.attack.random_start = parse_bool("attack.random_start", s); },
            [](const RunConfig& c) { return c.attack.random_start ? "true" : "false"; });
        add("attack.seed",
            [](RunConfig& c, const std::string& s) { c.attack.seed = parse_number<std::uint64_t>("attack.seed", s); },
            [](const RunConfig& c) { return std::to_string(c.attack.seed); });

        // [denoiser]
        add("denoiser.loss",
            [](RunConfig& c, const std::string& s) { c.cafd.variant = caf_loss_from_name(s); },
            [](const RunConfig& c) { return caf_loss_name(c.cafd.variant); });
        add("denoiser.lambda1",
            [](RunConfig& c, const std::string& s) { c.cafd.lambda1 = parse_number<double>("denoiser.lambda1", s); },
            [](const RunConfig& c) { return fmt_config(c.cafd.lambda1); });
        add("denoiser.lambda2",
            [](RunConfig& c, const std::string& s) { c.cafd.lambda2 = parse_number<double>("denoiser.lambda2", s); },
            [](const RunConfig& c) { return fmt_config(c.cafd.lambda2); });
        add("denoiser.drop_adv",
            [](RunConfig& c, const std::string& s) { c.cafd.drop_adv = parse_bool("denoiser.drop_adv", s); },
            [](const RunConfig& c) { return c.cafd.drop_adv ? "true" : "false"; });
        add("denoiser.drop_caf",
            [](RunConfig& c, const std::string& s) { c.cafd.drop_caf = parse_bool("denoiser.drop_caf", s); },
            [](const RunConfig& c) { return c.cafd.drop_caf ? "true" : "false"; });
        add("denoiser.widths",
            [parse_int_list](RunConfig& c, const std::string& s) { c.cafd.widths = parse_int_list("denoiser.widths", s); },
            [fmt_int_list](const RunConfig& c) { return fmt_int_list(c.cafd.widths); });
        add("denoiser.inner_epsilon",
            [](RunConfig& c, const std::string& s) { c.cafd.inner_epsilon = parse_number<double>("denoiser.inner_epsilon", s); },
            [](const RunConfig& c) { return fmt_config(c.cafd.inner_epsilon); });
        add("denoiser.inner_step_size",
            [](RunConfig& c, const std::string& s) {
                c.cafd.inner_step_size = parse_number<double>("denoiser.inner_step_size", s);
            },
            [](const RunConfig& c) { return fmt_config(c.cafd.inner_step_size); });
        add("denoiser.inner_iterations",
            [](RunConfig& c, const std::string& s) {
                c.cafd.inner_iterations = parse_number<int>("denoiser.inner_iterations", s);
            },
            [](const RunConfig& c) { return std::to_string(c.cafd.inner_iterations); });
        add("denoiser.epochs",
            [](RunConfig& c, const std::string& s) { c.cafd.epochs = parse_number<int>("denoiser.epochs", s); },
            [](const RunConfig& c) { return std::to_string(c.cafd.epochs); });
        add("denoiser.batch_size",
            [](RunConfig& c, const std::string& s) { c.cafd.batch_size = parse_number<int>("denoiser.batch_size", s); },
            [](const RunConfig& c) { return std::to_string(c.cafd.batch_size); });
        add("denoiser.lr", [](RunConfig& c, const std::string& s) { c.cafd.lr = parse_number<double>("denoiser.lr", s); },
            [](const RunConfig& c) { return fmt_config(c.cafd.lr); });
        add("denoiser.lr_final",
            [](RunConfig& c, const std::string& s) { c.cafd.lr_final = parse_number<double>("denoiser.lr_final", s); },
            [](const RunConfig& c) { return fmt_config(c.cafd.lr_final); });
        add("denoiser.seed",
            [](RunConfig& c, const std::string& s) { c.cafd.seed = parse_number<std::uint64_t>("denoiser.seed", s); },
            [](const RunConfig& c) { return std::to_string(c.cafd.seed); });
        add("denoiser.early_stop_patience",
            [](RunConfig& c, const std::string& s) {
                c.cafd.early_stop_patience = parse_number<int>("denoiser.early_stop_patience", s);
            },
            [](const RunConfig& c) { return std::to_string(c.cafd.early_stop_patience); });
        add("denoiser.early_stop_min_improve",
            [](RunConfig& c, const std::string& s) {
                c.cafd.early_stop_min_improve = parse_number<double>("denoiser.early_stop_min_improve", s);
            },
            [](const RunConfig& c) { return fmt_config(c.cafd.early_stop_min_improve); });
        add("denoiser.expected_backbone_checksum",
            [](RunConfig& c, const std::string& s) {
                c.cafd.expected_backbone_checksum =
                    static_cast<std::uint32_t>(parse_number<std::uint64_t>("denoiser.expected_backbone_checksum", s));
            },
            [](const RunConfig& c) { return std::to_string(c.cafd.expected_backbone_checksum); });
        add("denoiser.checkpoint", [](RunConfig& c, const std::string& s) { c.denoiser_checkpoint = s; },
            [](const RunConfig& c) { return c.denoiser_checkpoint; });
        add("denoiser.craft_checkpoint", [](RunConfig& c, const std::string& s) { c.craft_checkpoint = s; },
            [](const RunConfig& c) { return c.craft_checkpoint; });

        // [eval]
        add("eval.max_examples",
            [](RunConfig& c, const std::string& s) { c.eval_max_examples = parse_number<std::int64_t>("eval.max_examples", s); },
            [](const RunConfig& c) { return std::to_string(c.eval_max_examples); });
        add("eval.grid_examples",
            [](RunConfig& c, const std::string& s) { c.grid_examples = parse_number<int>("eval.grid_examples", s); },
            [](const RunConfig& c) { return std::to_string(c.grid_examples); });

        // [sweep]
        add("sweep.eps_grid",
            [parse_double_list](RunConfig& c, const std::string& s) {
                c.sweep_eps_grid = parse_double_list("sweep.eps_grid", s);
            },
            [](const RunConfig& c) { return join_doubles(c.sweep_eps_grid); });
        add("sweep.attacks",
            [fmt_str_list](RunConfig& c, const std::string& s) { c.sweep_attacks = split_list(s); },
            [fmt_str_list](const RunConfig& c) { return fmt_str_list(c.sweep_attacks); });

        // [ablate]
        add("ablate.variants",
            [fmt_str_list](RunConfig& c, const std::string& s) { c.ablate_variants = split_list(s); },
            [fmt_str_list](const RunConfig& c) { return fmt_str_list(c.ablate_variants); });
        return v;
    }();
    return b;
}

inline const Binding& find_binding(const std::string& key) {
    for (const auto& b : bindings())
        if (b.key == key) return b;
    throw ConfigError("config: unknown key '" + key + "'");
}

} // namespace detail

inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: override '" + assignment + "' must look like section.key=value");
    const std::string key = detail::trim(assignment.substr(0, eq));
    const std::string val = detail::trim(assignment.substr(eq + 1));
    detail::find_binding(key).set(cfg, val);
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config: malformed section header at line " + std::to_string(lineno));
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError("config: key '" + key + "' outside any section");
        detail::find_binding(section + "." + key).set(cfg, val);
    }
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

// Canonical fully-resolved echo, grouped by section in declaration order.
inline std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& b : detail::bindings()) {
        const auto dot = b.key.find('.');
        const std::string sec = b.key.substr(0, dot);
        if (sec != section) {
            if (!out.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += b.key.substr(dot + 1) + " = " + b.get(cfg) + "\n";
    }
    return out;
}

inline void write_text_atomic(const std::string& text, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << text;
        if (!os) throw std::runtime_error("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

} // namespace caf
