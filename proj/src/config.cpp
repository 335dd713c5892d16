#include "rledit/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>
#include <vector>

#include "rledit/errors.hpp"

namespace rledit {
namespace {

struct SelectorList {
    std::vector<LayerSelector>* layers;
};
struct AblationField {
    Ablation* value;
};
using FieldRef = std::variant<int*, double*, bool*, std::uint64_t*, std::string*, SelectorList, AblationField>;

std::vector<std::pair<std::string, FieldRef>> fields_of(RunConfig& c) {
    HyperParams& h = c.trainer.hyper;
    return {
        {"data.n_eval", &c.data.n_eval},
        {"data.n_locality", &c.data.n_locality},
        {"data.n_relations", &c.data.n_relations},
        {"data.n_subjects", &c.data.n_subjects},
        {"data.n_train", &c.data.n_train},
        {"data.resample_targets", &c.resample_targets},
        {"edit.stream_len", &c.edit_stream_len},
        {"hyper.batch_size", &h.batch_size},
        {"hyper.eta", &h.eta},
        {"hyper.gamma", &h.gamma},
        {"hyper.k", &h.k},
        {"hyper.lambda_loc", &h.lambda_loc},
        {"hyper.lr_inner", &h.lr_inner},
        {"hyper.lr_meta", &h.lr_meta},
        {"hyper.mu", &h.mu},
        {"hyper.noise_std", &h.noise_std},
        {"hyper.rank", &h.rank},
        {"hyper.stream_len", &h.stream_len},
        {"model.d_ff", &c.model.d_ff},
        {"model.d_model", &c.model.d_model},
        {"model.editable_layers", SelectorList{&c.model.editable_layers}},
        {"model.max_seq_len", &c.model.max_seq_len},
        {"model.n_heads", &c.model.n_heads},
        {"model.n_layers", &c.model.n_layers},
        {"model.vocab_size", &c.model.vocab_size},
        {"preset", &c.preset},
        {"pretrain.lr", &c.pretrain.lr},
        {"pretrain.steps", &c.pretrain.steps},
        {"seed", &c.seed},
        {"trainer.ablation", AblationField{&c.trainer.ablation}},
        {"trainer.checkpoint_every", &c.trainer.checkpoint_every},
        {"trainer.convergence_window", &c.trainer.convergence_window},
        {"trainer.epochs", &c.trainer.epochs},
        {"trainer.min_delta", &c.trainer.min_delta},
        {"trainer.patience", &c.trainer.patience},
    };
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key, "cannot parse '" + v + "' as a number");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key, "cannot parse '" + v + "' as a number");
    return d;
}

std::string format_double(double d) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

}  // namespace

RunConfig make_preset(const std::string& name) {
    RunConfig c;
    c.preset = name;
    HyperParams& h = c.trainer.hyper;
    c.trainer.epochs = 3000;
    c.trainer.convergence_window = 100;
    if (name == "desk") return c;
    if (name == "paper") {
        h.mu = 0.95;
        h.k = 10;
        h.eta = 1e-4;
        h.gamma = 1.0;
        h.lambda_loc = 0.6;
        h.lr_inner = 1e-6;
        h.lr_meta = 1e-5;
        return c;
    }
    throw ConfigError("preset", "unknown preset '" + name + "' (desk, paper)");
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& raw) {
    const std::string value = trim(raw);
    for (auto& [name, ref] : fields_of(cfg)) {
        if (name != key) continue;
        std::visit(
            [&](auto&& field) {
                using F = std::decay_t<decltype(field)>;
                if constexpr (std::is_same_v<F, int*>) {
                    *field = parse_number<int>(key, value);
                } else if constexpr (std::is_same_v<F, std::uint64_t*>) {
                    *field = parse_number<std::uint64_t>(key, value);
                } else if constexpr (std::is_same_v<F, double*>) {
                    *field = parse_double(key, value);
                } else if constexpr (std::is_same_v<F, bool*>) {
                    if (value == "true" || value == "1") *field = true;
                    else if (value == "false" || value == "0") *field = false;
                    else throw ConfigError(key, "expected true or false, got '" + value + "'");
                } else if constexpr (std::is_same_v<F, std::string*>) {
                    *field = value;
                } else if constexpr (std::is_same_v<F, SelectorList>) {
                    field.layers->clear();
                    std::stringstream ss(value);
                    std::string item;
                    while (std::getline(ss, item, ',')) {
                        item = trim(item);
                        if (!item.empty()) field.layers->push_back(LayerSelector::parse(item));
                    }
                } else if constexpr (std::is_same_v<F, AblationField>) {
                    *field.value = parse_ablation(value);
                }
            },
            ref);
        return;
    }
    throw ConfigError(key, "unknown configuration key");
}

std::string RunConfig::to_text() const {
    RunConfig copy = *this;
    std::ostringstream o;
    for (auto& [name, ref] : fields_of(copy)) {
        o << name << " = ";
        std::visit(
            [&](auto&& field) {
                using F = std::decay_t<decltype(field)>;
                if constexpr (std::is_same_v<F, double*>) {
                    o << format_double(*field);
                } else if constexpr (std::is_same_v<F, bool*>) {
                    o << (*field ? "true" : "false");
                } else if constexpr (std::is_same_v<F, SelectorList>) {
                    for (std::size_t i = 0; i < field.layers->size(); ++i) o << (i ? "," : "") << (*field.layers)[i].str();
                } else if constexpr (std::is_same_v<F, AblationField>) {
                    o << ablation_name(*field.value);
                } else {
                    o << *field;
                }
            },
            ref);
        o << '\n';
    }
    return o.str();
}

void RunConfig::validate() const {
    if (preset != "desk" && preset != "paper") throw ConfigError("preset", "must be desk or paper");
    model.validate();
    trainer.validate();
    if (data.vocab_needed() > model.vocab_size) throw ConfigError("model.vocab_size", "too small for the corpus");
    if (pretrain.steps < 0) throw ConfigError("pretrain.steps", "must be nonnegative");
    if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain.lr", "must be positive");
    if (edit_stream_len <= 0) throw ConfigError("edit.stream_len", "must be positive");
    if (trainer.hyper.stream_len * trainer.hyper.batch_size > data.n_train) {
        throw ConfigError("hyper.stream_len", "stream_len * batch_size exceeds data.n_train");
    }
    if (edit_stream_len * trainer.hyper.batch_size > data.n_eval) {
        throw ConfigError("edit.stream_len", "edit.stream_len * batch_size exceeds data.n_eval");
    }
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFileError(path.string());
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n), "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(n), "empty key");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

}  // namespace rledit
