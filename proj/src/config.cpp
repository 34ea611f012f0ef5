#include "vaenar/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace vaenar {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// shortest round-trip representation, locale-independent
std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw Error("double formatting failed");
    return std::string(buf, ptr);
}

struct Field {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    std::string v = trim(value);
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    std::string v = trim(value);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean '" + value + "' for key '" + key + "'");
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        auto add_int = [&f](const char* name, int RunConfig::* p) {
            f.push_back({name,
                         [p](const RunConfig& c) { return std::to_string(c.*p); },
                         [p, name](RunConfig& c, const std::string& v) {
                             c.*p = parse_number<int>(name, v);
                         }});
        };
        auto add_double = [&f](const char* name, double RunConfig::* p) {
            f.push_back({name,
                         [p](const RunConfig& c) { return fmt_double(c.*p); },
                         [p, name](RunConfig& c, const std::string& v) {
                             c.*p = parse_number<double>(name, v);
                         }});
        };
        auto add_bool = [&f](const char* name, bool RunConfig::* p) {
            f.push_back({name,
                         [p](const RunConfig& c) { return std::string(c.*p ? "true" : "false"); },
                         [p, name](RunConfig& c, const std::string& v) {
                             c.*p = parse_bool(name, v);
                         }});
        };

        f.push_back({"preset", [](const RunConfig& c) { return c.preset; },
                     [](RunConfig& c, const std::string& v) { c.preset = trim(v); }});

        add_int("vocab_size", &RunConfig::vocab_size);
        add_int("n_bins", &RunConfig::n_bins);
        add_int("d_model", &RunConfig::d_model);
        add_int("n_heads", &RunConfig::n_heads);
        add_int("d_ffn", &RunConfig::d_ffn);
        add_int("d_z", &RunConfig::d_z);
        add_int("embed_dim", &RunConfig::embed_dim);
        add_int("conv_prenet_layers", &RunConfig::conv_prenet_layers);
        add_int("conv_prenet_kernel", &RunConfig::conv_prenet_kernel);
        add_int("text_blocks", &RunConfig::text_blocks);
        add_int("posterior_blocks", &RunConfig::posterior_blocks);
        add_int("decoder_blocks", &RunConfig::decoder_blocks);
        add_int("flow_blocks", &RunConfig::flow_blocks);
        add_int("coupling_blocks", &RunConfig::coupling_blocks);
        add_int("postnet_layers", &RunConfig::postnet_layers);
        add_int("postnet_kernel", &RunConfig::postnet_kernel);
        add_int("postnet_channels", &RunConfig::postnet_channels);
        add_double("dropout", &RunConfig::dropout);
        add_bool("use_causal_mask", &RunConfig::use_causal_mask);
        add_double("alpha", &RunConfig::alpha);
        add_double("beta", &RunConfig::beta);
        add_int("initial_r", &RunConfig::initial_r);
        add_int("r_step_every", &RunConfig::r_step_every);
        add_int("floor_r", &RunConfig::floor_r);
        add_double("lr", &RunConfig::lr);
        add_double("adam_beta1", &RunConfig::adam_beta1);
        add_double("adam_beta2", &RunConfig::adam_beta2);
        add_double("adam_eps", &RunConfig::adam_eps);
        add_double("grad_clip", &RunConfig::grad_clip);
        add_int("batch_size", &RunConfig::batch_size);
        add_int("epochs", &RunConfig::epochs);
        add_int("checkpoint_every", &RunConfig::checkpoint_every);
        add_int("corpus_utterances", &RunConfig::corpus_utterances);
        add_int("min_chars", &RunConfig::min_chars);
        add_int("max_chars", &RunConfig::max_chars);
        add_int("base_duration_min", &RunConfig::base_duration_min);
        add_int("base_duration_max", &RunConfig::base_duration_max);
        add_double("duration_jitter", &RunConfig::duration_jitter);
        add_double("noise_std", &RunConfig::noise_std);
        f.push_back({"seed",
                     [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) {
                         c.seed = parse_number<std::uint64_t>("seed", v);
                     }});
        add_double("val_fraction", &RunConfig::val_fraction);
        add_int("length_bias", &RunConfig::length_bias);
        return f;
    }();
    return table;
}

const Field* find_field(const std::string& name) {
    for (const auto& f : fields())
        if (f.name == name) return &f;
    return nullptr;
}

RunConfig from_preset(const std::string& name) {
    if (name == "desk") return RunConfig::desk();
    if (name == "full") return RunConfig::full();
    throw ConfigError("config: unknown preset '" + name + "' (expected desk or full)");
}

}  // namespace

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::full() {
    RunConfig c;
    c.preset = "full";
    c.vocab_size = 43;
    c.n_bins = 80;
    c.d_model = 256;
    c.n_heads = 4;
    c.d_ffn = 1024;
    c.d_z = 128;
    c.embed_dim = 512;
    c.flow_blocks = 6;
    c.postnet_channels = 512;
    c.alpha = 1e-5;
    c.beta = 1.0;
    c.initial_r = 5;
    c.r_step_every = 200;
    c.floor_r = 2;
    c.lr = 1.25e-4;
    c.batch_size = 32;
    c.epochs = 2000;
    c.checkpoint_every = 100;
    c.length_bias = 80;
    return c;
}

RunConfig RunConfig::parse(const std::string& text) {
    // two passes: the preset key selects the base, remaining keys override
    std::vector<std::pair<std::string, std::string>> kvs;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (!find_field(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        kvs.emplace_back(std::move(key), std::move(value));
    }

    std::string preset_name = "desk";
    for (const auto& [k, v] : kvs)
        if (k == "preset") preset_name = trim(v);
    RunConfig cfg = from_preset(preset_name);
    for (const auto& [k, v] : kvs) {
        if (k == "preset") continue;
        find_field(k)->set(cfg, v);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    for (const auto& f : fields()) os << f.name << " = " << f.get(*this) << "\n";
    return os.str();
}

void RunConfig::validate() const {
    model().validate();
    corpus().validate();
    if (initial_r < floor_r || floor_r < 1)
        throw ConfigError("config: need initial_r >= floor_r >= 1");
    if (r_step_every < 1) throw ConfigError("config: r_step_every must be >= 1");
    if (lr <= 0.0 || adam_eps <= 0.0) throw ConfigError("config: lr and adam_eps must be > 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("config: adam betas must be in [0,1)");
    if (batch_size < 1 || epochs < 0 || checkpoint_every < 1)
        throw ConfigError("config: batch_size/checkpoint_every must be >= 1, epochs >= 0");
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("config: alpha and beta must be >= 0");
    if (grad_clip <= 0.0) throw ConfigError("config: grad_clip must be > 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("config: val_fraction must be in [0,1)");
}

ModelConfig RunConfig::model() const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.n_bins = n_bins;
    m.d_model = d_model;
    m.n_heads = n_heads;
    m.d_ffn = d_ffn;
    m.d_z = d_z;
    m.embed_dim = embed_dim;
    m.conv_prenet_layers = conv_prenet_layers;
    m.conv_prenet_kernel = conv_prenet_kernel;
    m.text_blocks = text_blocks;
    m.posterior_blocks = posterior_blocks;
    m.decoder_blocks = decoder_blocks;
    m.flow_blocks = flow_blocks;
    m.coupling_blocks = coupling_blocks;
    m.postnet_layers = postnet_layers;
    m.postnet_kernel = postnet_kernel;
    m.postnet_channels = postnet_channels;
    m.dropout = dropout;
    m.use_causal_mask = use_causal_mask;
    m.min_r = floor_r;
    m.max_r = initial_r;
    return m;
}

SyntheticCorpusSpec RunConfig::corpus() const {
    SyntheticCorpusSpec s;
    s.vocab_size = vocab_size;
    s.n_utterances = corpus_utterances;
    s.min_chars = min_chars;
    s.max_chars = max_chars;
    s.n_bins = n_bins;
    s.base_duration_min = base_duration_min;
    s.base_duration_max = base_duration_max;
    s.duration_jitter = duration_jitter;
    s.noise_std = noise_std;
    s.seed = seed;
    return s;
}

}  // namespace vaenar
