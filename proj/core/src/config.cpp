#include "attnflow/config.hpp"

#include <fstream>
#include <sstream>

namespace attnflow {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

void set_model_key(ModelConfig& m, const std::string& key, const std::string& v) {
    if (key == "levels") {
        m.levels = int(parse_int(key, v));
    } else if (key == "steps") {
        m.steps = int(parse_int(key, v));
    } else if (key == "coupling") {
        if (v == "affine") {
            m.coupling = CouplingKind::Affine;
        } else if (v == "mixture") {
            m.coupling = CouplingKind::Mixture;
        } else {
            throw ConfigError("coupling must be affine or mixture, got '" + v + "'");
        }
    } else if (key == "hidden_channels") {
        m.hidden_channels = int(parse_int(key, v));
    } else if (key == "split_rule") {
        if (v == "channel") {
            m.split_rule = SplitRuleKind::ChannelHalves;
        } else if (v == "checkerboard2d") {
            m.split_rule = SplitRuleKind::Checkerboard2D;
        } else if (v == "permuted3d") {
            m.split_rule = SplitRuleKind::Permuted3D;
        } else {
            throw ConfigError("split_rule must be channel|checkerboard2d|permuted3d, got '" + v +
                              "'");
        }
    } else if (key == "attention") {
        if (v == "none") {
            m.attention = AttentionKind::None;
        } else if (v == "imap") {
            m.attention = AttentionKind::IMap;
        } else if (v == "isdp") {
            m.attention = AttentionKind::ISdp;
        } else {
            throw ConfigError("attention must be none|imap|isdp, got '" + v + "'");
        }
    } else if (key == "attention_position") {
        if (v == "pos1") {
            m.attention_position = AttentionPosition::Pos1;
        } else if (v == "pos2") {
            m.attention_position = AttentionPosition::Pos2;
        } else if (v == "pos3") {
            m.attention_position = AttentionPosition::Pos3;
        } else if (v == "pos4") {
            m.attention_position = AttentionPosition::Pos4;
        } else {
            throw ConfigError("attention_position must be pos1..pos4, got '" + v + "'");
        }
    } else if (key == "heads") {
        m.heads = int(parse_int(key, v));
    } else if (key == "patches") {
        m.patches = int(parse_int(key, v));
    } else if (key == "mask_phase") {
        m.mask_phase = int(parse_int(key, v));
    } else if (key == "mask_seed") {
        m.mask_seed = parse_u64(key, v);
    } else if (key == "mixture_components") {
        m.mixture_components = int(parse_int(key, v));
    } else if (key == "conditional") {
        m.conditional = parse_bool(key, v);
    } else if (key == "condition_channels") {
        m.condition_channels = parse_int(key, v);
    } else if (key == "isdp_activation") {
        if (v == "sigmoid") {
            m.isdp_activation = SdpActivation::Sigmoid;
        } else if (v == "softmax") {
            m.isdp_activation = SdpActivation::Softmax;
        } else {
            throw ConfigError("isdp_activation must be sigmoid or softmax, got '" + v + "'");
        }
    } else if (key == "isdp_pure_eq6") {
        m.isdp_pure_eq6 = parse_bool(key, v);
    } else if (key == "input_channels") {
        m.input_channels = parse_int(key, v);
    } else if (key == "input_height") {
        m.input_height = parse_int(key, v);
    } else if (key == "input_width") {
        m.input_width = parse_int(key, v);
    } else if (key == "seed") {
        m.seed = parse_u64(key, v);
    } else {
        throw ConfigError("unknown key '" + key + "' in [model]");
    }
}

void set_train_key(TrainConfig& t, const std::string& key, const std::string& v) {
    if (key == "lr") {
        t.lr = parse_double(key, v);
    } else if (key == "batch") {
        t.batch = int(parse_int(key, v));
    } else if (key == "iters") {
        t.iters = int(parse_int(key, v));
    } else if (key == "beta1") {
        t.beta1 = parse_double(key, v);
    } else if (key == "beta2") {
        t.beta2 = parse_double(key, v);
    } else if (key == "eps") {
        t.eps = parse_double(key, v);
    } else if (key == "grad_clip") {
        t.grad_clip = parse_double(key, v);
    } else if (key == "seed") {
        t.seed = parse_u64(key, v);
    } else if (key == "checkpoint_every") {
        t.checkpoint_every = int(parse_int(key, v));
    } else if (key == "warmup_iters") {
        t.warmup_iters = int(parse_int(key, v));
    } else {
        throw ConfigError("unknown key '" + key + "' in [train]");
    }
}

void set_data_key(DataConfig& d, const std::string& key, const std::string& v) {
    if (key == "kind") {
        if (v != "toy2d" && v != "idx") {
            throw ConfigError("data kind must be toy2d or idx, got '" + v + "'");
        }
        d.kind = v;
    } else if (key == "name") {
        d.name = v;
    } else if (key == "resolution") {
        d.resolution = int(parse_int(key, v));
    } else if (key == "count") {
        d.count = parse_int(key, v);
    } else if (key == "path") {
        d.path = v;
    } else if (key == "downscale") {
        d.downscale = int(parse_int(key, v));
    } else if (key == "condition") {
        if (v != "none" && v != "downscale2") {
            throw ConfigError("data condition must be none or downscale2, got '" + v + "'");
        }
        d.condition = v;
    } else if (key == "seed") {
        d.seed = parse_u64(key, v);
    } else {
        throw ConfigError("unknown key '" + key + "' in [data]");
    }
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            }
            section = line.substr(1, line.size() - 2);
            if (section != "model" && section != "train" && section != "data") {
                throw ConfigError("unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError("key '" + key + "' appears before any [section]");
        }
        if (section == "model") {
            set_model_key(cfg.model, key, value);
        } else if (section == "train") {
            set_train_key(cfg.train, key, value);
        } else {
            set_data_key(cfg.data, key, value);
        }
    }
    return cfg;
}

RunConfig parse_run_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str());
}

namespace {

const char* coupling_str(CouplingKind k) {
    return k == CouplingKind::Affine ? "affine" : "mixture";
}
const char* split_str(SplitRuleKind k) {
    switch (k) {
        case SplitRuleKind::ChannelHalves: return "channel";
        case SplitRuleKind::Checkerboard2D: return "checkerboard2d";
        case SplitRuleKind::Permuted3D: return "permuted3d";
    }
    return "?";
}
const char* attention_str(AttentionKind k) {
    switch (k) {
        case AttentionKind::None: return "none";
        case AttentionKind::IMap: return "imap";
        case AttentionKind::ISdp: return "isdp";
    }
    return "?";
}
const char* position_str(AttentionPosition p) {
    switch (p) {
        case AttentionPosition::Pos1: return "pos1";
        case AttentionPosition::Pos2: return "pos2";
        case AttentionPosition::Pos3: return "pos3";
        case AttentionPosition::Pos4: return "pos4";
    }
    return "?";
}

}  // namespace

std::string model_config_text(const ModelConfig& m) {
    std::ostringstream o;
    o << "[model]\n";
    o << "levels = " << m.levels << "\n";
    o << "steps = " << m.steps << "\n";
    o << "coupling = " << coupling_str(m.coupling) << "\n";
    o << "hidden_channels = " << m.hidden_channels << "\n";
    o << "split_rule = " << split_str(m.split_rule) << "\n";
    o << "attention = " << attention_str(m.attention) << "\n";
    o << "attention_position = " << position_str(m.attention_position) << "\n";
    o << "heads = " << m.heads << "\n";
    o << "patches = " << m.patches << "\n";
    o << "mask_phase = " << m.mask_phase << "\n";
    o << "mask_seed = " << m.mask_seed << "\n";
    o << "mixture_components = " << m.mixture_components << "\n";
    o << "conditional = " << (m.conditional ? "true" : "false") << "\n";
    o << "condition_channels = " << m.condition_channels << "\n";
    o << "isdp_activation = "
      << (m.isdp_activation == SdpActivation::Sigmoid ? "sigmoid" : "softmax") << "\n";
    o << "isdp_pure_eq6 = " << (m.isdp_pure_eq6 ? "true" : "false") << "\n";
    o << "input_channels = " << m.input_channels << "\n";
    o << "input_height = " << m.input_height << "\n";
    o << "input_width = " << m.input_width << "\n";
    o << "seed = " << m.seed << "\n";
    return o.str();
}

std::string run_config_text(const RunConfig& c) {
    std::ostringstream o;
    o << model_config_text(c.model);
    o << "[train]\n";
    o << "lr = " << format_double(c.train.lr) << "\n";
    o << "batch = " << c.train.batch << "\n";
    o << "iters = " << c.train.iters << "\n";
    o << "beta1 = " << format_double(c.train.beta1) << "\n";
    o << "beta2 = " << format_double(c.train.beta2) << "\n";
    o << "eps = " << format_double(c.train.eps) << "\n";
    o << "grad_clip = " << format_double(c.train.grad_clip) << "\n";
    o << "seed = " << c.train.seed << "\n";
    o << "checkpoint_every = " << c.train.checkpoint_every << "\n";
    o << "warmup_iters = " << c.train.warmup_iters << "\n";
    o << "[data]\n";
    o << "kind = " << c.data.kind << "\n";
    o << "name = " << c.data.name << "\n";
    o << "resolution = " << c.data.resolution << "\n";
    o << "count = " << c.data.count << "\n";
    o << "path = " << c.data.path << "\n";
    o << "downscale = " << c.data.downscale << "\n";
    o << "condition = " << c.data.condition << "\n";
    o << "seed = " << c.data.seed << "\n";
    return o.str();
}

ModelConfig parse_model_config_text(const std::string& text) {
    return parse_run_config_text(text).model;
}

Dataset load_dataset(const DataConfig& d) {
    Dataset data;
    if (d.kind == "toy2d") {
        data = toy2d_grid(d.name, d.resolution, d.count, d.seed);
    } else {
        data = dataset_from_idx(d.path, d.downscale, d.seed);
    }
    if (d.condition == "downscale2") attach_downscale_condition(data);
    return data;
}

void apply_data_spec(DataConfig& d, const std::string& spec) {
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::size_t start = 0;
        for (;;) {
            const auto p = s.find(':', start);
            if (p == std::string::npos) {
                out.push_back(s.substr(start));
                return out;
            }
            out.push_back(s.substr(start, p - start));
            start = p + 1;
        }
    };
    if (spec.rfind("toy2d:", 0) == 0) {
        const auto parts = split(spec);
        if (parts.size() < 4 || parts.size() > 5) {
            throw ConfigError("data spec must be toy2d:<name>:<resolution>:<count>[:seed]");
        }
        d.kind = "toy2d";
        d.name = parts[1];
        d.resolution = int(parse_int("resolution", parts[2]));
        d.count = parse_int("count", parts[3]);
        if (parts.size() == 5) d.seed = parse_u64("seed", parts[4]);
    } else if (spec.rfind("idx:", 0) == 0) {
        const auto parts = split(spec);
        if (parts.size() < 2 || parts.size() > 3) {
            throw ConfigError("data spec must be idx:<path>[:downscale]");
        }
        d.kind = "idx";
        d.path = parts[1];
        if (parts.size() == 3) d.downscale = int(parse_int("downscale", parts[2]));
    } else {
        d.kind = "idx";
        d.path = spec;
    }
}

}  // namespace attnflow
