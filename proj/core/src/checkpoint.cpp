#include "attnflow/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "attnflow/config.hpp"

namespace attnflow {

namespace {

void write_u32(std::ostream& o, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
    o.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& o, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    o.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& o, const std::vector<double>& v) {
    for (const double d : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        write_u64(o, bits);
    }
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("checkpoint " + path + ": truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("checkpoint " + path + ": truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

void read_f64(std::istream& in, const std::string& path, std::vector<double>& out,
              std::uint64_t count) {
    out.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t bits = read_u64(in, path);
        std::memcpy(&out[i], &bits, 8);
    }
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write("AFCK", 4);
    write_u32(out, kVersion);
    write_u64(out, config_text.size());
    out.write(config_text.data(), std::streamsize(config_text.size()));
    write_u64(out, std::uint64_t(iteration));
    write_u64(out, std::uint64_t(adamax_t));
    out.put(actnorm_initialized ? 1 : 0);
    out.put(has_opt_state ? 1 : 0);
    write_u64(out, params.size());
    for (const auto& [name, t] : params) {
        write_u64(out, name.size());
        out.write(name.data(), std::streamsize(name.size()));
        write_u32(out, 4);
        write_u64(out, std::uint64_t(t.shape.b));
        write_u64(out, std::uint64_t(t.shape.c));
        write_u64(out, std::uint64_t(t.shape.h));
        write_u64(out, std::uint64_t(t.shape.w));
        write_f64(out, t.data);
    }
    if (has_opt_state) {
        for (const auto& [m, u] : moments) {
            write_f64(out, m);
            write_f64(out, u);
        }
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "AFCK", 4) != 0) {
        throw FormatError("checkpoint " + path + ": bad magic, expected AFCK");
    }
    const std::uint32_t version = read_u32(in, path);
    if (version != kVersion) {
        throw FormatError("checkpoint " + path + ": version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kVersion) + ")");
    }
    Checkpoint ck;
    const std::uint64_t cfg_len = read_u64(in, path);
    if (cfg_len > (1u << 20)) {
        throw FormatError("checkpoint " + path + ": config length " + std::to_string(cfg_len) +
                          " implausible");
    }
    ck.config_text.resize(cfg_len);
    in.read(ck.config_text.data(), std::streamsize(cfg_len));
    if (!in) throw FormatError("checkpoint " + path + ": truncated config text");
    ck.iteration = std::int64_t(read_u64(in, path));
    ck.adamax_t = std::int64_t(read_u64(in, path));
    ck.actnorm_initialized = in.get() == 1;
    ck.has_opt_state = in.get() == 1;
    if (!in) throw FormatError("checkpoint " + path + ": truncated header");
    const std::uint64_t n_params = read_u64(in, path);
    for (std::uint64_t p = 0; p < n_params; ++p) {
        const std::uint64_t name_len = read_u64(in, path);
        if (name_len > (1u << 16)) {
            throw FormatError("checkpoint " + path + ": parameter name length implausible");
        }
        std::string name(name_len, '\0');
        in.read(name.data(), std::streamsize(name_len));
        if (!in) throw FormatError("checkpoint " + path + ": truncated parameter name");
        const std::uint32_t rank = read_u32(in, path);
        if (rank != 4) {
            throw FormatError("checkpoint " + path + ": parameter '" + name + "' has rank " +
                              std::to_string(rank) + ", expected 4");
        }
        Shape s;
        s.b = std::int64_t(read_u64(in, path));
        s.c = std::int64_t(read_u64(in, path));
        s.h = std::int64_t(read_u64(in, path));
        s.w = std::int64_t(read_u64(in, path));
        if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.numel() > (std::int64_t(1) << 32)) {
            throw FormatError("checkpoint " + path + ": parameter '" + name +
                              "' has implausible extents " + s.str());
        }
        std::vector<double> data;
        read_f64(in, path + " (parameter '" + name + "')", data, std::uint64_t(s.numel()));
        ck.params.emplace_back(name, Tensor(s, std::move(data)));
    }
    if (ck.has_opt_state) {
        for (std::uint64_t p = 0; p < n_params; ++p) {
            const std::uint64_t n = std::uint64_t(ck.params[p].second.numel());
            std::vector<double> m, u;
            read_f64(in, path, m, n);
            read_f64(in, path, u, n);
            ck.moments.emplace_back(std::move(m), std::move(u));
        }
    }
    return ck;
}

Checkpoint Checkpoint::capture(FlowModel& model, std::int64_t iteration, const AdamaxState* opt) {
    Checkpoint ck;
    ck.config_text = model_config_text(model.config());
    ck.iteration = iteration;
    ck.actnorm_initialized = model.actnorm_initialized();
    for (auto& [name, t] : model.parameters()) {
        ck.params.emplace_back(name, *t);
        ck.params.back().second.tape_id = -1;
        ck.params.back().second.tape_epoch = 0;
    }
    if (opt) {
        ck.has_opt_state = true;
        ck.adamax_t = opt->t;
        for (auto& [name, t] : ck.params) {
            const auto it = opt->moments.find(name);
            if (it != opt->moments.end() && !it->second.m.empty()) {
                ck.moments.emplace_back(it->second.m, it->second.u);
            } else {
                ck.moments.emplace_back(std::vector<double>(t.data.size(), 0.0),
                                        std::vector<double>(t.data.size(), 0.0));
            }
        }
    }
    return ck;
}

void Checkpoint::restore_into(FlowModel& model, AdamaxState* opt) const {
    ParamMap params = model.parameters();
    if (params.size() != this->params.size()) {
        throw FormatError("checkpoint: parameter count " + std::to_string(this->params.size()) +
                          " does not match model (" + std::to_string(params.size()) + ")");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, stored] = this->params[i];
        if (name != params[i].first) {
            throw FormatError("checkpoint: parameter name '" + name + "' does not match model '" +
                              params[i].first + "'");
        }
        if (!(stored.shape == params[i].second->shape)) {
            throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                              stored.shape.str() + ", model expects " +
                              params[i].second->shape.str());
        }
        params[i].second->data = stored.data;
        params[i].second->tape_id = -1;
        params[i].second->tape_epoch = 0;
    }
    model.set_actnorm_initialized(actnorm_initialized);
    if (opt) {
        opt->moments.clear();
        opt->t = adamax_t;
        if (has_opt_state) {
            for (std::size_t i = 0; i < this->params.size(); ++i) {
                auto& m = opt->moments[this->params[i].first];
                m.m = moments[i].first;
                m.u = moments[i].second;
            }
        }
    }
}

FlowModel Checkpoint::rebuild(AdamaxState* opt) const {
    const ModelConfig cfg = parse_model_config_text(config_text);
    FlowModel model = FlowModel::build(cfg);
    restore_into(model, opt);
    return model;
}

}  // namespace attnflow
