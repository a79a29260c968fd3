#include "dnp/serialize.hpp"

#include <cstring>

namespace dnp::io {

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

BinWriter::BinWriter(const std::string & path)
    : os_(path, std::ios::binary | std::ios::trunc), path_(path) {
    require(bool(os_), errc::io, "cannot open for writing: " + path);
}

void BinWriter::raw(const void * p, size_t n) {
    os_.write(static_cast<const char *>(p), std::streamsize(n));
    require(bool(os_), errc::io, "write failed: " + path_);
}

void BinWriter::magic(const char * tag, uint32_t version) {
    require(std::strlen(tag) == 8, errc::io, "magic tag must be 8 characters");
    raw(tag, 8);
    u32(version);
}

void BinWriter::u8(uint8_t x) { raw(&x, 1); }
void BinWriter::u32(uint32_t x) { raw(&x, 4); }
void BinWriter::u64(uint64_t x) { raw(&x, 8); }
void BinWriter::i64(int64_t x) { raw(&x, 8); }
void BinWriter::f64(double x) { raw(&x, 8); }

void BinWriter::str(const std::string & s) {
    u64(s.size());
    raw(s.data(), s.size());
}

void BinWriter::dvec(std::span<const double> v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
}

void BinWriter::close() {
    os_.flush();
    require(bool(os_), errc::io, "flush failed: " + path_);
    os_.close();
}

BinReader::BinReader(const std::string & path)
    : is_(path, std::ios::binary), path_(path) {
    require(bool(is_), errc::io, "cannot open for reading: " + path);
}

void BinReader::raw(void * p, size_t n) {
    is_.read(static_cast<char *>(p), std::streamsize(n));
    require(size_t(is_.gcount()) == n, errc::io, "truncated file: " + path_);
}

void BinReader::magic(const char * tag, uint32_t expect_version) {
    char got[9] = {};
    raw(got, 8);
    require(std::strncmp(got, tag, 8) == 0, errc::io,
            "wrong file type in " + path_ + " (expected " + tag + ")");
    const uint32_t v = u32();
    require(v == expect_version, errc::io,
            "unsupported format version " + std::to_string(v) + " in " + path_);
}

uint8_t BinReader::u8() {
    uint8_t x;
    raw(&x, 1);
    return x;
}
uint32_t BinReader::u32() {
    uint32_t x;
    raw(&x, 4);
    return x;
}
uint64_t BinReader::u64() {
    uint64_t x;
    raw(&x, 8);
    return x;
}
int64_t BinReader::i64() {
    int64_t x;
    raw(&x, 8);
    return x;
}
double BinReader::f64() {
    double x;
    raw(&x, 8);
    return x;
}

std::string BinReader::str() {
    const uint64_t n = u64();
    require(n <= (1u << 20), errc::io, "implausible string length in " + path_);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
}

std::vector<double> BinReader::dvec() {
    const uint64_t n = u64();
    require(n <= (uint64_t(1) << 28), errc::io, "implausible vector length in " + path_);
    std::vector<double> v(n);
    raw(v.data(), n * sizeof(double));
    return v;
}

void BinReader::expect_end() {
    char c;
    is_.read(&c, 1);
    require(is_.eof(), errc::io, "trailing bytes in " + path_);
}

// ---------------------------------------------------------------------------
// shared tensor-list helpers (name + shape + data per entry)
// ---------------------------------------------------------------------------

namespace {

void write_refs(BinWriter & out, const std::vector<ParamRef> & refs) {
    out.u64(refs.size());
    for (const auto & r : refs) {
        out.str(r.name);
        out.u64(r.shape.size());
        for (int d : r.shape) {
            out.i64(d);
        }
        out.dvec({r.data, r.n});
    }
}

void read_refs(BinReader & in, const std::vector<ParamRef> & refs) {
    const uint64_t n = in.u64();
    require(n == refs.size(), errc::io, "tensor count mismatch");
    for (const auto & r : refs) {
        const std::string name = in.str();
        require(name == r.name, errc::io, "tensor order mismatch: expected " + r.name +
                                              ", file has " + name);
        const uint64_t nd = in.u64();
        require(nd == r.shape.size(), errc::io, "tensor rank mismatch for " + r.name);
        for (int d : r.shape) {
            require(in.i64() == d, errc::io, "tensor shape mismatch for " + r.name);
        }
        const auto v = in.dvec();
        require(v.size() == r.n, errc::io, "tensor size mismatch for " + r.name);
        std::copy(v.begin(), v.end(), r.data);
    }
}

void write_adam(BinWriter & out, const hppo::Adam & a) {
    out.f64(a.beta1);
    out.f64(a.beta2);
    out.f64(a.eps);
    out.i64(a.t);
    out.dvec(a.m);
    out.dvec(a.v);
}

hppo::Adam read_adam(BinReader & in) {
    hppo::Adam a;
    a.beta1 = in.f64();
    a.beta2 = in.f64();
    a.eps = in.f64();
    a.t = in.i64();
    a.m = in.dvec();
    a.v = in.dvec();
    require(a.m.size() == a.v.size(), errc::io, "adam moment size mismatch");
    return a;
}

void write_ppo_cfg(BinWriter & out, const hppo::PPOConfig & c) {
    out.f64(c.gamma);
    out.f64(c.lambda_gae);
    out.f64(c.eps_clip);
    out.f64(c.c_value);
    out.f64(c.c_entropy);
    out.i64(c.epochs);
    out.i64(c.minibatch);
    out.f64(c.lr_high);
    out.f64(c.lr_low);
    out.i64(c.horizon);
    out.i64(c.d_a);
    out.i64(c.hidden);
}

hppo::PPOConfig read_ppo_cfg(BinReader & in) {
    hppo::PPOConfig c;
    c.gamma = in.f64();
    c.lambda_gae = in.f64();
    c.eps_clip = in.f64();
    c.c_value = in.f64();
    c.c_entropy = in.f64();
    c.epochs = int(in.i64());
    c.minibatch = int(in.i64());
    c.lr_high = in.f64();
    c.lr_low = in.f64();
    c.horizon = int(in.i64());
    c.d_a = int(in.i64());
    c.hidden = int(in.i64());
    c.validate();
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// model weights
// ---------------------------------------------------------------------------

void save_weights(const std::string & path, tinylm::Weights & w) {
    BinWriter out(path);
    out.magic("DNPLMWTS", 1);
    const auto & c = w.cfg;
    out.i64(c.vocab_size);
    out.i64(c.context_len);
    out.i64(c.n_layers);
    out.i64(c.d_model);
    out.i64(c.n_heads);
    out.i64(c.d_ff);
    out.u64(c.seed);
    write_refs(out, tinylm::param_refs(w));
    out.close();
}

tinylm::Weights load_weights(const std::string & path) {
    BinReader in(path);
    in.magic("DNPLMWTS", 1);
    tinylm::ModelConfig c;
    c.vocab_size = int(in.i64());
    c.context_len = int(in.i64());
    c.n_layers = int(in.i64());
    c.d_model = int(in.i64());
    c.n_heads = int(in.i64());
    c.d_ff = int(in.i64());
    c.seed = in.u64();
    c.validate();
    tinylm::Weights w = tinylm::init_weights(c);
    read_refs(in, tinylm::param_refs(w));
    in.expect_end();
    return w;
}

// ---------------------------------------------------------------------------
// agent
// ---------------------------------------------------------------------------

std::array<uint64_t, 4> AgentCheckpoint::rng(const std::string & name) const {
    for (const auto & [n, s] : rng_states) {
        if (n == name) {
            return s;
        }
    }
    fail(errc::io, "checkpoint has no rng stream named " + name);
}

void save_agent(const std::string & path, AgentCheckpoint & ck) {
    BinWriter out(path);
    out.magic("DNPAGENT", 1);
    write_ppo_cfg(out, ck.cfg);
    out.i64(ck.params.state_dim);
    out.i64(ck.params.n_h);
    out.i64(ck.params.n_m);
    out.i64(ck.params.d_a);
    write_refs(out, ck.params.refs());
    write_adam(out, ck.opt_high);
    write_adam(out, ck.opt_low);
    out.i64(ck.update_index);
    out.i64(ck.episode_index);
    out.u64(ck.rng_states.size());
    for (const auto & [name, s] : ck.rng_states) {
        out.str(name);
        for (uint64_t word : s) {
            out.u64(word);
        }
    }
    out.close();
}

AgentCheckpoint load_agent(const std::string & path) {
    BinReader in(path);
    in.magic("DNPAGENT", 1);
    AgentCheckpoint ck;
    ck.cfg = read_ppo_cfg(in);
    const int state_dim = int(in.i64());
    const int n_h = int(in.i64());
    const int n_m = int(in.i64());
    const int d_a = int(in.i64());
    require(d_a == ck.cfg.d_a, errc::io, "agent checkpoint: d_a disagrees with config");
    ck.params = hppo::PolicyParams::init(state_dim, n_h, n_m, ck.cfg, 0);
    read_refs(in, ck.params.refs());
    ck.opt_high = read_adam(in);
    ck.opt_low = read_adam(in);
    ck.update_index = in.i64();
    ck.episode_index = in.i64();
    const uint64_t n_rng = in.u64();
    require(n_rng <= 64, errc::io, "implausible rng stream count");
    for (uint64_t i = 0; i < n_rng; ++i) {
        std::pair<std::string, std::array<uint64_t, 4>> entry;
        entry.first = in.str();
        for (auto & word : entry.second) {
            word = in.u64();
        }
        ck.rng_states.push_back(std::move(entry));
    }
    in.expect_end();
    return ck;
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

void save_mask(const std::string & path, const adamask::MaskParams & p) {
    BinWriter out(path);
    out.magic("DNPAMASK", 1);
    out.f64(p.cfg.tau_gate);
    out.f64(p.cfg.eps_th);
    out.f64(p.cfg.lambda_sparse);
    out.f64(p.cfg.lambda_l0);
    out.f64(p.cfg.lr);
    out.f64(p.cfg.baseline_decay);
    out.u64(p.spec.categories.size());
    for (size_t k = 0; k < p.spec.categories.size(); ++k) {
        const auto & blocks = p.spec.categories[k];
        out.u64(blocks.size());
        for (size_t b = 0; b < blocks.size(); ++b) {
            out.i64(blocks[b].layer);
            out.i64(blocks[b].begin);
            out.i64(blocks[b].end);
            out.dvec(p.theta[k][b]);
        }
    }
    out.f64(p.reward_baseline);
    out.close();
}

adamask::MaskParams load_mask(const std::string & path) {
    BinReader in(path);
    in.magic("DNPAMASK", 1);
    adamask::MaskConfig cfg;
    cfg.tau_gate = in.f64();
    cfg.eps_th = in.f64();
    cfg.lambda_sparse = in.f64();
    cfg.lambda_l0 = in.f64();
    cfg.lr = in.f64();
    cfg.baseline_decay = in.f64();
    cfg.validate();
    adamask::CategorySpec spec;
    const uint64_t n_cat = in.u64();
    require(n_cat >= 1 && n_cat <= 4096, errc::io, "implausible category count");
    std::vector<std::vector<std::vector<double>>> theta(n_cat);
    spec.categories.resize(n_cat);
    for (uint64_t k = 0; k < n_cat; ++k) {
        const uint64_t n_blocks = in.u64();
        require(n_blocks >= 1 && n_blocks <= 4096, errc::io, "implausible block count");
        for (uint64_t b = 0; b < n_blocks; ++b) {
            adamask::CategoryBlock blk;
            blk.layer = int(in.i64());
            blk.begin = int(in.i64());
            blk.end = int(in.i64());
            auto th = in.dvec();
            require(int(th.size()) == blk.end - blk.begin, errc::io,
                    "mask block size disagrees with theta length");
            spec.categories[k].push_back(blk);
            theta[k].push_back(std::move(th));
        }
    }
    adamask::MaskParams p = adamask::MaskParams::init(spec, cfg);
    p.theta = std::move(theta);
    p.reward_baseline = in.f64();
    in.expect_end();
    return p;
}

}  // namespace dnp::io
